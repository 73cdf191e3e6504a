"""Pinhole camera model, orbit poses, per-pixel ray generation, and the
keypoint-based head-translation rectification.

Conventions (used throughout the project):
  * world up is +Y; the scene lives in the cube [-1, 1]^3
  * camera-to-world rotation R has columns (x_c, y_c, z_c); the camera looks
    along -z_c
  * pixel coordinates (u, v): u grows rightward, v grows downward; pixel
    (i, j) has center (u=i, v=j)
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

CUBE_HALF_DIAGONAL = math.sqrt(3.0)


@dataclass
class CameraIntrinsics:
    focal: float          # pixels
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.focal <= 0:
            raise ValueError(f"focal must be positive, got {self.focal}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image bounds")

    def to_dict(self) -> dict:
        return {"focal": self.focal, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(d["focal"], d["cx"], d["cy"], d["width"], d["height"])


def default_intrinsics(size: int = 64) -> CameraIntrinsics:
    # focal chosen so the scene cube roughly fills the frame from orbit radius ~2.2
    return CameraIntrinsics(focal=0.7 * size, cx=size / 2, cy=size / 2, width=size, height=size)


@dataclass
class CameraPose:
    rotation: torch.Tensor     # (3, 3) camera-to-world
    translation: torch.Tensor  # (3,) world units

    def __post_init__(self):
        self.rotation = torch.as_tensor(self.rotation, dtype=torch.float64).reshape(3, 3)
        self.translation = torch.as_tensor(self.translation, dtype=torch.float64).reshape(3)
        err = (self.rotation.T @ self.rotation - torch.eye(3, dtype=torch.float64)).abs().max()
        if float(err) > 1e-6:
            raise ValueError(f"rotation not orthonormal (max deviation {float(err):.2e})")
        if float(torch.det(self.rotation)) < 0:
            raise ValueError("rotation must have determinant +1")

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.reshape(-1).tolist(),
                "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraPose":
        return cls(torch.tensor(d["rotation"]).reshape(3, 3), torch.tensor(d["translation"]))

    def as_vector(self) -> torch.Tensor:
        """Flattened (R | t) 12-vector, used for pose-distance metrics."""
        return torch.cat([self.rotation.reshape(-1), self.translation])


@dataclass
class Ray:
    origin: torch.Tensor
    direction: torch.Tensor
    t_near: float
    t_far: float

    def __post_init__(self):
        if abs(float(self.direction.norm()) - 1.0) > 1e-6:
            raise ValueError("ray direction must be unit length")
        if not self.t_near < self.t_far:
            raise ValueError("require t_near < t_far")


def pose_from_orbit(yaw: float, pitch: float, radius: float,
                    lookat: torch.Tensor | None = None) -> CameraPose:
    """Camera on a sphere around `lookat`, optical axis through it, up-vector +Y.

    yaw=0, pitch=0 places the camera at lookat + (0, 0, radius) looking down -Z.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    if abs(pitch) >= math.pi / 2:
        raise ValueError("require |pitch| < pi/2")
    lookat = torch.zeros(3, dtype=torch.float64) if lookat is None else \
        torch.as_tensor(lookat, dtype=torch.float64)
    pos = lookat + radius * torch.tensor([
        math.sin(yaw) * math.cos(pitch),
        math.sin(pitch),
        math.cos(yaw) * math.cos(pitch),
    ], dtype=torch.float64)
    z_c = pos - lookat
    z_c = z_c / z_c.norm()
    up = torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64)
    x_c = torch.linalg.cross(up, z_c)
    if float(x_c.norm()) < 1e-8:
        raise ValueError("degenerate orbit pose: view axis parallel to up vector")
    x_c = x_c / x_c.norm()
    y_c = torch.linalg.cross(z_c, x_c)
    rotation = torch.stack([x_c, y_c, z_c], dim=1)
    return CameraPose(rotation, pos)


def pixel_ray(intr: CameraIntrinsics, pose: CameraPose, u: float, v: float,
              t_near: float | None = None, t_far: float | None = None) -> Ray:
    """World-space ray through continuous pixel coordinate (u, v)."""
    tn, tf = (t_near, t_far) if t_near is not None else cube_t_range(pose)
    d_cam = torch.tensor([(u - intr.cx) / intr.focal,
                          -(v - intr.cy) / intr.focal,
                          -1.0], dtype=torch.float64)
    d = pose.rotation @ d_cam
    d = d / d.norm()
    return Ray(pose.translation.clone(), d, tn, tf)


def camera_rays(intr: CameraIntrinsics, pose: CameraPose,
                dtype: torch.dtype = torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    """One ray per pixel center. Returns origins (H, W, 3) and unit
    directions (H, W, 3); the ray at the principal point coincides with the
    optical axis.
    """
    u = torch.arange(intr.width, dtype=torch.float64)
    v = torch.arange(intr.height, dtype=torch.float64)
    vv, uu = torch.meshgrid(v, u, indexing="ij")
    dirs_cam = torch.stack([(uu - intr.cx) / intr.focal,
                            -(vv - intr.cy) / intr.focal,
                            -torch.ones_like(uu)], dim=-1)        # (H, W, 3)
    dirs = dirs_cam @ pose.rotation.T
    dirs = dirs / dirs.norm(dim=-1, keepdim=True)
    origins = pose.translation.expand_as(dirs)
    return origins.to(dtype).contiguous(), dirs.to(dtype).contiguous()


def project(intr: CameraIntrinsics, pose: CameraPose, points: torch.Tensor) -> torch.Tensor:
    """World points (..., 3) -> continuous pixel coordinates (..., 2)."""
    pts = torch.as_tensor(points, dtype=torch.float64)
    q = (pts - pose.translation) @ pose.rotation   # camera coords
    depth = -q[..., 2]
    u = intr.cx + intr.focal * q[..., 0] / depth
    v = intr.cy - intr.focal * q[..., 1] / depth
    return torch.stack([u, v], dim=-1)


def cube_t_range(pose: CameraPose) -> tuple[float, float]:
    """Default sampling interval guaranteeing full [-1,1]^3 coverage."""
    d = float(pose.translation.norm())
    return max(d - CUBE_HALF_DIAGONAL, 1e-3), d + CUBE_HALF_DIAGONAL


def scale_intrinsics(intr: CameraIntrinsics, factor: int) -> CameraIntrinsics:
    """Intrinsics of the image downsampled by block-averaging `factor`.

    Coarse pixel i covers fine pixels [k*i, k*i + k); its center sits at fine
    coordinate k*i + (k-1)/2, hence the principal-point shift.
    """
    k = factor
    if intr.width % k or intr.height % k:
        raise ValueError(f"resolution {intr.width}x{intr.height} not divisible by {k}")
    return CameraIntrinsics(intr.focal / k, (intr.cx - (k - 1) / 2) / k,
                            (intr.cy - (k - 1) / 2) / k,
                            intr.width // k, intr.height // k)


def rectify_translation(source_keypoints: torch.Tensor, driving_keypoints: torch.Tensor,
                        intr: CameraIntrinsics, depth: float) -> torch.Tensor:
    """Pixel offset between face centers converted to camera-coordinate offsets.

    Face center is the arithmetic mean of the keypoints; the returned offset is
    (du * depth / f, dv * depth / f, 0) with (du, dv) = driving center minus
    source center, expressed in image-aligned camera axes (x right, y down).
    """
    src = torch.as_tensor(source_keypoints, dtype=torch.float64).reshape(-1, 2)
    drv = torch.as_tensor(driving_keypoints, dtype=torch.float64).reshape(-1, 2)
    if src.numel() == 0 or drv.numel() == 0:
        raise ValueError("keypoint sets must be non-empty")
    if src.shape != drv.shape:
        raise ValueError(f"keypoint sets must correspond: {src.shape} vs {drv.shape}")
    duv = drv.mean(dim=0) - src.mean(dim=0)
    return torch.tensor([float(duv[0]) * depth / intr.focal,
                         float(duv[1]) * depth / intr.focal,
                         0.0], dtype=torch.float64)


def apply_rectification(pose: CameraPose, offset: torch.Tensor) -> CameraPose:
    """Shift a camera so the rendered face reproduces the measured pixel offset.

    The offset from `rectify_translation` lives in image-aligned axes (y down);
    the camera frame has y up and moving the camera shifts the image the
    opposite way, hence (-ox, +oy, 0) in camera coordinates.
    """
    o = torch.as_tensor(offset, dtype=torch.float64).reshape(3)
    delta_cam = torch.tensor([-o[0], o[1], 0.0], dtype=torch.float64)
    return CameraPose(pose.rotation.clone(), pose.translation + pose.rotation @ delta_cam)
