"""Emission-absorption volume rendering of (optionally deformed) tri-plane
volumes into feature images, plus the learned 2x upsampler that completes
the hybrid renderer.

Quadrature: rays are split into N equal bins of width dt; one sample per bin
(midpoint, or stratified when jitter is on) with alpha_i = 1 - exp(-sigma_i
* dt), transmittance T_i = prod_{j<i}(1 - alpha_j) and weights w_i = T_i *
alpha_i. The residual transmittance used for background compositing is
defined as 1 - sum(w), so compositing weights sum to one identically.

Stratified jitter is counter-based on (seed, ray index, sample index), so
chunked/parallel renders are bitwise identical to serial ones.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .deformation import DeformationField
from .geometry import CameraIntrinsics, CameraPose, camera_rays, cube_t_range
from .rng import mix_seed
from .triplane import FEATURE_CHANNELS, VolumeDecoder, sample_triplane

DEPTH_EPS = 1e-10


@dataclass
class SamplingConfig:
    n_samples: int = 128           # 48 for training presets, 128 for evaluation
    jitter: bool = False
    t_near: float | None = None    # defaults to full cube coverage for the pose
    t_far: float | None = None
    background: tuple[float, float, float] = (0.5, 0.5, 0.5)
    seed: int = 0
    chunk: int = 4096              # rays per chunk; no effect on results

    def __post_init__(self):
        if self.n_samples < 2:
            raise ValueError("n_samples must be >= 2")
        if self.t_near is not None and self.t_far is not None and not self.t_near < self.t_far:
            raise ValueError("require t_near < t_far")


@dataclass
class RenderOutput:
    features: torch.Tensor   # (C, H, W), first 3 channels RGB
    depth: torch.Tensor      # (H, W) expected ray depth
    alpha: torch.Tensor      # (H, W) accumulated opacity in [0, 1]


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = x + np.uint64(0x9E3779B97F4A7C15)
    z = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def jitter_uniform(seed: int, ray_indices: np.ndarray, n_samples: int) -> np.ndarray:
    """Deterministic uniform [0,1) jitter keyed by (seed, ray, sample)."""
    rays = ray_indices.astype(np.uint64).reshape(-1, 1)
    samples = np.arange(n_samples, dtype=np.uint64).reshape(1, -1)
    key = np.uint64(mix_seed(seed))
    with np.errstate(over="ignore"):
        bits = _splitmix64(key ^ _splitmix64(rays * np.uint64(n_samples) + samples))
    return ((bits >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)).astype(np.float64)


def _background_feature(cfg: SamplingConfig, channels: int, dtype, device) -> torch.Tensor:
    bg = torch.zeros(channels, dtype=dtype, device=device)
    bg[:3] = torch.tensor(cfg.background, dtype=dtype, device=device)
    return bg


def integrate_rays(field_fn, origins: torch.Tensor, directions: torch.Tensor,
                   t_near: float, t_far: float, cfg: SamplingConfig,
                   feature_dim: int, ray_offset: int = 0
                   ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Composite a batch of rays through a density/feature field.

    field_fn maps in-cube points (M, 3) -> (sigma (M,), features (M, C));
    points outside [-1, 1]^3 contribute zero density and are never passed to
    the field. Returns (features (R, C), depth (R,), alpha (R,)).
    """
    n_rays = origins.shape[0]
    n = cfg.n_samples
    dtype, device = origins.dtype, origins.device
    dt = (t_far - t_near) / n

    if cfg.jitter:
        u = torch.from_numpy(jitter_uniform(cfg.seed, np.arange(ray_offset, ray_offset + n_rays), n)).to(dtype)
    else:
        u = torch.full((1, n), 0.5, dtype=dtype)
    t = t_near + (torch.arange(n, dtype=dtype) + u) * dt            # (R or 1, N)
    t = t.expand(n_rays, n)

    pts = origins[:, None, :] + directions[:, None, :] * t[..., None]
    flat = pts.reshape(-1, 3)
    inside = (flat.abs() <= 1.0).all(dim=-1)

    sigma = torch.zeros(flat.shape[0], dtype=dtype, device=device)
    feats = torch.zeros(flat.shape[0], feature_dim, dtype=dtype, device=device)
    idx = inside.nonzero(as_tuple=True)[0]
    if idx.numel() > 0:
        s_in, f_in = field_fn(flat[idx])
        sigma = sigma.index_copy(0, idx, s_in)
        feats = feats.index_copy(0, idx, f_in)
    sigma = sigma.reshape(n_rays, n)
    feats = feats.reshape(n_rays, n, feature_dim)

    alpha_i = 1.0 - torch.exp(-sigma * dt)                          # (R, N)
    trans = torch.cumprod(1.0 - alpha_i, dim=-1)
    trans = torch.cat([torch.ones_like(trans[:, :1]), trans[:, :-1]], dim=-1)
    weights = trans * alpha_i                                       # (R, N)

    acc = weights.sum(dim=-1)                                       # alpha map
    t_final = 1.0 - acc                                             # exact complement
    bg = _background_feature(cfg, feature_dim, dtype, device)
    features = (weights[..., None] * feats).sum(dim=1) + t_final[:, None] * bg
    depth = (weights * t).sum(dim=-1) / torch.clamp(acc, min=DEPTH_EPS)
    depth = depth.clamp(t_near, t_far)
    return features, depth, acc


def resolve_t_range(cfg: SamplingConfig, pose: CameraPose) -> tuple[float, float]:
    if cfg.t_near is not None and cfg.t_far is not None:
        return cfg.t_near, cfg.t_far
    return cube_t_range(pose)


def render_field(field_fn, intr: CameraIntrinsics, pose: CameraPose,
                 cfg: SamplingConfig, feature_dim: int,
                 dtype: torch.dtype = torch.float32) -> RenderOutput:
    """Render the full pixel grid of a camera through an arbitrary field."""
    t_near, t_far = resolve_t_range(cfg, pose)
    origins, dirs = camera_rays(intr, pose, dtype=dtype)
    h, w = origins.shape[:2]
    origins = origins.reshape(-1, 3)
    dirs = dirs.reshape(-1, 3)

    feat_chunks, depth_chunks, alpha_chunks = [], [], []
    for start in range(0, h * w, cfg.chunk):
        f, d, a = integrate_rays(field_fn, origins[start:start + cfg.chunk],
                                 dirs[start:start + cfg.chunk], t_near, t_far,
                                 cfg, feature_dim, ray_offset=start)
        feat_chunks.append(f)
        depth_chunks.append(d)
        alpha_chunks.append(a)
    features = torch.cat(feat_chunks, dim=0).T.reshape(feature_dim, h, w)
    depth = torch.cat(depth_chunks, dim=0).reshape(h, w)
    alpha = torch.cat(alpha_chunks, dim=0).reshape(h, w)
    return RenderOutput(features, depth, alpha)


def neural_field(planes: torch.Tensor, decoder: VolumeDecoder,
                 deformation: DeformationField | None = None,
                 signal: torch.Tensor | None = None):
    """Field over target-space points backed by a (possibly deformed) volume."""
    if (deformation is None) != (signal is None):
        raise ValueError("deformation field and control signal must be given together")

    def field_fn(points: torch.Tensor):
        x = deformation(points, signal) if deformation is not None else points
        return decoder(sample_triplane(planes, x))
    return field_fn


def render_volume(planes: torch.Tensor, decoder: VolumeDecoder,
                  intr: CameraIntrinsics, pose: CameraPose, cfg: SamplingConfig,
                  deformation: DeformationField | None = None,
                  signal: torch.Tensor | None = None) -> RenderOutput:
    """Render a tri-plane volume, optionally warped by the deformation field."""
    dtype = planes.dtype
    fn = neural_field(planes, decoder, deformation, signal)
    return render_field(fn, intr, pose, cfg, decoder.out_channels, dtype=dtype)


class SuperResolver(nn.Module):
    """Learned 2x upsampler from rendered feature images to RGB.

    In bypass mode it returns a nearest-neighbor 2x blowup of the first three
    feature channels (clamped), which keeps the render path usable without
    trained weights.
    """

    def __init__(self, in_channels: int = FEATURE_CHANNELS, hidden: int = 40,
                 bypass: bool = False):
        super().__init__()
        self.in_channels = in_channels
        self.bypass = bypass
        self.body = nn.Sequential(
            nn.Conv2d(in_channels, hidden, 3, padding=1), nn.GELU(),
            nn.Conv2d(hidden, hidden, 3, padding=1), nn.GELU(),
        )
        self.up = nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False)
        self.head = nn.Sequential(
            nn.Conv2d(hidden, hidden // 2, 3, padding=1), nn.GELU(),
            nn.Conv2d(hidden // 2, 3, 3, padding=1),
        )

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        """features (C, H, W) -> RGB (3, 2H, 2W) in [0, 1]."""
        if features.shape[0] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} feature channels, "
                             f"got {features.shape[0]}")
        if self.bypass:
            return self.up(features[None, :3]).squeeze(0).clamp(0.0, 1.0)
        x = features.unsqueeze(0)
        x = self.head(self.up(self.body(x)))
        return torch.sigmoid(x).squeeze(0)


def superresolve(sr: SuperResolver, out: RenderOutput) -> torch.Tensor:
    return sr(out.features)
