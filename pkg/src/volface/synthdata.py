"""Procedural head-scene generator and on-disk dataset.

Each identity is a set of colored Gaussian blobs anchored to the blendshape
control points, so the whole scene moves analytically with (alpha, beta).
Ground-truth frames are rendered from the analytic field through the shared
ray integrator at high sample count, and every frame stores its exact
generation parameters (the tracking oracle just reads them back).

Layout: dataset_root/clip_<id>/frame_<n>.ppm plus manifest.json holding the
blendshape basis, scene specs, per-frame records, and the config hash.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .geometry import CameraIntrinsics, CameraPose, default_intrinsics, pose_from_orbit, project
from .motionmodel import BlendshapeBasis, make_basis, shape
from .ppm import read_ppm, write_ppm
from .renderer import SamplingConfig, render_field
from .rng import mix_seed

MANIFEST_VERSION = 1
BLOB_AMPLITUDE = 400.0          # near-opaque interiors, crisp silhouettes
SOFTNESS_RANGE = (0.05, 0.12)
SCENE_T_MARGIN = 1.05           # blob mass lies within this distance of the orbit center


@dataclass
class SceneSpec:
    identity_seed: int
    softness: list[float]        # Gaussian width per blob (doubles as blob radius)
    colors: list[list[float]]    # (K, 3) in [0, 1]
    amplitude: float = BLOB_AMPLITUDE
    mouth_index: int = 0

    def to_dict(self) -> dict:
        return {"identity_seed": self.identity_seed, "softness": self.softness,
                "colors": self.colors, "amplitude": self.amplitude,
                "mouth_index": self.mouth_index}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(d["identity_seed"], d["softness"], d["colors"],
                   d["amplitude"], d["mouth_index"])


def make_identity(seed: int, k: int = 12, mouth_index: int = 0) -> SceneSpec:
    gen = torch.Generator().manual_seed(mix_seed(seed, "scene-spec"))
    softness = torch.empty(k, dtype=torch.float64).uniform_(
        SOFTNESS_RANGE[0], SOFTNESS_RANGE[1], generator=gen)
    colors = torch.empty(k, 3, dtype=torch.float64).uniform_(0.05, 0.95, generator=gen)
    if not 0 <= mouth_index < k:
        raise ValueError(f"mouth_index {mouth_index} out of range for {k} blobs")
    return SceneSpec(seed, softness.tolist(), colors.tolist(),
                     BLOB_AMPLITUDE, mouth_index)


def scene_field(spec: SceneSpec, basis: BlendshapeBasis, alpha: torch.Tensor,
                beta: torch.Tensor, points: torch.Tensor
                ) -> tuple[torch.Tensor, torch.Tensor]:
    """Analytic density/color at points (N, 3); differentiable wrt beta.

    sigma is a sum of isotropic Gaussians at the blendshape control points;
    color is the density-weighted mixture of the blob colors.
    """
    dtype = points.dtype
    centers = shape(basis, alpha, beta).to(dtype)                 # (K, 3)
    colors = torch.tensor(spec.colors, dtype=dtype)
    inv_two_s2 = 1.0 / (2.0 * torch.tensor(spec.softness, dtype=dtype) ** 2)
    d2 = (points * points).sum(-1, keepdim=True) \
        - 2.0 * (points @ centers.T) + (centers * centers).sum(-1)
    g = spec.amplitude * torch.exp(-d2 * inv_two_s2)              # (N, K)
    sigma = g.sum(-1)
    rgb = (g / (sigma[:, None] + 1e-12)) @ colors
    return sigma, rgb


def scene_sampling(pose: CameraPose, n_samples: int = 1024, jitter: bool = False,
                   seed: int = 0) -> SamplingConfig:
    """Sampling interval tightened to the shell that actually holds blob mass
    (the analytic density is numerically zero outside it)."""
    radius = float(pose.translation.norm())
    return SamplingConfig(n_samples=n_samples, jitter=jitter, seed=seed,
                          t_near=radius - SCENE_T_MARGIN, t_far=radius + SCENE_T_MARGIN)


def render_oracle(spec: SceneSpec, basis: BlendshapeBasis, alpha: torch.Tensor,
                  beta: torch.Tensor, intr: CameraIntrinsics, pose: CameraPose,
                  n_samples: int = 1024) -> torch.Tensor:
    """Converged ground-truth RGB render (3, H, W) of the analytic scene."""
    alpha32 = torch.as_tensor(alpha, dtype=torch.float32)
    beta32 = torch.as_tensor(beta, dtype=torch.float32)

    def fn(points):
        return scene_field(spec, basis, alpha32, beta32, points)
    with torch.no_grad():
        out = render_field(fn, intr, pose, scene_sampling(pose, n_samples), feature_dim=3)
    return out.features


@dataclass
class FrameRecord:
    image_path: str
    alpha: torch.Tensor          # (D_id,)
    beta: torch.Tensor           # (D_exp,)
    pose: CameraPose
    landmarks: torch.Tensor      # (K, 2) exact control-point projections
    clip_id: int
    frame_index: int
    identity_index: int

    def to_dict(self) -> dict:
        return {"image_path": self.image_path, "alpha": self.alpha.tolist(),
                "beta": self.beta.tolist(), "pose": self.pose.to_dict(),
                "landmarks": self.landmarks.tolist(), "clip_id": self.clip_id,
                "frame_index": self.frame_index, "identity_index": self.identity_index}

    @classmethod
    def from_dict(cls, d: dict) -> "FrameRecord":
        return cls(d["image_path"], torch.tensor(d["alpha"], dtype=torch.float64),
                   torch.tensor(d["beta"], dtype=torch.float64),
                   CameraPose.from_dict(d["pose"]),
                   torch.tensor(d["landmarks"], dtype=torch.float64),
                   d["clip_id"], d["frame_index"], d["identity_index"])


@dataclass
class DatasetConfig:
    identities: int = 8
    clips_per_identity: int = 4
    frames_per_clip: int = 16
    image_size: int = 64
    seed: int = 0
    control_points: int = 12
    mouth_index: int = 0
    coeff_scale: float = 1.5     # per-identity alpha & initial beta ~ U(-scale, scale)
    coeff_bound: float = 3.0
    beta_walk_sigma: float = 0.15
    yaw_range: tuple[float, float] = (-0.6, 0.6)
    pitch_range: tuple[float, float] = (-0.3, 0.3)
    radius_range: tuple[float, float] = (2.1, 2.3)
    oracle_samples: int = 1024

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        for key in ("yaw_range", "pitch_range", "radius_range"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        for key in ("yaw_range", "pitch_range", "radius_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


@dataclass
class Dataset:
    root: Path
    config: DatasetConfig
    basis: BlendshapeBasis
    specs: list[SceneSpec]
    alphas: list[torch.Tensor]          # per-identity coefficients
    frames: list[FrameRecord]
    intrinsics: CameraIntrinsics
    clips: dict[int, list[int]] = field(default_factory=dict)  # clip_id -> frame indices

    def __post_init__(self):
        if not self.clips:
            for i, fr in enumerate(self.frames):
                self.clips.setdefault(fr.clip_id, []).append(i)

    def load_image(self, record: FrameRecord) -> torch.Tensor:
        return read_ppm(self.root / record.image_path)

    def clip_ids_for_identity(self, identity: int) -> list[int]:
        return sorted({fr.clip_id for fr in self.frames if fr.identity_index == identity})

    def train_val_clips(self, val_clips_per_identity: int = 1) -> tuple[list[int], list[int]]:
        """Hold out the last clip(s) of each identity for evaluation."""
        train, val = [], []
        for ident in range(self.config.identities):
            ids = self.clip_ids_for_identity(ident)
            cut = max(len(ids) - val_clips_per_identity, 1)
            train += ids[:cut]
            val += ids[cut:]
        return train, val


def _sample_coeffs(gen: torch.Generator, dim: int, scale: float) -> torch.Tensor:
    return (torch.rand(dim, generator=gen, dtype=torch.float64) * 2 - 1) * scale


def generate_dataset(config: DatasetConfig, out_dir: str | Path,
                     progress: bool = False) -> Dataset:
    """Generate and persist the full synthetic corpus; deterministic in seed."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    basis = make_basis(mix_seed(config.seed, "basis"), k=config.control_points,
                       mouth_index=config.mouth_index)
    intr = default_intrinsics(config.image_size)

    specs, alphas, frames = [], [], []
    clip_id = 0
    t0 = time.time()
    for ident in range(config.identities):
        spec = make_identity(mix_seed(config.seed, "identity", ident),
                             k=config.control_points, mouth_index=config.mouth_index)
        gen_i = torch.Generator().manual_seed(mix_seed(config.seed, "alpha", ident))
        alpha = _sample_coeffs(gen_i, basis.d_id, config.coeff_scale)
        specs.append(spec)
        alphas.append(alpha)

        for clip in range(config.clips_per_identity):
            clip_dir = root / f"clip_{clip_id:04d}"
            clip_dir.mkdir(exist_ok=True)
            gen_c = torch.Generator().manual_seed(mix_seed(config.seed, "clip", ident, clip))
            beta = _sample_coeffs(gen_c, basis.d_exp, config.coeff_scale)
            for fidx in range(config.frames_per_clip):
                if fidx > 0:
                    step = torch.randn(basis.d_exp, generator=gen_c, dtype=torch.float64)
                    beta = (beta + config.beta_walk_sigma * step).clamp(
                        -config.coeff_bound, config.coeff_bound)
                yaw = float(torch.empty(1, dtype=torch.float64).uniform_(
                    *config.yaw_range, generator=gen_c))
                pitch = float(torch.empty(1, dtype=torch.float64).uniform_(
                    *config.pitch_range, generator=gen_c))
                radius = float(torch.empty(1, dtype=torch.float64).uniform_(
                    *config.radius_range, generator=gen_c))
                pose = pose_from_orbit(yaw, pitch, radius)
                image = render_oracle(spec, basis, alpha, beta, intr, pose,
                                      n_samples=config.oracle_samples)
                rel = f"clip_{clip_id:04d}/frame_{fidx:04d}.ppm"
                write_ppm(root / rel, image)
                landmarks = project(intr, pose, shape(basis, alpha, beta))
                frames.append(FrameRecord(rel, alpha.clone(), beta.clone(), pose,
                                          landmarks, clip_id, fidx, ident))
            clip_id += 1
        if progress:
            done = len(frames)
            total = config.identities * config.clips_per_identity * config.frames_per_clip
            print(f"  identity {ident + 1}/{config.identities} done "
                  f"({done}/{total} frames, {time.time() - t0:.0f}s)")

    dataset = Dataset(root, config, basis, specs, alphas, frames, intr)
    save_manifest(dataset)
    return dataset


def save_manifest(ds: Dataset) -> None:
    manifest = {
        "version": MANIFEST_VERSION,
        "config": ds.config.to_dict(),
        "config_hash": ds.config.hash(),
        "basis": ds.basis.to_dict(),
        "intrinsics": ds.intrinsics.to_dict(),
        "specs": [s.to_dict() for s in ds.specs],
        "alphas": [a.tolist() for a in ds.alphas],
        "frames": [f.to_dict() for f in ds.frames],
    }
    (ds.root / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, separators=(",", ":")) + "\n")


def load_dataset(root: str | Path) -> Dataset:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest["version"] != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version {manifest['version']}")
    config = DatasetConfig.from_dict(manifest["config"])
    frames = [FrameRecord.from_dict(d) for d in manifest["frames"]]
    missing = [f.image_path for f in frames if not (root / f.image_path).exists()]
    if missing:
        raise FileNotFoundError(f"manifest references missing files, e.g. {missing[0]}")
    return Dataset(
        root, config, BlendshapeBasis.from_dict(manifest["basis"]),
        [SceneSpec.from_dict(d) for d in manifest["specs"]],
        [torch.tensor(a, dtype=torch.float64) for a in manifest["alphas"]],
        frames, CameraIntrinsics.from_dict(manifest["intrinsics"]))
