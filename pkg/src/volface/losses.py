"""Training objectives: reconstruction (pixel L2 + multi-scale perceptual
proxy), mouth-region loss on a differentiable crop, embedding-cosine identity
loss, latent regularization, teeth supervision against a deterministic
restoration oracle, the compensation-volume regularizer, and the per-stage
weighted totals.

The perceptual proxy replaces a pretrained feature loss with mean-squared
differences over a 3-level Gaussian pyramid (sigma 1, stride-2 subsampling);
a uniform image offset therefore contributes its squared value once per
level. The restoration oracle replaces a face-restoration model with an
unsharp mask over the mouth region; its output is detached and acts as a
constant target.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .appearance import IdentityEmbedder

PYRAMID_LEVELS = 3
ROI_MARGIN = 0.15
ROI_SIZE = 16
UNSHARP_AMOUNT = 1.5
UNSHARP_SIGMA = 1.0
COMPENSATION_SCALE = 0.1   # mu in the volume regularizer

STAGES = ("general", "refine", "comp", "finetune")

# Per-stage loss-term weights.
STAGE_WEIGHTS: dict[str, dict[str, float]] = {
    "general": {"rec": 1.0, "mouth": 0.5, "id": 0.1, "latent": 0.01},
    "refine": {"rec": 0.5, "teeth": 1.0, "id": 0.1, "latent": 0.01},
    "comp": {"rec": 1.0, "id": 0.1, "depth": 0.01},
    "finetune": {"rec": 1.0, "mouth": 0.5, "id": 0.1, "depth": 0.01},
}


@dataclass
class RoiBox:
    """Normalized (u0, v0, u1, v1) box in [0, 1]^2, u rightward, v downward."""
    u0: float
    v0: float
    u1: float
    v1: float

    def __post_init__(self):
        if not (self.u0 < self.u1 and self.v0 < self.v1):
            raise ValueError(f"degenerate ROI box {self}")

    @classmethod
    def from_landmark(cls, u_px: float, v_px: float, width: int, height: int,
                      margin: float = ROI_MARGIN) -> "RoiBox":
        cu = min(max(u_px / width, 0.0), 1.0)
        cv = min(max(v_px / height, 0.0), 1.0)
        return cls(max(cu - margin, 0.0), max(cv - margin, 0.0),
                   min(cu + margin, 1.0), min(cv + margin, 1.0))

    def pixel_rect(self, width: int, height: int) -> tuple[int, int, int, int]:
        """Integer (left, top, right, bottom) rect, right/bottom exclusive."""
        left = int(round(self.u0 * width))
        top = int(round(self.v0 * height))
        right = max(int(round(self.u1 * width)), left + 1)
        bottom = max(int(round(self.v1 * height)), top + 1)
        return left, top, min(right, width), min(bottom, height)


def _gaussian_kernel1d(sigma: float, dtype, device) -> torch.Tensor:
    radius = max(int(round(2 * sigma)), 1)
    x = torch.arange(-radius, radius + 1, dtype=dtype, device=device)
    k = torch.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: torch.Tensor, sigma: float = 1.0) -> torch.Tensor:
    """Separable Gaussian blur with replicate padding (constants stay exact)."""
    k = _gaussian_kernel1d(sigma, img.dtype, img.device)
    r = (k.numel() - 1) // 2
    c = img.shape[0]
    x = img.unsqueeze(0)
    x = F.pad(x, (r, r, 0, 0), mode="replicate")
    x = F.conv2d(x, k.reshape(1, 1, 1, -1).expand(c, 1, 1, -1), groups=c)
    x = F.pad(x, (0, 0, r, r), mode="replicate")
    x = F.conv2d(x, k.reshape(1, 1, -1, 1).expand(c, 1, -1, 1), groups=c)
    return x.squeeze(0)


def _pyramid(img: torch.Tensor, levels: int = PYRAMID_LEVELS) -> list[torch.Tensor]:
    out = []
    x = img
    for _ in range(levels):
        x = gaussian_blur(x, UNSHARP_SIGMA)[:, ::2, ::2]
        out.append(x)
    return out


def _check_pair(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"image shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def l_rec(target: torch.Tensor, rendered: torch.Tensor) -> torch.Tensor:
    """Pixel mean-squared error plus the pyramid perceptual proxy."""
    _check_pair(target, rendered)
    loss = F.mse_loss(rendered, target)
    for pa, pb in zip(_pyramid(target), _pyramid(rendered)):
        loss = loss + F.mse_loss(pb, pa)
    return loss


def crop_roi(img: torch.Tensor, roi: RoiBox, out_size: int = ROI_SIZE) -> torch.Tensor:
    """Differentiable bilinear resample of the ROI to a fixed patch."""
    dtype, device = img.dtype, img.device
    us = roi.u0 + (torch.arange(out_size, dtype=dtype, device=device) + 0.5) \
        / out_size * (roi.u1 - roi.u0)
    vs = roi.v0 + (torch.arange(out_size, dtype=dtype, device=device) + 0.5) \
        / out_size * (roi.v1 - roi.v0)
    gv, gu = torch.meshgrid(vs, us, indexing="ij")
    grid = torch.stack([2 * gu - 1, 2 * gv - 1], dim=-1).unsqueeze(0)
    patch = F.grid_sample(img.unsqueeze(0), grid, mode="bilinear",
                          padding_mode="border", align_corners=False)
    return patch.squeeze(0)


def l_mouth(target: torch.Tensor, rendered: torch.Tensor, roi: RoiBox) -> torch.Tensor:
    _check_pair(target, rendered)
    return l_rec(crop_roi(target, roi), crop_roi(rendered, roi))


def l_id(target: torch.Tensor, rendered: torch.Tensor,
         embedder: IdentityEmbedder) -> torch.Tensor:
    """1 - cosine similarity of the frozen embeddings; range [0, 2]."""
    et = embedder(target.unsqueeze(0)).squeeze(0)
    er = embedder(rendered.unsqueeze(0)).squeeze(0)
    return 1.0 - (et * er).sum()


def l_latent(latent_offset: torch.Tensor) -> torch.Tensor:
    """Squared distance of the code from the learned average latent."""
    return (latent_offset ** 2).sum()


def restoration_oracle(img: torch.Tensor, roi: RoiBox,
                       amount: float = UNSHARP_AMOUNT,
                       sigma: float = UNSHARP_SIGMA) -> torch.Tensor:
    """Unsharp-mask the ROI of the model's own output; constant elsewhere.

    The result is detached: it is a fixed supervision target and never
    carries gradients back into the network.
    """
    with torch.no_grad():
        sharp = (img + amount * (img - gaussian_blur(img, sigma))).clamp(0.0, 1.0)
        left, top, right, bottom = roi.pixel_rect(img.shape[-1], img.shape[-2])
        out = img.clone()
        out[:, top:bottom, left:right] = sharp[:, top:bottom, left:right]
    return out


def l_teeth(rendered: torch.Tensor, roi: RoiBox) -> torch.Tensor:
    """Mouth-crop reconstruction against the restoration oracle's target."""
    target = restoration_oracle(rendered, roi)
    return l_rec(crop_roi(target, roi), crop_roi(rendered, roi))


def l_depth(v_canonical: torch.Tensor, v_compensation: torch.Tensor,
            mu: float = COMPENSATION_SCALE) -> torch.Tensor:
    """Mean squared ||mu * V_c - V_m||^2 over all plane entries."""
    if v_canonical.shape != v_compensation.shape:
        raise ValueError(f"plane shape mismatch: {tuple(v_canonical.shape)} "
                         f"vs {tuple(v_compensation.shape)}")
    return ((mu * v_canonical - v_compensation) ** 2).mean()


def stage_total(stage: str, terms: dict[str, torch.Tensor],
                weights: dict[str, float] | None = None) -> torch.Tensor:
    """Weighted sum of exactly the stage's active loss terms.

    Supplying a term the stage does not use (or omitting one it does) is a
    wiring error and raises.
    """
    if stage not in STAGE_WEIGHTS:
        raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")
    weights = dict(STAGE_WEIGHTS[stage]) if weights is None else dict(weights)
    active = set(STAGE_WEIGHTS[stage])
    extra = set(terms) - active
    if extra:
        raise ValueError(f"terms {sorted(extra)} are not active in stage {stage!r}")
    missing = active - set(terms)
    if missing:
        raise ValueError(f"stage {stage!r} is missing terms {sorted(missing)}")
    total = None
    for name in STAGE_WEIGHTS[stage]:
        contrib = weights[name] * terms[name]
        total = contrib if total is None else total + contrib
    return total
