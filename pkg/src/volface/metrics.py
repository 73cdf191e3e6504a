"""Evaluation metrics (PSNR, SSIM, CSIM, AED, APD) and the expression
recovery probe used to score motion accuracy without a pretrained tracker.

Conventions, stated in every report: AED is the mean over frames of the
summed L1 distance between expression-coefficient vectors; APD is the mean
Euclidean distance between flattened (R | t) pose vectors. Expression
coefficients for generated frames are recovered by nonlinear least squares
against the analytic scene renderer (coarse grid then gradient refinement),
which is independent of the neural model being scored. LPIPS and FID are
deliberately not implemented (they require pretrained networks).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F

from .appearance import IdentityEmbedder
from .geometry import CameraIntrinsics, CameraPose, scale_intrinsics
from .motionmodel import BlendshapeBasis
from .renderer import render_field
from .synthdata import SceneSpec, scene_field, scene_sampling

PSNR_CAP = 99.0
SSIM_WINDOW = 8
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

AED_CONVENTION = "mean over frames of summed L1 distance between expression vectors"
APD_CONVENTION = "mean over frames of Euclidean distance between flattened (R|t) pose vectors"


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]; exact matches
    are reported as the 99 dB cap."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = float(F.mse_loss(a.double(), b.double()))
    if mse <= 0.0:
        return PSNR_CAP
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP)


def ssim(a: torch.Tensor, b: torch.Tensor) -> float:
    """Mean local SSIM over sliding 8x8 uniform windows on the grayscale
    (channel-mean) images, with the standard stabilizers for unit range."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    ga = a.double().mean(dim=0, keepdim=True).unsqueeze(0)
    gb = b.double().mean(dim=0, keepdim=True).unsqueeze(0)
    if ga.shape[-1] < SSIM_WINDOW or ga.shape[-2] < SSIM_WINDOW:
        raise ValueError(f"images smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    mu_a = F.avg_pool2d(ga, SSIM_WINDOW, stride=1)
    mu_b = F.avg_pool2d(gb, SSIM_WINDOW, stride=1)
    var_a = F.avg_pool2d(ga * ga, SSIM_WINDOW, stride=1) - mu_a ** 2
    var_b = F.avg_pool2d(gb * gb, SSIM_WINDOW, stride=1) - mu_b ** 2
    cov = F.avg_pool2d(ga * gb, SSIM_WINDOW, stride=1) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float((num / den).mean())


def csim(source: torch.Tensor, generated: torch.Tensor,
         embedder: IdentityEmbedder) -> float:
    """Cosine similarity of the frozen embeddings; measures appearance
    preservation under this project's stand-in embedder."""
    es = embedder(source.unsqueeze(0)).squeeze(0)
    eg = embedder(generated.unsqueeze(0)).squeeze(0)
    return float((es * eg).sum())


def aed(pred: torch.Tensor, true: torch.Tensor) -> float:
    pred, true = torch.as_tensor(pred, dtype=torch.float64), torch.as_tensor(true, dtype=torch.float64)
    if pred.shape != true.shape:
        raise ValueError(f"sequence shape mismatch: {tuple(pred.shape)} vs {tuple(true.shape)}")
    return float((pred - true).abs().sum(dim=-1).mean())


def apd(pred: torch.Tensor, true: torch.Tensor) -> float:
    pred, true = torch.as_tensor(pred, dtype=torch.float64), torch.as_tensor(true, dtype=torch.float64)
    if pred.shape != true.shape:
        raise ValueError(f"sequence shape mismatch: {tuple(pred.shape)} vs {tuple(true.shape)}")
    return float((pred - true).norm(dim=-1).mean())


def _render_beta(spec: SceneSpec, basis: BlendshapeBasis, alpha32: torch.Tensor,
                 beta: torch.Tensor, intr: CameraIntrinsics, pose: CameraPose,
                 n_samples: int) -> torch.Tensor:
    def fn(points):
        return scene_field(spec, basis, alpha32, beta, points)
    return render_field(fn, intr, pose, scene_sampling(pose, n_samples), feature_dim=3).features


def fit_expression(image: torch.Tensor, spec: SceneSpec, basis: BlendshapeBasis,
                   alpha: torch.Tensor, intr: CameraIntrinsics, pose: CameraPose,
                   grid_values: tuple[float, ...] = (-1.5, 0.0, 1.5),
                   refine_steps: int = 80, refine_lr: float = 0.15,
                   polish_steps: int = 40, n_samples: int = 96) -> torch.Tensor:
    """Recover expression coefficients from a rendered frame.

    Grid-search beta against low-resolution analytic renders, refine the best
    candidate by gradient descent on the L2 image error at quarter
    resolution, then polish at half resolution. Uses only the analytic scene
    renderer, never the neural model under evaluation.
    """
    img = torch.as_tensor(image, dtype=torch.float32)
    alpha32 = torch.as_tensor(alpha, dtype=torch.float32)
    d_exp = basis.d_exp

    coarse_intr = scale_intrinsics(intr, 8)
    coarse_target = F.avg_pool2d(img.unsqueeze(0), 8).squeeze(0)
    best_beta, best_err = None, float("inf")
    candidates = torch.cartesian_prod(*([torch.tensor(grid_values)] * d_exp))
    with torch.no_grad():
        for cand in candidates:
            rendered = _render_beta(spec, basis, alpha32, cand.float(), coarse_intr,
                                    pose, n_samples // 2)
            err = float(F.mse_loss(rendered, coarse_target))
            if err < best_err:
                best_beta, best_err = cand.float().clone(), err

    beta = best_beta.clone().requires_grad_(True)
    for factor, steps, lr in ((4, refine_steps, refine_lr), (2, polish_steps, 0.05)):
        if steps <= 0:
            continue
        stage_intr = scale_intrinsics(intr, factor)
        stage_target = F.avg_pool2d(img.unsqueeze(0), factor).squeeze(0)
        opt = torch.optim.Adam([beta], lr=lr)
        for _ in range(steps):
            opt.zero_grad()
            rendered = _render_beta(spec, basis, alpha32, beta, stage_intr, pose,
                                    n_samples)
            loss = F.mse_loss(rendered, stage_target)
            loss.backward()
            opt.step()
    return beta.detach()


@dataclass
class MetricReport:
    frame_count: int
    per_frame: list[dict]
    aggregates: dict[str, float]
    config_hash: str = ""
    conventions: dict[str, str] = field(default_factory=lambda: {
        "aed": AED_CONVENTION, "apd": APD_CONVENTION})
    notes: list[str] = field(default_factory=lambda: [
        "LPIPS and FID are not reported: both depend on pretrained networks "
        "that are out of scope at this scale.",
        "CSIM uses a frozen random-feature embedder, not a face-recognition model.",
    ])

    def to_dict(self) -> dict:
        return {"frame_count": self.frame_count, "per_frame": self.per_frame,
                "aggregates": self.aggregates, "config_hash": self.config_hash,
                "conventions": self.conventions, "notes": self.notes}


def build_report(per_frame: list[dict], config_hash: str = "") -> MetricReport:
    """Aggregate per-frame metric dicts; aggregates are arithmetic means."""
    keys = sorted({k for row in per_frame for k in row if isinstance(row[k], (int, float))})
    aggregates = {}
    for k in keys:
        vals = [row[k] for row in per_frame if k in row]
        if vals:
            aggregates[k] = sum(vals) / len(vals)
    return MetricReport(len(per_frame), per_frame, aggregates, config_hash)


def write_report(report: MetricReport, out_dir: str | Path) -> Path:
    """Write report.json plus the per-frame CSV; returns the JSON path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    json_path = out / "report.json"
    json_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    cols = sorted({k for row in report.per_frame for k in row})
    with open(out / "per_frame.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=cols)
        writer.writeheader()
        for row in report.per_frame:
            writer.writerow(row)
    return json_path
