"""Tri-plane neural volume: feature grids on three axis-aligned planes,
point sampling by triple projection + bilinear interpolation, and the MLP
decoding a sampled feature into density and a color-feature vector.

A tri-plane is a plain tensor of shape (3, C, R, R) holding the XY, XZ and
YZ planes in that order; plane width maps to the first coordinate of the
pair and plane height to the second. Aggregation across the three planes is
the mean, which keeps feature magnitudes stable under canonical +
compensation plane summation.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

PLANE_CHANNELS = 8
PLANE_RES = 64
FEATURE_CHANNELS = 8   # decoder output channels; first 3 are RGB


def sample_triplane(planes: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Sample features at points in [-1, 1]^3.

    planes: (3, C, R, R); points: (N, 3). Returns (N, C), the mean of the
    three bilinear plane lookups. Callers are responsible for masking points
    outside the cube (coordinates are clamped to the border here).
    """
    if planes.ndim != 4 or planes.shape[0] != 3 or planes.shape[2] != planes.shape[3]:
        raise ValueError(f"expected planes of shape (3, C, R, R), got {tuple(planes.shape)}")
    n = points.shape[0]
    grid = torch.stack([points[:, [0, 1]], points[:, [0, 2]], points[:, [1, 2]]], dim=0)
    grid = grid.reshape(3, n, 1, 2)
    out = F.grid_sample(planes, grid, mode="bilinear", padding_mode="border",
                        align_corners=True)                       # (3, C, N, 1)
    return out.squeeze(-1).mean(dim=0).transpose(0, 1)            # (N, C)


def combine(v_canonical: torch.Tensor, v_compensation: torch.Tensor) -> torch.Tensor:
    """Elementwise plane sum of canonical and compensation volumes."""
    if v_canonical.shape != v_compensation.shape:
        raise ValueError(f"plane shape mismatch: {tuple(v_canonical.shape)} "
                         f"vs {tuple(v_compensation.shape)}")
    return v_canonical + v_compensation


def density_activation(raw: torch.Tensor) -> torch.Tensor:
    return F.softplus(raw)


def rgb_activation(raw: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(raw)


class VolumeDecoder(nn.Module):
    """MLP mapping an aggregated plane feature to (density, color-feature).

    Density goes through softplus (nonnegative for any input); the first 3
    feature channels are RGB through a sigmoid; remaining channels are raw
    reals consumed by the upsampler.
    """

    def __init__(self, in_channels: int = PLANE_CHANNELS,
                 out_channels: int = FEATURE_CHANNELS, hidden: int = 64):
        super().__init__()
        if out_channels < 3:
            raise ValueError("decoder needs at least 3 output channels for RGB")
        self.out_channels = out_channels
        self.net = nn.Sequential(
            nn.Linear(in_channels, hidden), nn.GELU(),
            nn.Linear(hidden, hidden), nn.GELU(),
            nn.Linear(hidden, 1 + out_channels),
        )

    def forward(self, features: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """features: (N, C_in) -> sigma (N,), color-feature (N, C_out)."""
        raw = self.net(features)
        sigma = density_activation(raw[:, 0])
        rgb = rgb_activation(raw[:, 1:4])
        return sigma, torch.cat([rgb, raw[:, 4:]], dim=1)


def decode_point(features: torch.Tensor, decoder: VolumeDecoder) -> tuple[torch.Tensor, torch.Tensor]:
    """Decode sampled plane features (N, C_in) into (sigma, color-feature)."""
    return decoder(features)
