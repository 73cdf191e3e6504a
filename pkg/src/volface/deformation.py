"""Backward deformation field: an offset network predicts per-point
displacements from target (deformed) space into the canonical volume, a
weighting network predicts a scalar gate in [0, 1] multiplying each offset,
and both are conditioned on the same control signal (source identity +
target expression).

The offset net's final layer is zero-initialized so the field starts as the
exact identity map, which stabilizes the jointly learned canonical space.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .triplane import VolumeDecoder, decode_point, sample_triplane

PE_BANDS = 4


def positional_encoding(x: torch.Tensor, bands: int = PE_BANDS) -> torch.Tensor:
    """Raw coordinates plus sin/cos at frequencies 2^0 .. 2^(bands-1)."""
    parts = [x]
    for k in range(bands):
        parts.append(torch.sin((2.0 ** k) * x))
        parts.append(torch.cos((2.0 ** k) * x))
    return torch.cat(parts, dim=-1)


def _mlp(in_dim: int, hidden: int, depth: int, out_dim: int) -> nn.Sequential:
    layers: list[nn.Module] = [nn.Linear(in_dim, hidden), nn.GELU()]
    for _ in range(depth - 1):
        layers += [nn.Linear(hidden, hidden), nn.GELU()]
    layers.append(nn.Linear(hidden, out_dim))
    return nn.Sequential(*layers)


class DeformationField(nn.Module):
    """Gated backward warp x_c = clamp(x_d + w(x) * offset(x), [-1, 1]^3).

    `use_identity=False` zeroes the identity slice of the control signal
    before both nets (the ablation keeps shapes identical). `use_weight_net=
    False` fixes the gate at 1 so offsets apply unweighted.
    """

    def __init__(self, signal_dim: int = 8, id_dim: int = 4, pe_bands: int = PE_BANDS,
                 offset_hidden: int = 64, offset_depth: int = 3,
                 weight_hidden: int = 32, weight_depth: int = 2,
                 use_identity: bool = True, use_weight_net: bool = True):
        super().__init__()
        self.signal_dim = signal_dim
        self.id_dim = id_dim
        self.pe_bands = pe_bands
        self.use_identity = use_identity
        self.use_weight_net = use_weight_net
        in_dim = 3 * (1 + 2 * pe_bands) + signal_dim
        self.offset_net = _mlp(in_dim, offset_hidden, offset_depth, 3)
        self.weight_net = _mlp(in_dim, weight_hidden, weight_depth, 1)
        last = self.offset_net[-1]
        nn.init.zeros_(last.weight)
        nn.init.zeros_(last.bias)

    def _inputs(self, x_d: torch.Tensor, signal: torch.Tensor) -> torch.Tensor:
        if signal.shape[-1] != self.signal_dim:
            raise ValueError(f"control signal must have dim {self.signal_dim}, "
                             f"got {signal.shape[-1]}")
        sig = signal.reshape(-1)
        if not self.use_identity:
            mask = torch.ones_like(sig)
            mask[:self.id_dim] = 0.0
            sig = sig * mask
        enc = positional_encoding(x_d, self.pe_bands)
        return torch.cat([enc, sig.unsqueeze(0).expand(x_d.shape[0], -1)], dim=-1)

    def offsets(self, x_d: torch.Tensor, signal: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Raw offsets (N, 3) and gate weights (N, 1) at the given points."""
        inp = self._inputs(x_d, signal)
        delta = self.offset_net(inp)
        if self.use_weight_net:
            w = torch.sigmoid(self.weight_net(inp))
        else:
            w = torch.ones_like(delta[:, :1])
        return delta, w

    def forward(self, x_d: torch.Tensor, signal: torch.Tensor,
                force_weight: float | None = None) -> torch.Tensor:
        """Map deformed-space points (N, 3) to canonical coordinates (N, 3).

        `force_weight` is a test hook overriding the gate with a constant.
        """
        delta, w = self.offsets(x_d, signal)
        if force_weight is not None:
            w = torch.full_like(w, float(force_weight))
        return (x_d + w * delta).clamp(-1.0, 1.0)


def deform(field: DeformationField, x_d: torch.Tensor, signal: torch.Tensor,
           force_weight: float | None = None) -> torch.Tensor:
    return field(x_d, signal, force_weight=force_weight)


def canonical_query(field: DeformationField, planes: torch.Tensor, decoder: VolumeDecoder,
                    x_d: torch.Tensor, signal: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Warp points into the canonical volume and decode (sigma, color-feature)."""
    x_c = field(x_d, signal)
    return decode_point(sample_triplane(planes, x_c), decoder)
