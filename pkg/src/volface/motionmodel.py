"""Linear blendshape model over synthetic control points, and the
ground-truth parameter oracle that stands in for a face tracker.

The basis is generated once from a seed, orthogonalized so identity and
expression columns are mutually orthogonal (mirroring PCA structure), and
stored with the dataset manifest. Control point 0 of the expression basis is
constructed mouth-dominant so the mouth region provably responds to beta[0].
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

D_ID = 4
D_EXP = 4
NUM_CONTROL_POINTS = 12
COEFF_BOUND = 3.0          # dataset sampling bound on |alpha|_inf, |beta|_inf
BASIS_COLUMN_NORM = 0.3


@dataclass
class BlendshapeBasis:
    mean_shape: torch.Tensor   # (K, 3)
    basis_id: torch.Tensor     # (K, 3, D_id)
    basis_exp: torch.Tensor    # (K, 3, D_exp)
    mouth_index: int = 0

    @property
    def k(self) -> int:
        return self.mean_shape.shape[0]

    @property
    def d_id(self) -> int:
        return self.basis_id.shape[-1]

    @property
    def d_exp(self) -> int:
        return self.basis_exp.shape[-1]

    def to_dict(self) -> dict:
        return {"mean_shape": self.mean_shape.tolist(),
                "basis_id": self.basis_id.tolist(),
                "basis_exp": self.basis_exp.tolist(),
                "mouth_index": self.mouth_index}

    @classmethod
    def from_dict(cls, d: dict) -> "BlendshapeBasis":
        return cls(torch.tensor(d["mean_shape"], dtype=torch.float64),
                   torch.tensor(d["basis_id"], dtype=torch.float64),
                   torch.tensor(d["basis_exp"], dtype=torch.float64),
                   int(d["mouth_index"]))


def make_basis(seed: int, k: int = NUM_CONTROL_POINTS, d_id: int = D_ID,
               d_exp: int = D_EXP, mouth_index: int = 0) -> BlendshapeBasis:
    """Seeded orthogonal basis. QR preserves the direction of the first
    column, which is seeded with a strong offset at the mouth control point,
    so d(mouth center)/d(beta[0]) is guaranteed nonzero.
    """
    gen = torch.Generator().manual_seed(seed)
    mean_shape = (torch.rand(k, 3, generator=gen, dtype=torch.float64) - 0.5) * 1.2

    mouth_col = 0.05 * torch.randn(k, 3, generator=gen, dtype=torch.float64)
    mouth_col[mouth_index] += torch.tensor([0.3, 1.0, 0.2], dtype=torch.float64)
    raw = torch.randn(3 * k, d_id + d_exp, generator=gen, dtype=torch.float64)
    raw[:, 0] = mouth_col.reshape(-1)
    q, _ = torch.linalg.qr(raw)
    q = q * BASIS_COLUMN_NORM

    basis_id = q[:, 1:1 + d_id].reshape(k, 3, d_id)
    basis_exp = torch.cat([q[:, :1], q[:, 1 + d_id:]], dim=1).reshape(k, 3, d_exp)
    return BlendshapeBasis(mean_shape, basis_id, basis_exp, mouth_index)


def shape(basis: BlendshapeBasis, alpha: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    """Control points S = mean + alpha . B_id + beta . B_exp, (K, 3).

    Exactly linear in both coefficient vectors; differentiable wrt alpha/beta.
    """
    alpha = torch.as_tensor(alpha)
    beta = torch.as_tensor(beta)
    if alpha.shape != (basis.d_id,):
        raise ValueError(f"alpha must have shape ({basis.d_id},), got {tuple(alpha.shape)}")
    if beta.shape != (basis.d_exp,):
        raise ValueError(f"beta must have shape ({basis.d_exp},), got {tuple(beta.shape)}")
    dtype = alpha.dtype if alpha.is_floating_point() else torch.float64
    return (basis.mean_shape.to(dtype)
            + torch.einsum("kcd,d->kc", basis.basis_id.to(dtype), alpha.to(dtype))
            + torch.einsum("kcd,d->kc", basis.basis_exp.to(dtype), beta.to(dtype)))


def control_signal(alpha_src: torch.Tensor, beta_tgt: torch.Tensor) -> torch.Tensor:
    """Deformation-field conditioning vector: source identity first, then
    target expression. Order is fixed and meaningful.
    """
    alpha_src = torch.as_tensor(alpha_src).reshape(-1)
    beta_tgt = torch.as_tensor(beta_tgt).reshape(-1)
    return torch.cat([alpha_src, beta_tgt.to(alpha_src.dtype)])


class OracleTracker:
    """Returns the exact generation-time parameters stored on a frame record.

    This is the only tracker implementation shipped; anything implementing
    ``track(frame) -> (alpha, beta, pose)`` can be dropped in for real images.
    """

    def track(self, frame) -> tuple[torch.Tensor, torch.Tensor, object]:
        return track(frame)


def track(frame) -> tuple[torch.Tensor, torch.Tensor, object]:
    """Ground-truth oracle: read (alpha, beta, camera pose) off a frame record."""
    alpha = getattr(frame, "alpha", None)
    beta = getattr(frame, "beta", None)
    pose = getattr(frame, "pose", None)
    if alpha is None or beta is None or pose is None:
        raise ValueError("frame lacks parameter annotations (alpha/beta/pose)")
    return torch.as_tensor(alpha, dtype=torch.float64), \
        torch.as_tensor(beta, dtype=torch.float64), pose
