"""Differentiable parameter substrate: named parameter groups, reverse-mode
gradient propagation on top of torch autograd, a hand-rolled Adam step with
exact freezing semantics, and a finite-difference gradient checker.

Training runs in float32; gradient verification should run on float64 copies
of the model (finite differences are noise-dominated in single precision).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch


class NonFiniteLossError(RuntimeError):
    """Raised when a loss (or a gradient) is NaN/Inf before any state mutation."""


class NonDeterministicFunctionError(RuntimeError):
    """Raised when two identical evaluations of a checked function disagree."""


# Relative-error denominator floor; avoids division blowup at near-zero gradients.
FD_FLOOR = 1e-8


class ParameterGroup:
    """A named set of tensors updated (or frozen) together.

    `tensors` maps a leaf name to an ``nn.Parameter``. The trainable flag is
    mirrored into ``requires_grad`` so frozen groups neither accumulate
    gradients nor receive optimizer updates.
    """

    def __init__(self, name: str, tensors: dict[str, torch.nn.Parameter], trainable: bool = True):
        self.name = name
        self.tensors = dict(tensors)
        self._trainable = trainable
        self.set_trainable(trainable)

    @property
    def trainable(self) -> bool:
        return self._trainable

    def set_trainable(self, flag: bool) -> None:
        self._trainable = flag
        for p in self.tensors.values():
            p.requires_grad_(flag)

    def zero_grad(self) -> None:
        for p in self.tensors.values():
            p.grad = None

    def num_params(self) -> int:
        return sum(p.numel() for p in self.tensors.values())

    def items(self):
        return self.tensors.items()

    def __repr__(self) -> str:
        return f"ParameterGroup({self.name!r}, {self.num_params()} params, trainable={self._trainable})"


def backward(loss: torch.Tensor, groups: list[ParameterGroup]) -> None:
    """Propagate gradients from a scalar loss into all reachable groups.

    Trainable groups not reachable from the loss get explicit zero gradients
    (torch leaves them as None). A non-finite loss aborts before any
    ``.grad`` is touched; use `first_nonfinite_module` to locate the culprit.
    """
    if loss.ndim != 0:
        raise ValueError(f"loss must be scalar, got shape {tuple(loss.shape)}")
    if not bool(torch.isfinite(loss)):
        raise NonFiniteLossError(f"loss is non-finite ({loss.item()}); aborting backward")
    loss.backward()
    for g in groups:
        if not g.trainable:
            continue
        for p in g.tensors.values():
            if p.grad is None:
                p.grad = torch.zeros_like(p)


def first_nonfinite_module(module: torch.nn.Module, forward_fn) -> str | None:
    """Re-run `forward_fn()` with hooks and name the first submodule whose
    output contains a non-finite value. Returns None if everything is finite.
    """
    offender: list[str] = []
    hooks = []

    def make_hook(name):
        def hook(_mod, _inp, out):
            if offender:
                return
            outs = out if isinstance(out, (tuple, list)) else (out,)
            for o in outs:
                if torch.is_tensor(o) and not bool(torch.isfinite(o).all()):
                    offender.append(name)
                    return
        return hook

    for name, sub in module.named_modules():
        hooks.append(sub.register_forward_hook(make_hook(name or module.__class__.__name__)))
    try:
        with torch.no_grad():
            forward_fn()
    finally:
        for h in hooks:
            h.remove()
    return offender[0] if offender else None


class AdamState:
    """First/second moment estimates and step counter for a set of groups.

    Default hyperparameters follow the training setup (lr 1e-4); stage presets
    may override lr. Moments are keyed ``"<group>/<leaf>"`` and exist for every
    group so that checkpoints are stage-independent.
    """

    def __init__(self, groups: list[ParameterGroup], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, torch.Tensor] = {}
        self.v: dict[str, torch.Tensor] = {}
        for g in groups:
            for leaf, p in g.items():
                key = f"{g.name}/{leaf}"
                self.m[key] = torch.zeros_like(p, requires_grad=False)
                self.v[key] = torch.zeros_like(p, requires_grad=False)


def adam_step(groups: list[ParameterGroup], state: AdamState) -> None:
    """One bias-corrected Adam update over the trainable groups.

    Frozen groups (and their moments) are left bitwise untouched. Any NaN/Inf
    gradient aborts before mutating parameters, moments, or the step counter.
    A missing gradient is treated as zero.
    """
    updates = []
    for g in groups:
        if not g.trainable:
            continue
        for leaf, p in g.items():
            grad = p.grad
            if grad is not None and not bool(torch.isfinite(grad).all()):
                raise NonFiniteLossError(f"non-finite gradient in {g.name}/{leaf}; aborting adam_step")
            updates.append((f"{g.name}/{leaf}", p, grad))

    state.t += 1
    b1c = 1.0 - state.beta1 ** state.t
    b2c = 1.0 - state.beta2 ** state.t
    with torch.no_grad():
        for key, p, grad in updates:
            g = grad if grad is not None else torch.zeros_like(p)
            m = state.m[key]
            v = state.v[key]
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            m_hat = m / b1c
            v_hat = v / b2c
            p.addcdiv_(m_hat, v_hat.sqrt().add_(state.eps), value=-state.lr)


@dataclass
class GroupCheck:
    """Finite-difference verification result for one parameter group."""
    max_rel_error: float = 0.0
    checked: int = 0
    # (leaf name, flat index, reason) for coordinates left out of the max
    excluded: list[tuple[str, int, str]] = field(default_factory=list)


def grad_check(fn, groups: list[ParameterGroup], fd_step: float = 1e-5,
               coords_per_tensor: int = 4, seed: int = 0,
               resolution_rtol: float = 1e-5,
               analytic_groups: list[ParameterGroup] | None = None,
               scale_floor: float = 0.0) -> dict[str, GroupCheck]:
    """Compare autograd gradients of ``fn()`` against central finite differences.

    ``fn`` takes no arguments, must be deterministic, and returns a scalar
    tensor computed from the current group values. Per sampled coordinate the
    relative error is |analytic - FD| / max(|analytic|, |FD|, FD_FLOOR), with
    FD the Richardson-combined central difference from steps h and h/2.

    Two kinds of coordinate are reported as excluded rather than failed:
    kinks (one-sided slopes disagree and do not reconcile when the step is
    halved, e.g. a ReLU at its corner) and coordinates where the two central
    estimates disagree by more than `resolution_rtol` relative to the values,
    i.e. where rounding noise or curvature makes FD unable to adjudicate at
    the requested tolerance. Half the coordinates per tensor are the
    largest-gradient ones (best signal-to-noise), the rest random.

    `analytic_groups`, when given, supplies pre-populated ``.grad`` fields
    from a parallel set of groups (same structure, possibly a different
    precision); `fn` and `groups` then act purely as the FD oracle. This is
    how single-precision gradients are verified: FD runs on a float64 twin
    at the identical parameter point, because finite differences of a
    float32 evaluation cannot resolve a 1e-3 comparison.

    `scale_floor`, as a fraction of the group's max |gradient|, is added to
    the relative-error denominator. Low-precision gradients carry absolute
    error proportional to the gradient scale of their reduction, so
    coordinates far below that scale cannot meet a per-coordinate relative
    bound in float32; the floor turns the comparison into "error below
    tol * gradient scale" there. Keep it 0 for full-precision checks.
    """
    # determinism gate: two cold evaluations must agree bitwise
    with torch.no_grad():
        f_a = float(fn())
        f_b = float(fn())
    if f_a != f_b or not math.isfinite(f_a):
        raise NonDeterministicFunctionError(
            f"function evaluations disagree or are non-finite: {f_a!r} vs {f_b!r}")

    if analytic_groups is None:
        for g in groups:
            g.zero_grad()
        with torch.enable_grad():
            loss = fn()
            loss.backward()
        analytic_groups = groups
    if len(analytic_groups) != len(groups):
        raise ValueError("analytic_groups must mirror the FD groups")

    rng = torch.Generator().manual_seed(seed)
    results: dict[str, GroupCheck] = {}

    def eval_at(p: torch.nn.Parameter, idx: int, delta: float) -> float:
        with torch.no_grad():
            old = p.view(-1)[idx].item()
            p.view(-1)[idx] = old + delta
            try:
                return float(fn())
            finally:
                p.view(-1)[idx] = old

    for g, ag in zip(groups, analytic_groups):
        if g.name != ag.name or list(g.tensors) != list(ag.tensors):
            raise ValueError(f"group structure mismatch: {g.name} vs {ag.name}")
        if not g.trainable:
            continue
        check = GroupCheck()
        group_scale = max((float(ag.tensors[leaf].grad.abs().max())
                           for leaf in ag.tensors if ag.tensors[leaf].grad is not None),
                          default=0.0)
        floor = max(FD_FLOOR, scale_floor * group_scale)
        for leaf, p in g.items():
            n = p.numel()
            k = min(coords_per_tensor, n)
            gr = ag.tensors[leaf].grad
            analytic_flat = (gr if gr is not None
                             else torch.zeros_like(ag.tensors[leaf])).reshape(-1).double()
            n_top = (k + 1) // 2
            top = torch.topk(analytic_flat.abs(), min(n_top, n)).indices.tolist()
            pool = torch.randperm(n, generator=rng).tolist()
            idxs = list(dict.fromkeys(top + pool))[:k]
            for idx in idxs:
                a = float(analytic_flat[idx])
                h = fd_step
                f_ph = eval_at(p, idx, +h)
                f_mh = eval_at(p, idx, -h)
                f_p2 = eval_at(p, idx, +h / 2)
                f_m2 = eval_at(p, idx, -h / 2)
                fwd_h, bwd_h = (f_ph - f_a) / h, (f_a - f_mh) / h
                fwd_2, bwd_2 = (f_p2 - f_a) / (h / 2), (f_a - f_m2) / (h / 2)
                d_h = abs(fwd_h - bwd_h)
                d_2 = abs(fwd_2 - bwd_2)
                if d_h > 0.1 * max(abs(fwd_h), abs(bwd_h), FD_FLOOR) and d_2 > 0.6 * d_h:
                    # one-sided slopes disagree and do not reconcile at h/2:
                    # a derivative jump, not curvature
                    check.excluded.append((leaf, idx, "kink"))
                    continue
                fd_h = (f_ph - f_mh) / (2 * h)
                fd_half = (f_p2 - f_m2) / h
                fd = (4.0 * fd_half - fd_h) / 3.0
                denom = max(abs(a), abs(fd), floor)
                if abs(fd_half - fd_h) > resolution_rtol * denom:
                    check.excluded.append((leaf, idx, "below FD resolution"))
                    continue
                rel = abs(a - fd) / denom
                check.max_rel_error = max(check.max_rel_error, rel)
                check.checked += 1
        results[g.name] = check
    return results
