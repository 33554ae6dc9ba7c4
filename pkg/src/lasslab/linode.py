"""Exact integration of piecewise-affine dynamics.

A token's latent flow ``dz/dt = A z + b`` is advanced in closed form through
the exponential of the augmented matrix ``[[A, b], [0, 0]]``: the top-left
block of ``exp(dt * [[A, b], [0, 0]])`` is the state transition ``Phi`` and
the top-right column is the affine response ``psi``, so that
``z(t + dt) = Phi z(t) + psi``. The augmented form is exact even for
singular A, so there is no special case for non-invertible dynamics.

A fixed-step RK4 integrator is provided as an independent numerical
cross-check; it also serves as the nonlinear-baseline integrator for the
benchmark module. Everything here is pure and differentiable (float64 by
default), so gradients flow through the matrix exponential during training.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

DIVERGENCE_BOUND = 1e6
_TILE_TOL = 1e-9


class DivergenceError(RuntimeError):
    """Raised when an integrated state exceeds the divergence bound."""

    def __init__(self, t: float, bound: float = DIVERGENCE_BOUND):
        super().__init__(f"state magnitude exceeded {bound:g} at t={t:.6g}")
        self.t = t


def _as_f64(x) -> Tensor:
    return torch.as_tensor(x, dtype=torch.float64)


@dataclass
class LinearSegment:
    """Affine dynamics A, b active on one sub-interval of the normalized axis."""

    A: Tensor  # (d, d)
    b: Tensor  # (d,)
    t_start: float
    t_end: float

    def __post_init__(self):
        self.A = torch.as_tensor(self.A)
        self.b = torch.as_tensor(self.b)
        if self.A.shape[-1] != self.A.shape[-2] or self.b.shape[-1] != self.A.shape[-1]:
            raise ValueError(f"inconsistent segment shapes A{tuple(self.A.shape)} b{tuple(self.b.shape)}")
        if not (self.t_start < self.t_end):
            raise ValueError(f"degenerate interval [{self.t_start}, {self.t_end}]")
        if not (torch.isfinite(self.A).all() and torch.isfinite(self.b).all()):
            raise ValueError("non-finite segment coefficients")


@dataclass
class PiecewiseFlow:
    """Ordered affine segments tiling [0, 1] plus the initial state."""

    segments: list[LinearSegment]
    z0: Tensor

    def __post_init__(self):
        self.z0 = torch.as_tensor(self.z0)
        if not self.segments:
            raise ValueError("empty flow")
        if abs(self.segments[0].t_start) > _TILE_TOL or abs(self.segments[-1].t_end - 1.0) > _TILE_TOL:
            raise ValueError("segments must tile [0, 1]")
        for a, b in zip(self.segments, self.segments[1:]):
            if abs(a.t_end - b.t_start) > _TILE_TOL:
                raise ValueError(f"gap/overlap between segments at t={a.t_end}")


def augmented_expm(A: Tensor, b: Tensor, dt) -> tuple[Tensor, Tensor]:
    """Closed-form transition for dz/dt = A z + b over a duration dt.

    Returns (Phi, psi) with z(t + dt) = Phi @ z(t) + psi. Batched over any
    leading dimensions of A (..., d, d), b (..., d) and dt (scalar or
    broadcastable to the leading dims).
    """
    A = torch.as_tensor(A)
    b = torch.as_tensor(b)
    dt = torch.as_tensor(dt, dtype=A.dtype)
    if (dt < 0).any():
        raise ValueError("negative step duration")
    if not (torch.isfinite(A).all() and torch.isfinite(b).all() and torch.isfinite(dt).all()):
        raise ValueError("non-finite inputs to augmented_expm")
    d = A.shape[-1]
    batch = torch.broadcast_shapes(A.shape[:-2], b.shape[:-1], dt.shape)
    A = A.expand(*batch, d, d)
    b = b.expand(*batch, d)
    dt = dt.expand(batch)
    aug = torch.cat(
        [
            torch.cat([A, b.unsqueeze(-1)], dim=-1),
            torch.zeros(*batch, 1, d + 1, dtype=A.dtype, device=A.device),
        ],
        dim=-2,
    )
    full = torch.linalg.matrix_exp(aug * dt[..., None, None])
    return full[..., :d, :d], full[..., :d, d]


def step_segment(z: Tensor, seg: LinearSegment, t_from: float, t_to: float) -> Tensor:
    """Advance z exactly from t_from to t_to within one segment."""
    if t_from < seg.t_start - _TILE_TOL or t_to > seg.t_end + _TILE_TOL or t_to < t_from:
        raise ValueError(
            f"[{t_from}, {t_to}] not contained in segment [{seg.t_start}, {seg.t_end}]"
        )
    phi, psi = augmented_expm(seg.A, seg.b, t_to - t_from)
    return phi @ torch.as_tensor(z, dtype=phi.dtype) + psi


def integrate_affine_grid(A: Tensor, b: Tensor, z0: Tensor, bounds: Tensor, query_times: Tensor) -> Tensor:
    """Batched sweep over K contiguous affine segments, evaluated at query times.

    A: (..., K, d, d), b: (..., K, d), z0: (..., d), bounds: (K+1,) shared
    segment boundaries, query_times: (..., Q) or (Q,). Segment start states
    are carried left-to-right with one full-segment exponential each; every
    query is then anchored at its segment's start state with its own partial
    exponential, so refining the query grid never changes values at shared
    points. Returns states (..., Q, d).
    """
    A = torch.as_tensor(A)
    b = torch.as_tensor(b)
    z0 = torch.as_tensor(z0, dtype=A.dtype)
    bounds = torch.as_tensor(bounds, dtype=A.dtype)
    query_times = torch.as_tensor(query_times, dtype=A.dtype)
    K, d = A.shape[-3], A.shape[-1]
    if bounds.numel() != K + 1:
        raise ValueError("bounds must have K+1 entries")

    widths = bounds[1:] - bounds[:-1]
    phi, psi = augmented_expm(A, b, widths.expand(A.shape[:-3] + (K,)))
    starts = [z0]
    for k in range(K):
        zk = starts[-1]
        starts.append((phi[..., k, :, :] @ zk.unsqueeze(-1)).squeeze(-1) + psi[..., k, :])
    start_states = torch.stack(starts[:K], dim=-2)  # (..., K, d)

    idx = torch.searchsorted(bounds.detach(), query_times.detach(), right=True) - 1
    idx = idx.clamp(0, K - 1)  # (..., Q)
    offs = query_times - bounds[idx]
    batch = torch.broadcast_shapes(A.shape[:-3], idx.shape[:-1])
    Q = idx.shape[-1]
    idx = idx.expand(*batch, Q)
    offs = offs.expand(*batch, Q)
    Aq = torch.gather(
        A.expand(*batch, K, d, d), -3, idx[..., None, None].expand(*batch, Q, d, d)
    )
    bq = torch.gather(b.expand(*batch, K, d), -2, idx[..., None].expand(*batch, Q, d))
    zq = torch.gather(
        start_states.expand(*batch, K, d), -2, idx[..., None].expand(*batch, Q, d)
    )
    phi_q, psi_q = augmented_expm(Aq, bq, offs)
    return (phi_q @ zq.unsqueeze(-1)).squeeze(-1) + psi_q


def integrate_piecewise(flow: PiecewiseFlow, query_times) -> Tensor:
    """Evaluate a piecewise-affine flow at sorted query times in [0, 1]."""
    q = _as_f64(query_times)
    if q.ndim != 1:
        raise ValueError("query_times must be one-dimensional")
    if q.numel() and ((q < -_TILE_TOL).any() or (q > 1 + _TILE_TOL).any()):
        raise ValueError("query times must lie in [0, 1]")
    if q.numel() > 1 and (q[1:] < q[:-1]).any():
        raise ValueError("query times must be sorted")
    A = torch.stack([s.A.to(torch.float64) for s in flow.segments])
    b = torch.stack([s.b.to(torch.float64) for s in flow.segments])
    bounds = torch.tensor(
        [flow.segments[0].t_start] + [s.t_end for s in flow.segments], dtype=torch.float64
    )
    return integrate_affine_grid(A, b, _as_f64(flow.z0), bounds, q)


def rk4_oracle(field, z0, t0, t1, dt: float) -> Tensor:
    """Classical fixed-step RK4 from t0 to t1, step size at most dt.

    ``field`` is either a callable (t, z) -> dz/dt or an (A, b) pair for the
    affine case. Batched: z0 may carry leading dims, and for the affine case
    t0/t1 may be per-element tensors (a common substep count is used, sized
    so every element's step is at most dt). Kept independent of the
    closed-form path so it can serve as its oracle.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    z = _as_f64(z0).clone()
    if isinstance(field, tuple):
        A, b = (_as_f64(field[0]), _as_f64(field[1]))

        def f(t, zz):
            return (A @ zz.unsqueeze(-1)).squeeze(-1) + b

    else:
        f = field
    t0 = _as_f64(t0)
    t1 = _as_f64(t1)
    span = t1 - t0
    if (span < 0).any():
        raise ValueError("t1 must be >= t0")
    max_span = float(span.max()) if span.numel() else 0.0
    if max_span == 0.0:
        return z
    n = max(1, int(torch.ceil(torch.tensor(max_span / dt - 1e-12)).item()))
    h = span / n
    h_ = h[..., None] if h.ndim else h
    for i in range(n):
        t = t0 + i * h
        k1 = f(t, z)
        k2 = f(t + h / 2, z + h_ / 2 * k1)
        k3 = f(t + h / 2, z + h_ / 2 * k2)
        k4 = f(t + h, z + h_ * k3)
        z = z + h_ / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if float(z.abs().max()) > DIVERGENCE_BOUND:
            raise DivergenceError(float((t0 + (i + 1) * h).max()))
    return z
