"""Switched-linear EMT network integrated exactly per topology mode.

Within each mode the stacked state [v; i_L] obeys an affine LTI system
assembled from the nodal capacitance/conductance matrices and the branch
R/L matrices; stepping is exact through the augmented matrix exponential
from the linode module, so the only approximation anywhere is the float64
exponential itself. State is carried across switching instants unchanged.
Source injections are constant per mode (the exactness of the closed-form
step requires it).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .. import linode
from .trajectory import Trajectory


class ModelConstructionError(ValueError):
    """Mode matrices violate the SPD/PD requirements."""


@dataclass
class EmtMode:
    C: np.ndarray       # nodal capacitance, farad, SPD
    G: np.ndarray       # nodal conductance, siemens
    u: np.ndarray       # constant nodal source injection, ampere

    def __post_init__(self):
        self.C = np.asarray(self.C, dtype=np.float64)
        self.G = np.asarray(self.G, dtype=np.float64)
        self.u = np.asarray(self.u, dtype=np.float64)


@dataclass
class EmtSystem:
    modes: dict[str, EmtMode]
    L: np.ndarray            # branch inductance, henry, PD
    R: np.ndarray            # branch resistance, ohm
    incidence: np.ndarray    # reduced branch-to-node incidence (n_branch x n_node)
    schedule: list[tuple[float, str]] = field(default_factory=list)
    clear_time: float | None = None

    def __post_init__(self):
        self.L = np.asarray(self.L, dtype=np.float64)
        self.R = np.asarray(self.R, dtype=np.float64)
        self.incidence = np.asarray(self.incidence, dtype=np.float64)
        if not self.schedule or self.schedule[0][0] != 0.0:
            raise ValueError("schedule must start at t=0")
        ts = [t for t, _ in self.schedule]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("switching instants must be strictly increasing")
        for label, _ in ((lab, None) for _, lab in self.schedule):
            if label not in self.modes:
                raise ValueError(f"schedule references unknown mode {label!r}")
        n_v = self.incidence.shape[1]
        n_l = self.incidence.shape[0]
        if self.L.shape != (n_l, n_l) or self.R.shape != (n_l, n_l):
            raise ValueError("L/R must be n_branch x n_branch")
        for label, mode in self.modes.items():
            if mode.C.shape != (n_v, n_v) or mode.G.shape != (n_v, n_v) or mode.u.shape != (n_v,):
                raise ValueError(f"mode {label!r} matrices inconsistent with incidence")
            _require_spd(mode.C, f"C of mode {label!r}")
        _require_spd(self.L, "L")

    @property
    def n_v(self) -> int:
        return self.incidence.shape[1]

    @property
    def n_l(self) -> int:
        return self.incidence.shape[0]


def _require_spd(mat: np.ndarray, name: str):
    if not np.allclose(mat, mat.T, atol=1e-12):
        raise ModelConstructionError(f"{name} is not symmetric")
    try:
        np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        raise ModelConstructionError(f"{name} is not positive definite")


def _mode_dynamics(sys: EmtSystem, mode: EmtMode) -> tuple[np.ndarray, np.ndarray]:
    n_v, n_l = sys.n_v, sys.n_l
    cinv_g = np.linalg.solve(mode.C, mode.G)
    cinv_lt = np.linalg.solve(mode.C, sys.incidence.T)
    linv_l = np.linalg.solve(sys.L, sys.incidence)
    linv_r = np.linalg.solve(sys.L, sys.R)
    M = np.block([[-cinv_g, -cinv_lt], [linv_l, -linv_r]])
    w = np.concatenate([np.linalg.solve(mode.C, mode.u), np.zeros(n_l)])
    return M, w


def dc_steady_state(sys: EmtSystem, label: str) -> np.ndarray:
    """Equilibrium of one mode (M x + w = 0); handy as a quiescent initial state."""
    M, w = _mode_dynamics(sys, sys.modes[label])
    return np.linalg.solve(M, -w)


def simulate_emt(
    sys: EmtSystem,
    init: np.ndarray,
    t_max: float,
    dt_out: float,
) -> Trajectory:
    """Exact switched-affine integration sampled on a uniform output grid.

    Output samples inside each mode interval are anchored at the interval's
    entry state with their own exponential, and the entry state of the next
    mode is the exact end state of the previous one, so left/right limits
    at every switch agree bitwise. A constant channel carrying the fault
    clearing time is appended as context.
    """
    if dt_out <= 0:
        raise ValueError("dt_out must be positive")
    init = np.asarray(init, dtype=np.float64)
    n_state = sys.n_v + sys.n_l
    if init.shape != (n_state,):
        raise ValueError(f"init must have {n_state} entries")

    n_out = int(math.floor(t_max / dt_out + 1e-9)) + 1
    out_times = np.arange(n_out) * dt_out
    sched = [(t, lab) for t, lab in sys.schedule if t < t_max - 1e-12] or [sys.schedule[0]]
    bounds = [t for t, _ in sched] + [t_max]

    state = torch.from_numpy(init.copy())
    out_vals = np.empty((n_state, n_out))
    for k, (t0, label) in enumerate(sched):
        t1 = bounds[k + 1]
        last = k == len(sched) - 1
        M, w = _mode_dynamics(sys, sys.modes[label])
        Mt = torch.from_numpy(M)
        wt = torch.from_numpy(w)
        sel = out_times >= t0 - 1e-12
        if not last:
            sel &= out_times < t1 - 1e-12
        idx = np.nonzero(sel)[0]
        if idx.size:
            offs = torch.from_numpy(out_times[idx] - t0)
            phi, psi = linode.augmented_expm(Mt, wt, offs)
            vals = (phi @ state.unsqueeze(-1)).squeeze(-1) + psi
            out_vals[:, idx] = vals.numpy().T
        if not last:
            phi, psi = linode.augmented_expm(Mt, wt, t1 - t0)
            state = phi @ state + psi

    clear = sys.clear_time if sys.clear_time is not None else 0.0
    values = np.vstack([out_vals, np.full((1, n_out), clear)])
    channels = (
        [f"v_{i}" for i in range(sys.n_v)]
        + [f"il_{i}" for i in range(sys.n_l)]
        + ["clear_time"]
    )
    return Trajectory(
        channels=channels,
        times=out_times,
        values=values,
        t_max=t_max,
        meta={"family": "emt", "clear_time": clear},
    )
