"""Classical multi-machine swing dynamics behind a Kron-reduced network.

Generators are constant-EMF sources behind transient reactance; the network
algebra is eliminated up front by Kron reduction to the generator internal
nodes, leaving a pure ODE in rotor angles and speeds. Load-step disturbances
act as equivalent mechanical-power steps (a dropped load accelerates the
rotors exactly like extra input power); fault events scale the electrical
power transfer while applied.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .events import EventSchedule
from .trajectory import Trajectory

DIVERGENCE_BOUND = 1e6


class ReductionError(ValueError):
    """Network reduction failed because the eliminated block is singular."""


class SimulationDivergedError(RuntimeError):
    def __init__(self, t: float):
        super().__init__(f"state magnitude exceeded {DIVERGENCE_BOUND:g} at t={t:.6g} s")
        self.t = t


def kron_reduce(Yfull: np.ndarray, keep) -> np.ndarray:
    """Eliminate all nodes not in `keep`, folding them into the kept block.

    Returns Y_kk - Y_kd @ Y_dd^-1 @ Y_dk over the kept indices (in the order
    given). Raises ReductionError when the eliminated block is numerically
    singular.
    """
    Y = np.asarray(Yfull, dtype=np.complex128)
    if Y.ndim != 2 or Y.shape[0] != Y.shape[1]:
        raise ValueError("Yfull must be square")
    keep = list(keep)
    elim = [i for i in range(Y.shape[0]) if i not in keep]
    if not elim:
        return Y[np.ix_(keep, keep)].copy()
    Ykk = Y[np.ix_(keep, keep)]
    Ykd = Y[np.ix_(keep, elim)]
    Ydk = Y[np.ix_(elim, keep)]
    Ydd = Y[np.ix_(elim, elim)]
    cond = np.linalg.cond(Ydd)
    if not np.isfinite(cond) or cond > 1e12:
        raise ReductionError(
            f"eliminated block is singular (condition estimate {cond:.3e})"
        )
    return Ykk - Ykd @ np.linalg.solve(Ydd, Ydk)


@dataclass
class SwingSystem:
    """Classical-model parameters; Yred couples the generator internal nodes."""

    M: np.ndarray       # inertia, s^2 rad^-1 p.u.
    D: np.ndarray       # damping, p.u.
    Pm: np.ndarray      # mechanical power, p.u.
    E: np.ndarray       # internal EMF magnitude, p.u.
    Yred: np.ndarray    # reduced complex admittance, p.u.
    omega_s: float = 2 * math.pi * 60.0

    def __post_init__(self):
        for name in ("M", "D", "Pm", "E"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        self.Yred = np.asarray(self.Yred, dtype=np.complex128)
        n = self.M.size
        if not all(getattr(self, f).shape == (n,) for f in ("D", "Pm", "E")):
            raise ValueError("per-generator arrays must share one length")
        if self.Yred.shape != (n, n):
            raise ValueError(f"Yred must be {n}x{n}")
        if np.any(self.M <= 0):
            raise ValueError("inertias must be positive")
        if np.any(self.D < 0):
            raise ValueError("damping must be non-negative")
        if not np.allclose(self.Yred, self.Yred.T, atol=1e-9):
            raise ValueError("Yred must be symmetric")

    @property
    def n_gen(self) -> int:
        return self.M.size


def electrical_power(sys: SwingSystem, delta: np.ndarray) -> np.ndarray:
    """Injected electrical power at each internal node for rotor angles delta."""
    G, B = sys.Yred.real, sys.Yred.imag
    dd = delta[:, None] - delta[None, :]
    return sys.E * ((sys.E[None, :] * (G * np.cos(dd) + B * np.sin(dd))).sum(axis=1))


def _span_grid(t0: float, t1: float, dt: float):
    n = max(1, int(math.ceil((t1 - t0) / dt - 1e-9)))
    return n, (t1 - t0) / n


def simulate_swing(
    sys: SwingSystem,
    init: tuple[np.ndarray, np.ndarray],
    schedule: EventSchedule,
    dt: float,
    t_max: float = 15.0,
) -> Trajectory:
    """Fixed-step RK4 on rotor angles/speeds, steps split exactly at events.

    Channels: delta_i (rad), omega_i (rad/s) and the derived frequency
    deviation fdev_i = (omega_i - omega_s)/(2 pi) in Hz. load-step events
    carry the load change in p.u. (negative = load drop) and are applied as
    the equivalent Pm step of opposite sign; fault-apply scales electrical
    power by (1 - magnitude) until fault-clear restores it.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    delta0, omega0 = (np.asarray(x, dtype=np.float64) for x in init)
    n = sys.n_gen
    if delta0.shape != (n,) or omega0.shape != (n,):
        raise ValueError("init dimensions must match n_gen")
    schedule.check_horizon(t_max)

    pm = sys.Pm.copy()
    pe_scale = 1.0

    def deriv(y):
        d, w = y[:n], y[n:]
        pe = pe_scale * electrical_power(sys, d)
        dd = w - sys.omega_s
        dw = (pm - sys.D * dd - pe) / sys.M
        return np.concatenate([dd, dw])

    y = np.concatenate([delta0, omega0])
    times = [0.0]
    states = [y.copy()]
    breaks = [e.time for e in schedule.events if 0.0 < e.time < t_max] + [t_max]
    pending = list(schedule.events)
    t_left = 0.0
    for t_right in breaks:
        while pending and pending[0].time <= t_left + 1e-12:
            ev = pending.pop(0)
            if ev.kind == "load-step":
                if ev.target < 0:
                    pm = pm - ev.magnitude / n
                else:
                    pm = pm.copy()
                    pm[ev.target] -= ev.magnitude
            elif ev.kind == "fault-apply":
                pe_scale = 1.0 - ev.magnitude
            elif ev.kind == "fault-clear":
                pe_scale = 1.0
        steps, h = _span_grid(t_left, t_right, dt)
        for i in range(steps):
            k1 = deriv(y)
            k2 = deriv(y + h / 2 * k1)
            k3 = deriv(y + h / 2 * k2)
            k4 = deriv(y + h * k3)
            y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            t = t_right if i == steps - 1 else t_left + (i + 1) * h
            if np.abs(y).max() > DIVERGENCE_BOUND:
                raise SimulationDivergedError(t)
            times.append(t)
            states.append(y.copy())
        t_left = t_right

    arr = np.asarray(states).T  # (2n, T)
    fdev = (arr[n:] - sys.omega_s) / (2 * math.pi)
    channels = (
        [f"delta_{i}" for i in range(n)]
        + [f"omega_{i}" for i in range(n)]
        + [f"fdev_{i}" for i in range(n)]
    )
    return Trajectory(
        channels=channels,
        times=np.asarray(times),
        values=np.vstack([arr, fdev]),
        t_max=t_max,
        meta={"family": "swing"},
    )
