"""Seeded scenario sweeps over disturbance magnitudes and parameter jitter.

Each (magnitude, seed) pair gets its own deterministic RNG stream, so a
sweep is reproducible bit-for-bit and train/test splits can differ in the
physical parameters of the underlying DAE. Failures of individual
scenarios are collected and reported; the batch continues.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .emt import EmtMode, EmtSystem, dc_steady_state, simulate_emt
from .erl import ErlSystem, PiecewiseConstant, erl_steady_source, simulate_erl
from .events import Event, EventSchedule
from .swing import SwingSystem, electrical_power, kron_reduce, simulate_swing
from .trajectory import Trajectory

_FAMILY_CODE = {"swing": 1, "erl": 2, "emt": 3}


@dataclass
class ScenarioSweep:
    magnitudes: list[float]
    jitter: dict[str, tuple[float, float]] = field(default_factory=dict)
    overrides: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSweep":
        return cls(
            magnitudes=list(d["magnitudes"]),
            jitter={k: (float(v[0]), float(v[1])) for k, v in d.get("jitter", {}).items()},
            overrides=dict(d.get("overrides", {})),
        )


@dataclass
class ScenarioFailure:
    scenario_id: str
    error: str


def _jitter_factors(sweep: ScenarioSweep, rng: np.random.Generator, allowed: tuple[str, ...]) -> dict:
    for key in sweep.jitter:
        if key not in allowed:
            raise ValueError(f"unknown jitter parameter {key!r} (allowed: {allowed})")
    out = {}
    for key in sorted(sweep.jitter):
        lo, hi = sweep.jitter[key]
        out[key] = float(rng.uniform(lo, hi))
    return out


def _build_swing(magnitude: float, sweep: ScenarioSweep, rng: np.random.Generator) -> Trajectory:
    ov = sweep.overrides
    n = int(ov.get("n_gen", 2))
    fac = _jitter_factors(sweep, rng, ("M", "D", "x_line", "delta0"))
    # well-damped desk-scale machines: ~1 Hz inter-machine mode that settles
    # within a few seconds, plus the common-mode frequency response
    M = np.linspace(0.05, 0.035, n) * fac.get("M", 1.0)
    D = np.linspace(0.16, 0.12, n) * fac.get("D", 1.0)
    E = np.full(n, 1.05)
    x_line = (0.5 + 0.15 * np.arange(n) / max(1, n - 1)) * fac.get("x_line", 1.0)

    # generator internal nodes 0..n-1 tied to a common load bus n
    n_bus = n + 1
    Y = np.zeros((n_bus, n_bus), dtype=np.complex128)
    for i in range(n):
        y = 1.0 / (0.02 + 1j * x_line[i])
        Y[i, i] += y
        Y[n, n] += y
        Y[i, n] -= y
        Y[n, i] -= y
    p_load = 0.9 * n / 2
    Y[n, n] += p_load - 0.3j * p_load  # constant-impedance load at ~1 p.u. voltage
    yred = kron_reduce(Y, list(range(n)))

    delta0 = (0.05 + 0.12 * np.arange(n)) * fac.get("delta0", 1.0)
    sys = SwingSystem(M=M, D=D, Pm=np.zeros(n), E=E, Yred=yred)
    sys.Pm = electrical_power(sys, delta0)  # exact equilibrium before the event
    omega0 = np.full(n, sys.omega_s)

    t_event = float(ov.get("event_time", 1.0))
    schedule = EventSchedule([Event(t_event, "load-step", magnitude, -1)])
    return simulate_swing(
        sys,
        (delta0, omega0),
        schedule,
        dt=float(ov.get("dt", 0.01)),
        t_max=float(ov.get("t_max", 15.0)),
    )


def _build_erl(magnitude: float, sweep: ScenarioSweep, rng: np.random.Generator) -> Trajectory:
    ov = sweep.overrides
    fac = _jitter_factors(sweep, rng, ("Tp", "Tq", "impedance", "alpha_t", "beta_t"))
    p0, q0 = 1.0, 0.3
    z = (0.05 + 0.25j) * fac.get("impedance", 1.0)
    sys = ErlSystem(
        Tp=5.0 * fac.get("Tp", 1.0),
        Tq=4.0 * fac.get("Tq", 1.0),
        Pbar=PiecewiseConstant.constant(p0),
        Qbar=PiecewiseConstant.constant(q0),
        # steady-state exponents above the transient ones so a load step
        # produces the drop-then-partial-recovery voltage signature
        alpha_s=2.2,
        alpha_t=0.4 * fac.get("alpha_t", 1.0),
        beta_s=2.0,
        beta_t=0.6 * fac.get("beta_t", 1.0),
        V0=1.0,
        source_emf=0.0,
        source_impedance=z,
    )
    sys.source_emf = erl_steady_source(z, sys.V0, p0, q0)
    t_event = float(ov.get("event_time", 1.0))
    schedule = EventSchedule([Event(t_event, "load-step", magnitude, 0)])
    return simulate_erl(
        sys,
        schedule,
        dt=float(ov.get("dt", 0.02)),
        t_max=float(ov.get("t_max", 30.0)),
    )


def _build_emt(magnitude: float, sweep: ScenarioSweep, rng: np.random.Generator) -> Trajectory:
    ov = sweep.overrides
    fac = _jitter_factors(sweep, rng, ("L", "C", "R", "fault_g", "clear"))
    n_v = 3
    cap = 1e-4 * fac.get("C", 1.0)
    C = np.diag([cap, 1.2 * cap, 0.9 * cap])
    g_shunt = 0.5
    G = np.diag([g_shunt, g_shunt, g_shunt])
    # three branches in a ring: (0-1), (1-2), (2-0)
    inc = np.array([[1.0, -1.0, 0.0], [0.0, 1.0, -1.0], [-1.0, 0.0, 1.0]])
    L = np.diag([1e-3, 1.3e-3, 0.8e-3]) * fac.get("L", 1.0)
    R = np.diag([0.5, 0.6, 0.4]) * fac.get("R", 1.0)
    u = np.array([5.0, 0.0, 0.0])

    g_fault = (20.0 + 300.0 * abs(magnitude)) * fac.get("fault_g", 1.0)
    G_fault = G.copy()
    G_fault[2, 2] += g_fault
    t_fault = float(ov.get("fault_time", 0.05))
    clear_after = 0.04 * fac.get("clear", 1.0)
    t_clear = t_fault + clear_after
    sys = EmtSystem(
        modes={
            "pre": EmtMode(C, G, u),
            "fault": EmtMode(C, G_fault, u),
            "post": EmtMode(C, G, u),
        },
        L=L,
        R=R,
        incidence=inc,
        schedule=[(0.0, "pre"), (t_fault, "fault"), (t_clear, "post")],
        clear_time=t_clear,
    )
    init = dc_steady_state(sys, "pre")
    return simulate_emt(
        sys,
        init,
        t_max=float(ov.get("t_max", 0.2)),
        dt_out=float(ov.get("dt_out", 2e-4)),
    )


_BUILDERS = {"swing": _build_swing, "erl": _build_erl, "emt": _build_emt}


def make_scenario_batch(
    family: str,
    sweep: ScenarioSweep,
    seeds: list[int],
) -> tuple[list[Trajectory], list[ScenarioFailure]]:
    """One trajectory per (magnitude, seed), each with its own jittered system.

    Scenario errors do not abort the batch; they come back as
    ScenarioFailure entries keyed by scenario id.
    """
    if family not in _BUILDERS:
        raise ValueError(f"unknown family {family!r}")
    if not sweep.magnitudes or not seeds:
        raise ValueError("sweep magnitudes and seeds must be non-empty")
    build = _BUILDERS[family]
    out: list[Trajectory] = []
    failures: list[ScenarioFailure] = []
    for gi, mag in enumerate(sweep.magnitudes):
        for seed in seeds:
            sid = f"{family}_g{gi:02d}_m{mag:+.3f}_s{seed}"
            rng = np.random.default_rng([_FAMILY_CODE[family], gi, int(seed)])
            try:
                traj = build(float(mag), sweep, rng)
            except Exception as exc:  # report, keep sweeping
                failures.append(ScenarioFailure(sid, f"{type(exc).__name__}: {exc}"))
                continue
            traj.meta.update(
                {
                    "family": family,
                    "magnitude": float(mag),
                    "seed": int(seed),
                    "scenario_id": sid,
                }
            )
            out.append(traj)
    return out, failures
