"""Switched-linear EMT integration: exactness, passivity, continuity."""

import numpy as np
import pytest
import torch

from lasslab import linode
from lasslab.dynamics import EmtMode, EmtSystem, ModelConstructionError, simulate_emt
from lasslab.dynamics.emt import _mode_dynamics, dc_steady_state


def _ring(u0=0.0, fault=None, clear_time=None):
    C = np.diag([1e-4, 1.2e-4, 0.9e-4])
    G = np.diag([0.5, 0.5, 0.5])
    inc = np.array([[1.0, -1.0, 0.0], [0.0, 1.0, -1.0], [-1.0, 0.0, 1.0]])
    L = np.diag([1e-3, 1.3e-3, 0.8e-3])
    R = np.diag([0.5, 0.6, 0.4])
    u = np.array([u0, 0.0, 0.0])
    modes = {"pre": EmtMode(C, G, u)}
    schedule = [(0.0, "pre")]
    if fault is not None:
        Gf = G.copy()
        Gf[2, 2] += 80.0
        modes["fault"] = EmtMode(C, Gf, u)
        modes["post"] = EmtMode(C, G, u)
        schedule += [(fault, "fault"), (fault + 0.04, "post")]
        clear_time = fault + 0.04
    return EmtSystem(modes=modes, L=L, R=R, incidence=inc, schedule=schedule, clear_time=clear_time)


def test_zero_state_zero_source_stays_zero():
    sys = _ring(u0=0.0)
    traj = simulate_emt(sys, np.zeros(6), t_max=0.05, dt_out=1e-3)
    assert np.abs(traj.values[:6]).max() == 0.0


def test_passive_network_energy_non_increasing():
    sys = _ring(u0=0.0)
    rng = np.random.default_rng(3)
    init = rng.standard_normal(6)
    traj = simulate_emt(sys, init, t_max=0.1, dt_out=2e-4)
    C = sys.modes["pre"].C
    L = sys.L
    v = traj.values[:3]
    il = traj.values[3:6]
    energy = 0.5 * np.einsum("it,ij,jt->t", v, C, v) + 0.5 * np.einsum("it,ij,jt->t", il, L, il)
    assert np.all(np.diff(energy) <= 1e-15)


def test_two_mode_fault_matches_rk4():
    sys = _ring(u0=5.0, fault=0.02)
    init = dc_steady_state(sys, "pre")
    dt_out = 2e-4
    traj = simulate_emt(sys, init, t_max=0.08, dt_out=dt_out)

    z = torch.from_numpy(init.copy())
    t_prev = 0.0
    bounds = [0.0, 0.02, 0.06, 0.08]
    labels = ["pre", "fault", "post"]
    worst = 0.0
    for i, t in enumerate(traj.times):
        if t > t_prev:
            for (lo, hi, lab) in zip(bounds[:-1], bounds[1:], labels):
                a, b = max(lo, t_prev), min(hi, float(t))
                if b > a + 1e-15:
                    M, w = _mode_dynamics(sys, sys.modes[lab])
                    z = linode.rk4_oracle((M, w), z, a, b, dt_out / 1000)
        t_prev = float(t)
        scale = max(1.0, float(z.abs().max()))
        worst = max(worst, float(np.abs(traj.values[:6, i] - z.numpy()).max()) / scale)
    assert worst < 1e-8


def test_state_continuous_at_switch_bitwise():
    sys = _ring(u0=5.0, fault=0.02)
    init = dc_steady_state(sys, "pre")
    traj = simulate_emt(sys, init, t_max=0.08, dt_out=1e-3)
    k = int(np.nonzero(np.isclose(traj.times, 0.02))[0][0])
    # the sample at the switch instant must equal the carried end state of mode "pre"
    M, w = _mode_dynamics(sys, sys.modes["pre"])
    phi, psi = linode.augmented_expm(torch.from_numpy(M), torch.from_numpy(w), 0.02)
    carried = (phi @ torch.from_numpy(init.copy()) + psi).numpy()
    assert np.array_equal(traj.values[:6, k], carried)


def test_clear_time_channel_is_constant_context():
    sys = _ring(u0=5.0, fault=0.02)
    traj = simulate_emt(sys, dc_steady_state(sys, "pre"), t_max=0.08, dt_out=1e-3)
    row = traj.values[traj.channels.index("clear_time")]
    assert np.all(row == 0.06)


def test_non_spd_capacitance_rejected():
    C = np.diag([1e-4, -1e-4, 1e-4])
    G = np.eye(3) * 0.5
    inc = np.array([[1.0, -1.0, 0.0]])
    with pytest.raises(ModelConstructionError, match="positive definite"):
        EmtSystem(
            modes={"pre": EmtMode(C, G, np.zeros(3))},
            L=np.eye(1) * 1e-3,
            R=np.eye(1) * 0.5,
            incidence=inc,
            schedule=[(0.0, "pre")],
        )
