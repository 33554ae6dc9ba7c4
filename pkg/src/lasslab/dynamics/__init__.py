"""Deterministic generators for the three dynamic-model families.

Swing-equation rotor dynamics (classical model behind a Kron-reduced
network), exponential-recovery load voltage dynamics on a Thevenin
equivalent, and switched-linear EMT networks integrated exactly per mode.
All simulators are seeded and bit-reproducible.
"""

from .trajectory import Trajectory
from .events import Event, EventSchedule
from .swing import SwingSystem, ReductionError, kron_reduce, electrical_power, simulate_swing
from .erl import ErlSystem, PiecewiseConstant, AlgebraicSolveError, erl_steady_source, simulate_erl
from .emt import EmtMode, EmtSystem, ModelConstructionError, simulate_emt
from .scenarios import ScenarioSweep, ScenarioFailure, make_scenario_batch

__all__ = [
    "Trajectory",
    "Event",
    "EventSchedule",
    "SwingSystem",
    "ReductionError",
    "kron_reduce",
    "electrical_power",
    "simulate_swing",
    "ErlSystem",
    "PiecewiseConstant",
    "AlgebraicSolveError",
    "erl_steady_source",
    "simulate_erl",
    "EmtMode",
    "EmtSystem",
    "ModelConstructionError",
    "simulate_emt",
    "ScenarioSweep",
    "ScenarioFailure",
    "make_scenario_batch",
]
