"""Disturbance schedules applied during simulation."""

from __future__ import annotations

from dataclasses import dataclass, field

EVENT_KINDS = ("load-step", "fault-apply", "fault-clear")


@dataclass(frozen=True)
class Event:
    time: float
    kind: str
    magnitude: float = 0.0
    target: int = -1  # -1 means system-wide

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}, expected one of {EVENT_KINDS}")
        if self.time < 0:
            raise ValueError("event time must be non-negative")


@dataclass
class EventSchedule:
    events: list[Event] = field(default_factory=list)

    def __post_init__(self):
        for a, b in zip(self.events, self.events[1:]):
            if b.time <= a.time:
                raise ValueError("event times must be strictly increasing")

    def check_horizon(self, t_max: float):
        if self.events and self.events[-1].time > t_max:
            raise ValueError(f"event at t={self.events[-1].time} beyond horizon {t_max}")

    def times(self) -> list[float]:
        return [e.time for e in self.events]
