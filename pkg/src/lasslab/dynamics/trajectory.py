"""Multi-channel sampled record of one simulated scenario."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Trajectory:
    """Sampled dynamic record in physical units.

    values is (n_channels, n_times); meta carries scenario identifiers
    (family, disturbance magnitude, seed, ...) that survive into dataset
    records.
    """

    channels: list[str]
    times: np.ndarray
    values: np.ndarray
    t_max: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.channels), self.times.size):
            raise ValueError(
                f"values shape {self.values.shape} != ({len(self.channels)}, {self.times.size})"
            )
        if self.times.size == 0:
            raise ValueError("empty trajectory")
        if self.times[0] != 0.0:
            raise ValueError("times must start at 0")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        if self.times[-1] > self.t_max + 1e-9:
            raise ValueError(f"last sample {self.times[-1]} exceeds horizon {self.t_max}")
        if not (np.isfinite(self.times).all() and np.isfinite(self.values).all()):
            raise ValueError("non-finite trajectory data")

    @property
    def n_channels(self) -> int:
        return len(self.channels)
