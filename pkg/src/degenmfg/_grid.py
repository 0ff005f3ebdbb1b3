from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t0 = s_0 < ... < s_K = T."""

    t0: float
    T: float
    K: int

    def __post_init__(self):
        if not self.T > self.t0:
            raise ValueError(f"need t0 < T, got {self.t0} >= {self.T}")
        if int(self.K) < 1:
            raise ValueError("K must be >= 1")
        object.__setattr__(self, "K", int(self.K))

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.K

    @property
    def nodes(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.K + 1)

    def refine(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.t0, self.T, self.K * factor)

    def index_of(self, t: float) -> int:
        """Index of the node equal to t (to rounding)."""
        k = int(round((t - self.t0) / self.dt))
        if k < 0 or k > self.K or abs(self.t0 + k * self.dt - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"{t} is not a node of the grid")
        return k
