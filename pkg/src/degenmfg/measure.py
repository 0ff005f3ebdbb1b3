"""Equal-weight particle measures on R^n and the quadratic Wasserstein metric."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import kernels
from .errors import DimensionError, UnsupportedCoupling


@dataclass(frozen=True, eq=False)
class ParticleMeasure:
    """Empirical measure with uniform weights 1/N on the rows of ``points``."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim == 0:
            pts = pts.reshape(1, 1)
        elif pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] < 1:
            raise DimensionError(f"points must be an (N, n) array with N >= 1, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("particle measure contains non-finite entries")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return self.points.shape[1]

    @property
    def size(self) -> int:
        return self.points.shape[0]

    def __len__(self):
        return self.size

    def __repr__(self):
        return f"ParticleMeasure(N={self.size}, n={self.n})"

    @classmethod
    def dirac(cls, x) -> "ParticleMeasure":
        return cls(np.atleast_1d(np.asarray(x, dtype=float))[None, :])

    def unique_atoms(self) -> tuple[np.ndarray, np.ndarray]:
        """Distinct atoms and their weights (multiplicity / N)."""
        atoms, counts = np.unique(self.points, axis=0, return_counts=True)
        return atoms, counts / self.size

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{c}" for c in range(self.n)])
            w.writerows(self.points.tolist())

    @classmethod
    def from_csv(cls, path) -> "ParticleMeasure":
        rows = list(csv.reader(Path(path).read_text().splitlines()))
        return cls(np.array([[float(v) for v in r] for r in rows[1:]]))


def as_measure(m) -> ParticleMeasure:
    return m if isinstance(m, ParticleMeasure) else ParticleMeasure(m)


def w2_distance(a: ParticleMeasure, b: ParticleMeasure) -> float:
    """Quadratic Wasserstein distance between two particle measures.

    In one dimension the monotone (sorted-quantile) coupling is optimal and any
    pair of sizes is accepted. For ``n >= 2`` the exact optimal coupling of two
    equal-size clouds is a permutation, found by linear assignment.
    """
    a, b = as_measure(a), as_measure(b)
    if a.n != b.n:
        raise DimensionError(f"dimension mismatch: {a.n} vs {b.n}")
    if a.n == 1:
        sq = kernels.w2_sq_sorted_1d(np.sort(a.points[:, 0]), np.sort(b.points[:, 0]))
        return float(np.sqrt(max(sq, 0.0)))
    if a.size != b.size:
        raise UnsupportedCoupling("exact W2 in n >= 2 needs equal particle counts")
    cost = np.sum((a.points[:, None, :] - b.points[None, :, :]) ** 2, axis=2)
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(cost[rows, cols].mean()))


def moment(m: ParticleMeasure, order: int):
    """Mean vector (order 1) or raw second-moment matrix (order 2)."""
    pts = as_measure(m).points
    if order == 1:
        return pts.mean(axis=0)
    if order == 2:
        return pts.T @ pts / pts.shape[0]
    raise ValueError("order must be 1 or 2")


def second_moment(m: ParticleMeasure) -> float:
    """E|x|^2, which equals W2(m, delta_0)^2."""
    pts = as_measure(m).points
    return float(np.mean(np.sum(pts * pts, axis=1)))


def independent_copy(m: ParticleMeasure, rng: np.random.Generator) -> ParticleMeasure:
    """Same atoms under a fresh random indexing.

    Pairing row i of ``m`` with row i of the copy simulates a draw of
    (xi, xi~) with xi~ an independent copy of xi.
    """
    m = as_measure(m)
    return ParticleMeasure(m.points[rng.permutation(m.size)])


def derangement(size: int, rng: np.random.Generator) -> np.ndarray:
    """Random permutation without fixed points (identity when size == 1)."""
    if size == 1:
        return np.zeros(1, dtype=int)
    while True:
        perm = rng.permutation(size)
        if not np.any(perm == np.arange(size)):
            return perm
