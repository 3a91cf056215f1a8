"""Discretized continuous paths: grids, evaluation, norms, stopping and lifting.

A path is stored as samples on a strictly increasing time grid and is
understood as the piecewise-linear interpolant of those samples, so every
object built from it below is exactly computable.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np


class PathDomainError(ValueError):
    """Raised for arguments outside the domain of a path operation."""


class GridMismatchError(ValueError):
    """Raised when two paths that must share a grid do not."""


@dataclass(frozen=True, eq=False)
class TimeGrid:
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 1 or pts.size < 1:
            raise PathDomainError("time grid needs at least one point")
        if pts[0] != 0.0:
            raise PathDomainError(f"time grid must start at 0, got {pts[0]}")
        if pts.size > 1 and np.any(np.diff(pts) <= 0):
            raise PathDomainError("time grid points must be strictly increasing")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @classmethod
    def uniform(cls, T: float, n_points: int) -> "TimeGrid":
        if T <= 0 or n_points < 2:
            raise PathDomainError("uniform grid needs T > 0 and at least 2 points")
        return cls(np.linspace(0.0, T, n_points))

    @property
    def T(self) -> float:
        return float(self.points[-1])

    def __len__(self) -> int:
        return self.points.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, TimeGrid):
            return NotImplemented
        return self.points.shape == other.points.shape and bool(np.all(self.points == other.points))

    __hash__ = None

    def index_at_or_before(self, t: float) -> int:
        """Index of the last grid point <= t."""
        return int(np.searchsorted(self.points, t, side="right") - 1)


@dataclass(frozen=True, eq=False)
class DiscretePath:
    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != self.grid.points.shape:
            raise PathDomainError(
                f"values length {vals.size} does not match grid length {len(self.grid)}"
            )
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_function(cls, f, grid: TimeGrid) -> "DiscretePath":
        return cls(grid, np.asarray([f(t) for t in grid.points], dtype=float))

    @property
    def times(self) -> np.ndarray:
        return self.grid.points

    @property
    def T(self) -> float:
        return self.grid.T

    def __len__(self) -> int:
        return self.values.size

    def __call__(self, t: float) -> float:
        return eval_path(self, t)

    def with_values(self, values) -> "DiscretePath":
        return DiscretePath(self.grid, values)


@dataclass(frozen=True)
class LiftedPath:
    """A point (price, qv) of the product path space."""

    price: DiscretePath
    qv: DiscretePath

    def __post_init__(self):
        if self.price.grid != self.qv.grid:
            raise GridMismatchError("price and qv paths must share a grid")

    @property
    def grid(self) -> TimeGrid:
        return self.price.grid


@dataclass(frozen=True)
class HolderEstimate:
    alpha: float
    value: float


def _check_time(path: DiscretePath, t: float) -> None:
    if not (0.0 <= t <= path.T):
        raise PathDomainError(f"t={t} outside [0, {path.T}]")


def eval_path(path: DiscretePath, t: float) -> float:
    """Value of the piecewise-linear interpolant at ``t`` (exact at nodes)."""
    _check_time(path, t)
    return float(np.interp(t, path.grid.points, path.values))


def stop_at(path: DiscretePath, t: float) -> DiscretePath:
    """The stopped path s -> path(min(s, t)) on the same grid."""
    _check_time(path, t)
    pts = path.grid.points
    frozen = eval_path(path, t)
    vals = np.where(pts <= t, path.values, frozen)
    return DiscretePath(path.grid, vals)


def stop_lifted(lp: LiftedPath, t: float) -> LiftedPath:
    return LiftedPath(stop_at(lp.price, t), stop_at(lp.qv, t))


def sup_norm(path: DiscretePath) -> float:
    return float(np.max(np.abs(path.values)))


def holder_seminorm(path: DiscretePath, alpha: float, pairs: str = "all") -> float:
    """max |w(t) - w(s)| / |t - s|**alpha over grid pairs.

    ``pairs="dyadic"`` only scans index separations 1, 2, 4, ... which is a
    cheaper lower estimate on large grids.
    """
    if not (0.0 < alpha <= 1.0):
        raise PathDomainError(f"alpha={alpha} outside (0, 1]")
    x = path.values
    t = path.grid.points
    n = x.size
    if n < 2:
        return 0.0
    if pairs == "all":
        lags: Iterable[int] = range(1, n)
    elif pairs == "dyadic":
        lags = [1 << j for j in range(int(np.log2(n - 1)) + 1)]
    else:
        raise ValueError(f"unknown pairs mode {pairs!r}")
    best = 0.0
    for k in lags:
        ratio = np.abs(x[k:] - x[:-k]) / (t[k:] - t[:-k]) ** alpha
        best = max(best, float(ratio.max()))
    return best


def holder_norm(path: DiscretePath, alpha: float, pairs: str = "all") -> HolderEstimate:
    """|w(0)| plus the Hoelder seminorm over grid pairs."""
    semi = holder_seminorm(path, alpha, pairs=pairs)
    return HolderEstimate(alpha=alpha, value=abs(float(path.values[0])) + semi)


def lift(price: DiscretePath, qv: DiscretePath) -> LiftedPath:
    return LiftedPath(price, qv)


def max_increment(path: DiscretePath) -> float:
    if len(path) < 2:
        return 0.0
    return float(np.max(np.abs(np.diff(path.values))))


def read_path_csv(file) -> DiscretePath:
    """Read a ``t,value`` CSV file into a path; the grid is validated."""
    with open(file, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["t", "value"]:
            raise PathDomainError(f"{file}: expected header 't,value', got {header}")
        ts, vs = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise PathDomainError(f"{file}:{lineno}: expected 2 columns")
            ts.append(float(row[0]))
            vs.append(float(row[1]))
    return DiscretePath(TimeGrid(np.asarray(ts)), np.asarray(vs))


def write_path_csv(path: DiscretePath, file) -> None:
    Path(file).parent.mkdir(parents=True, exist_ok=True)
    with open(file, "w", newline="") as fh:
        fh.write("t,value\n")
        for t, v in zip(path.grid.points, path.values):
            fh.write(f"{float(t)!r},{float(v)!r}\n")
