"""Pathwise iterated integrals, quadratic variation and simple-strategy integrals.

Everything here is evaluated per path on the grid.  Stopping times are grid
times found by a forward scan, so integrals of simple strategies telescope
exactly.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numba import njit

from .path_core import (
    DiscretePath,
    LiftedPath,
    max_increment,
    stop_at,
    sup_norm,
)

# relative slack on the 2^-m threshold so that exact hits survive rounding
_THRESHOLD_SLACK = 1e-12


class LevelWarning(UserWarning):
    """A requested Karandikar level is finer than the grid can resolve."""


class NotInOmegaError(ValueError):
    """The iterated integral is undefined for a path outside Omega."""


@njit(cache=True)
def _crossing_indices(values, threshold):
    n = values.shape[0]
    out = np.empty(n, np.int64)
    out[0] = 0
    k = 1
    ref = values[0]
    for i in range(1, n):
        if abs(values[i] - ref) >= threshold:
            out[k] = i
            k += 1
            ref = values[i]
    return out[:k]


@njit(cache=True)
def compensated_cumsum(terms):
    """Cumulative sum with a leading zero, Neumaier-compensated."""
    n = terms.shape[0]
    out = np.empty(n + 1)
    out[0] = 0.0
    s = 0.0
    c = 0.0
    for i in range(n):
        x = terms[i]
        t = s + x
        if abs(s) >= abs(x):
            c += (s - t) + x
        else:
            c += (x - t) + s
        s = t
        out[i + 1] = s + c
    return out


@dataclass(frozen=True)
class KarandikarPartition:
    level: int
    indices: np.ndarray
    times: np.ndarray
    threshold: float


@dataclass(frozen=True)
class IteratedIntegralCurve:
    level: int
    curve: DiscretePath
    partition: KarandikarPartition


def karandikar_times(path: DiscretePath, m: int) -> KarandikarPartition:
    """Grid times at which the path has moved by 2**-m since the last one."""
    if m < 1:
        raise ValueError(f"level m must be >= 1, got {m}")
    thr = 2.0 ** (-m)
    idx = _crossing_indices(np.ascontiguousarray(path.values), thr * (1.0 - _THRESHOLD_SLACK))
    return KarandikarPartition(
        level=m, indices=idx, times=path.grid.points[idx].copy(), threshold=thr
    )


def _left_point_integrand(path: DiscretePath, part: KarandikarPartition) -> np.ndarray:
    # value of S at the last partition time <= t_i, for each cell (t_i, t_{i+1}]
    cells = np.arange(len(path) - 1)
    k = np.searchsorted(part.indices, cells, side="right") - 1
    return path.values[part.indices[k]]


def iterated_integral(path: DiscretePath, m: int) -> IteratedIntegralCurve:
    """The level-m discrete integral of S against itself on the whole grid."""
    part = karandikar_times(path, m)
    integrand = _left_point_integrand(path, part)
    curve = compensated_cumsum(integrand * np.diff(path.values))
    return IteratedIntegralCurve(level=m, curve=path.with_values(curve), partition=part)


def partition_square_sum(path: DiscretePath, part: KarandikarPartition) -> np.ndarray:
    """Sum of squared increments along the partition, stopped at each grid time.

    Computed without reference to the iterated integral, so it serves as an
    independent check of the integration-by-parts identity.
    """
    x = path.values
    idx = part.indices
    jumps = np.diff(x[idx]) ** 2
    completed = compensated_cumsum(jumps)
    grid_i = np.arange(x.size)
    k = np.searchsorted(idx, grid_i, side="right") - 1
    return completed[k] + (x - x[idx[k]]) ** 2


@dataclass(frozen=True)
class QvConfig:
    m_min: int = 1
    m_max: int = 8
    tol: float = 1e-3


@dataclass(frozen=True)
class QvResult:
    s_curves: list
    s_limit: DiscretePath
    qv: DiscretePath
    in_omega: bool
    tol: float
    gaps: list
    max_decrease: float
    excluded_levels: list = field(default_factory=list)
    reason: str = ""

    @property
    def levels(self) -> list:
        return [c.level for c in self.s_curves]

    def lifted(self, price: DiscretePath) -> LiftedPath:
        return LiftedPath(price, self.qv)

    def to_json(self) -> dict:
        return {
            "levels": self.levels,
            "excluded_levels": list(self.excluded_levels),
            "gaps": [float(g) for g in self.gaps],
            "max_decrease": float(self.max_decrease),
            "in_omega": bool(self.in_omega),
            "tol": float(self.tol),
            "reason": self.reason,
            "t": self.qv.grid.points.tolist(),
            "qv": self.qv.values.tolist(),
        }


def usable_levels(path: DiscretePath, m_min: int, m_max: int) -> tuple[list, list]:
    """Split m_min..m_max into levels the grid resolves and levels it does not."""
    if m_min < 1 or m_min > m_max:
        raise ValueError(f"need 1 <= m_min <= m_max, got {m_min}, {m_max}")
    resolution = max_increment(path)
    keep, drop = [], []
    for m in range(m_min, m_max + 1):
        (drop if 2.0 ** (-m) < resolution else keep).append(m)
    return keep, drop


def pathwise_qv(path: DiscretePath, m_min: int = 1, m_max: int = 8, tol: float = 1e-3) -> QvResult:
    """Quadratic variation w^2 - w(0)^2 - 2*SS from the Karandikar levels.

    Convergence is declared when the sup-norm gap between the two finest
    usable levels is at most ``tol``; the finest level is then the limit.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    keep, drop = usable_levels(path, m_min, m_max)
    if drop:
        warnings.warn(
            f"levels {drop} have threshold below the grid resolution "
            f"{max_increment(path):.3g} and are skipped",
            LevelWarning,
            stacklevel=2,
        )
    reason = ""
    if not keep:
        keep = [m_min]
        reason = "no level resolvable on this grid"
    curves = [iterated_integral(path, m) for m in keep]
    gaps = [
        float(np.max(np.abs(a.curve.values - b.curve.values)))
        for a, b in zip(curves[:-1], curves[1:])
    ]
    s_limit = curves[-1].curve
    x = path.values
    qv_vals = x**2 - x[0] ** 2 - 2.0 * s_limit.values
    qv = path.with_values(qv_vals)
    max_dec = float(max(0.0, np.max(-np.diff(qv_vals)))) if x.size > 1 else 0.0
    slack = tol * (1.0 + sup_norm(path) ** 2)

    in_omega = True
    if reason:
        in_omega = False
    elif len(curves) < 2:
        in_omega = False
        reason = "only one usable level; convergence cannot be assessed"
    elif gaps[-1] > tol:
        in_omega = False
        reason = f"levels not Cauchy: last gap {gaps[-1]:.3g} > tol"
    elif max_dec > slack:
        in_omega = False
        reason = f"qv decreases by {max_dec:.3g} in one step"
    return QvResult(
        s_curves=curves,
        s_limit=s_limit,
        qv=qv,
        in_omega=in_omega,
        tol=tol,
        gaps=gaps,
        max_decrease=max_dec,
        excluded_levels=drop,
        reason=reason,
    )


def realized_variance(path: DiscretePath) -> float:
    return float(np.sum(np.diff(path.values) ** 2))


# ---------------------------------------------------------------------------
# simple strategies


_RULE_KINDS = ("start", "never", "time", "price_above", "price_below", "move")


@dataclass(frozen=True)
class StoppingRule:
    """First grid time, at or after the search start, when a threshold is crossed.

    ``move`` measures the displacement from the price at the search start.
    The scan only reads values up to the candidate time, so the result is a
    stopping time of the price filtration.
    """

    kind: str = "start"
    level: float = 0.0

    def __post_init__(self):
        if self.kind not in _RULE_KINDS:
            raise ValueError(f"unknown stopping rule {self.kind!r}")

    def index(self, path: DiscretePath, start: int = 0) -> int:
        x = path.values
        t = path.grid.points
        last = x.size - 1
        if self.kind == "start":
            return start
        if self.kind == "never":
            return last
        seg = slice(start, None)
        if self.kind == "time":
            hit = t[seg] >= self.level
        elif self.kind == "price_above":
            hit = x[seg] >= self.level
        elif self.kind == "price_below":
            hit = x[seg] <= self.level
        else:
            hit = np.abs(x[seg] - x[start]) >= self.level
        pos = np.flatnonzero(hit)
        return start + int(pos[0]) if pos.size else last

    def to_dict(self) -> dict:
        return {"kind": self.kind, "level": self.level}


@dataclass(frozen=True)
class Holding:
    """Holding fixed at entry, computed from the path stopped at entry.

    ``const``: ``a``.  ``price``: ``a * w(tau) + b`` clipped to +-``cap``.
    """

    kind: str = "const"
    a: float = 1.0
    b: float = 0.0
    cap: float = 1e6

    def __call__(self, stopped: DiscretePath) -> float:
        if self.kind == "const":
            return float(self.a)
        if self.kind == "price":
            v = self.a * float(stopped.values[-1]) + self.b
            return float(np.clip(v, -self.cap, self.cap))
        raise ValueError(f"unknown holding kind {self.kind!r}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "a": self.a, "b": self.b, "cap": self.cap}


@dataclass(frozen=True)
class Leg:
    entry: StoppingRule
    exit: StoppingRule
    holding: Callable[[DiscretePath], float]
    weight: float = 1.0

    def window(self, path: DiscretePath) -> tuple[int, int]:
        a = self.entry.index(path, 0)
        # the exit scan starts at entry, which keeps entry <= exit on every path
        b = self.exit.index(path, a)
        return a, b

    def amount(self, path: DiscretePath, entry_idx: int) -> float:
        stopped = stop_at(path, float(path.grid.points[entry_idx]))
        return self.weight * float(self.holding(stopped))


@dataclass(frozen=True)
class SimpleStrategy:
    legs: tuple = ()

    def __add__(self, other: "SimpleStrategy") -> "SimpleStrategy":
        return SimpleStrategy(tuple(self.legs) + tuple(other.legs))

    def scale(self, c: float) -> "SimpleStrategy":
        return SimpleStrategy(
            tuple(Leg(l.entry, l.exit, l.holding, l.weight * c) for l in self.legs)
        )

    @classmethod
    def hold(cls, h: float, entry: StoppingRule | None = None, exit: StoppingRule | None = None):
        """Single leg holding the constant ``h`` between two rules (default (0, T])."""
        return cls((Leg(entry or StoppingRule("start"), exit or StoppingRule("never"), Holding("const", h)),))

    @classmethod
    def zero(cls) -> "SimpleStrategy":
        return cls(())

    def windows(self, path: DiscretePath) -> list:
        out = []
        for leg in self.legs:
            a, b = leg.window(path)
            out.append((a, b, leg.amount(path, a)))
        return out

    def cell_integrand(self, path: DiscretePath) -> np.ndarray:
        """Predictable integrand value on each cell (t_i, t_{i+1}]."""
        h = np.zeros(max(len(path) - 1, 0))
        for a, b, amt in self.windows(path):
            h[a:b] += amt
        return h

    def to_dict(self) -> dict:
        legs = []
        for l in self.legs:
            if not isinstance(l.holding, Holding):
                raise TypeError("only declarative holdings serialize")
            legs.append(
                {"entry": l.entry.to_dict(), "exit": l.exit.to_dict(), "holding": l.holding.to_dict(), "weight": l.weight}
            )
        return {"legs": legs}

    @classmethod
    def from_dict(cls, d: dict) -> "SimpleStrategy":
        return cls(
            tuple(
                Leg(
                    StoppingRule(**leg["entry"]),
                    StoppingRule(**leg["exit"]),
                    Holding(**leg["holding"]),
                    float(leg.get("weight", 1.0)),
                )
                for leg in d["legs"]
            )
        )


def _telescoped(windows, integrator: np.ndarray) -> np.ndarray:
    n = integrator.size
    i = np.arange(n)
    out = np.zeros(n)
    for a, b, amt in windows:
        out += amt * (integrator[np.minimum(b, i)] - integrator[np.minimum(a, i)])
    return out


def integral_S(H: SimpleStrategy, path: DiscretePath) -> DiscretePath:
    """(H.S)_t = sum_l h_l (S_{tau_{l+1} ^ t} - S_{tau_l ^ t}) on every grid time."""
    return path.with_values(_telescoped(H.windows(path), path.values))


def integral_SS(G: SimpleStrategy, path: DiscretePath, qv_input: QvResult) -> DiscretePath:
    """(G.SS) with the limiting iterated integral as integrator."""
    if not qv_input.in_omega:
        raise NotInOmegaError(f"path outside Omega: {qv_input.reason}")
    return path.with_values(_telescoped(G.windows(path), qv_input.s_limit.values))


@dataclass(frozen=True)
class GeneralizedIntegral:
    total: DiscretePath
    approximations: dict
    gaps: dict


def generalized_integral(
    H: SimpleStrategy, G: SimpleStrategy, path: DiscretePath, qv_input: QvResult
) -> GeneralizedIntegral:
    """(H.S) + (G.SS) together with the dS-integrals of H + G*S^m, one per level."""
    total_vals = integral_S(H, path).values + integral_SS(G, path, qv_input).values
    dx = np.diff(path.values)
    h_cell = H.cell_integrand(path)
    g_cell = G.cell_integrand(path)
    approx, gaps = {}, {}
    for curve in qv_input.s_curves:
        s_m = _left_point_integrand(path, curve.partition)
        vals = compensated_cumsum((h_cell + g_cell * s_m) * dx)
        approx[curve.level] = path.with_values(vals)
        gaps[curve.level] = float(np.max(np.abs(vals - total_vals)))
    return GeneralizedIntegral(path.with_values(total_vals), approx, gaps)


# ---------------------------------------------------------------------------
# transfer to the product space


@dataclass(frozen=True)
class LiftedStrategyPair:
    """Strategies on lifted paths obtained by composing with the price coordinate.

    Off the graph of the lift (qv coordinate not equal to the path's own
    quadratic variation) holdings vanish and stopping times are pushed to T,
    so the integrals there are zero.
    """

    H: SimpleStrategy
    G: SimpleStrategy
    qv_config: QvConfig
    graph_atol: float = 1e-12

    def on_graph(self, lp: LiftedPath) -> bool:
        res = pathwise_qv_quiet(lp.price, self.qv_config)
        # off Omega the quadratic variation is the zero path by convention
        own = res.qv.values if res.in_omega else np.zeros(len(lp.price))
        return bool(np.all(np.abs(own - lp.qv.values) <= self.graph_atol))

    def integral(self, lp: LiftedPath) -> DiscretePath:
        """(Hbar . Sbar) + (Gbar . SSbar) on a lifted path."""
        w = lp.price
        if not self.on_graph(lp):
            return w.with_values(np.zeros(len(w)))
        x = w.values
        ss_bar = (x**2 - x[0] ** 2 - lp.qv.values) / 2.0
        vals = _telescoped(self.H.windows(w), x) + _telescoped(self.G.windows(w), ss_bar)
        return w.with_values(vals)


def pathwise_qv_quiet(path: DiscretePath, cfg: QvConfig) -> QvResult:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LevelWarning)
        return pathwise_qv(path, cfg.m_min, cfg.m_max, cfg.tol)


def transfer_strategy_up(H: SimpleStrategy, G: SimpleStrategy, qv_config: QvConfig = QvConfig()) -> LiftedStrategyPair:
    return LiftedStrategyPair(H, G, qv_config)


def transfer_strategy_down(pair: LiftedStrategyPair) -> Callable[[DiscretePath], DiscretePath]:
    """Integral map w -> (Hbar.Sbar + Gbar.SSbar)(psi(w)) on the original space."""

    def integral(path: DiscretePath) -> DiscretePath:
        res = pathwise_qv_quiet(path, pair.qv_config)
        qv = res.qv if res.in_omega else path.with_values(np.zeros(len(path)))
        return pair.integral(LiftedPath(path, qv))

    return integral


def lift_path(path: DiscretePath, cfg: QvConfig = QvConfig()) -> tuple[LiftedPath, QvResult]:
    """psi(w) = (w, <w>), with the zero path as qv off Omega."""
    res = pathwise_qv_quiet(path, cfg)
    qv = res.qv if res.in_omega else path.with_values(np.zeros(len(path)))
    return LiftedPath(path, qv), res
