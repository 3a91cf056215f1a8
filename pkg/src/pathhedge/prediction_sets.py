"""Prediction sets on lifted paths (price, qv): membership, stopping closure, growth.

Each variant is a frozen dataclass.  Membership is decided on the grid with an
explicit tolerance and returns a report listing every violated condition with
its worst location and margin (the amount by which it fails beyond the slack).

Density bands are checked in integrated form: for all grid times s < t,

    int_s^t lo(r) dr - slack  <=  nu(t) - nu(s)  <=  int_s^t hi(r) dr + slack,

which for piecewise-linear nu is the cell-wise density band when slack = 0,
and stays meaningful for Karandikar qv curves that oscillate inside a cell.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Union

import numpy as np

from .path_core import (
    DiscretePath,
    LiftedPath,
    holder_norm,
    holder_seminorm,
    stop_lifted,
    sup_norm,
)
from .pathwise_calculus import QvConfig, lift_path

DEFAULT_TOL = 1e-6

VolFn = Callable[[float, LiftedPath], float]
VOL_REGISTRY: dict[str, VolFn] = {}


def register_vol(name: str):
    def deco(fn: VolFn) -> VolFn:
        VOL_REGISTRY[name] = fn
        return fn

    return deco


@register_vol("tanh_price")
def _tanh_price(t: float, prefix: LiftedPath) -> float:
    return 0.2 + 0.1 * float(np.tanh(prefix.price.values[-1]))


@register_vol("qv_damped")
def _qv_damped(t: float, prefix: LiftedPath) -> float:
    return 0.3 / (1.0 + float(prefix.qv.values[-1]))


Vol = Union[float, str]


def _vol_values(sigma: Vol, lp: LiftedPath) -> np.ndarray:
    """sigma on each cell, evaluated at the cell's left end on the stopped prefix."""
    n_cells = len(lp.grid) - 1
    if not isinstance(sigma, str):
        return np.full(n_cells, float(sigma))
    fn = VOL_REGISTRY[sigma]
    pts = lp.grid.points
    return np.array([fn(float(pts[i]), stop_lifted(lp, float(pts[i]))) for i in range(n_cells)])


def _vol_bound(sigma: Vol) -> float:
    return float(sigma) if not isinstance(sigma, str) else np.nan


class ContractError(ValueError):
    """A documented precondition does not hold."""


@dataclass(frozen=True)
class Violation:
    name: str
    t: float
    margin: float


@dataclass
class MembershipReport:
    member: bool
    violated_conditions: list = field(default_factory=list)
    tolerances: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "member": self.member,
            "violated_conditions": [
                {"name": v.name, "t": float(v.t), "margin": float(v.margin)} for v in self.violated_conditions
            ],
            "tolerances": {k: float(v) for k, v in self.tolerances.items()},
        }


# ---------------------------------------------------------------------------
# variants


@dataclass(frozen=True)
class GExpectation:
    sigma_lo: Vol
    sigma_hi: Vol
    holder_alpha: float | None = None
    holder_bound: float | None = None
    s0: float | None = None

    def __post_init__(self):
        lo, hi = _vol_bound(self.sigma_lo), _vol_bound(self.sigma_hi)
        if not np.isnan(lo) and not np.isnan(hi) and not (0 <= lo <= hi):
            raise ValueError(f"need 0 <= sigma_lo <= sigma_hi, got {lo}, {hi}")
        if self.holder_bound is not None and self.holder_bound <= 0:
            raise ValueError("holder_bound must be positive")


@dataclass(frozen=True)
class BlackScholesUncertain:
    sigma_lo: Vol
    sigma_hi: Vol
    s0: float = 1.0

    def __post_init__(self):
        lo, hi = _vol_bound(self.sigma_lo), _vol_bound(self.sigma_hi)
        if not np.isnan(lo) and not np.isnan(hi) and not (0 <= lo <= hi):
            raise ValueError(f"need 0 <= sigma_lo <= sigma_hi, got {lo}, {hi}")


@dataclass(frozen=True)
class AvgFluctuation:
    c: float

    def __post_init__(self):
        if self.c <= 0:
            raise ValueError("c must be positive")


@dataclass(frozen=True)
class DualityGap:
    pass


@dataclass(frozen=True)
class HolderBall:
    alpha: float
    bound: float
    pairs: str = "all"

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must be in (0, 1]")
        if self.bound <= 0:
            raise ValueError("bound must be positive")


@dataclass(frozen=True)
class Intersection:
    parts: tuple

    def __post_init__(self):
        object.__setattr__(self, "parts", tuple(self.parts))


PredictionSetSpec = Union[GExpectation, BlackScholesUncertain, AvgFluctuation, DualityGap, HolderBall, Intersection]

_VARIANTS = {
    cls.__name__: cls
    for cls in (GExpectation, BlackScholesUncertain, AvgFluctuation, DualityGap, HolderBall, Intersection)
}


def spec_to_json(spec: PredictionSetSpec) -> dict:
    if isinstance(spec, Intersection):
        return {"variant": "Intersection", "parts": [spec_to_json(p) for p in spec.parts]}
    d = {"variant": type(spec).__name__}
    d.update({k: v for k, v in spec.__dict__.items()})
    return d


def spec_from_json(d: dict) -> PredictionSetSpec:
    d = dict(d)
    name = d.pop("variant")
    if name not in _VARIANTS:
        raise ValueError(f"unknown prediction-set variant {name!r}")
    if name == "Intersection":
        return Intersection(tuple(spec_from_json(p) for p in d["parts"]))
    for key in ("sigma_lo", "sigma_hi"):
        if isinstance(d.get(key), str) and d[key] not in VOL_REGISTRY:
            raise ValueError(f"unregistered vol function {d[key]!r}")
    return _VARIANTS[name](**d)


def load_spec(file) -> PredictionSetSpec:
    return spec_from_json(json.loads(Path(file).read_text()))


def is_stop_closed(spec: PredictionSetSpec) -> bool:
    """Whether the variant is closed under stopping by construction.

    Bands with a positive lower volatility are not: a stopped path has zero
    qv density after the stopping time.
    """
    if isinstance(spec, Intersection):
        return all(is_stop_closed(p) for p in spec.parts)
    if isinstance(spec, (GExpectation, BlackScholesUncertain)):
        return not isinstance(spec.sigma_lo, str) and float(spec.sigma_lo) == 0.0
    return True


# ---------------------------------------------------------------------------
# membership


def _worst(name: str, excess: np.ndarray, times: np.ndarray, out: list) -> None:
    if excess.size and np.max(excess) > 0:
        i = int(np.argmax(excess))
        out.append(Violation(name, float(times[i]), float(excess[i])))


def _check_a2(lp: LiftedPath, tol: float, out: list) -> None:
    nu = lp.qv.values
    t = lp.grid.points
    _worst("qv_starts_at_zero", np.array([abs(nu[0]) - tol]), t[:1], out)
    drawdown = np.maximum.accumulate(nu) - nu
    _worst("qv_nondecreasing", drawdown - tol, t, out)


def _check_band(name: str, nu: np.ndarray, lo_cells: np.ndarray, hi_cells: np.ndarray,
                dt: np.ndarray, t: np.ndarray, slack: float, out: list) -> None:
    lo_cum = np.concatenate([[0.0], np.cumsum(lo_cells * dt)])
    hi_cum = np.concatenate([[0.0], np.cumsum(hi_cells * dt)])
    f = nu - hi_cum
    _worst(f"{name}_upper", f - np.minimum.accumulate(f) - slack, t, out)
    g = nu - lo_cum
    _worst(f"{name}_lower", np.maximum.accumulate(g) - g - slack, t, out)


def _cell_square_range(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a, b = x[:-1], x[1:]
    lo = np.minimum(a * a, b * b)
    lo = np.where(a * b < 0, 0.0, lo)
    hi = np.maximum(a * a, b * b)
    return lo, hi


def _contains(spec, lp: LiftedPath, tol: float, out: list, tols: dict) -> None:
    w = lp.price.values
    t = lp.grid.points
    dt = np.diff(t)
    if isinstance(spec, Intersection):
        for part in spec.parts:
            _contains(part, lp, tol, out, tols)
        return
    if isinstance(spec, GExpectation):
        lo = _vol_values(spec.sigma_lo, lp)
        hi = _vol_values(spec.sigma_hi, lp)
        slack = tol * (1.0 + (float(np.max(hi)) ** 2 if hi.size else 0.0))
        tols["density_band"] = slack
        _check_band("density_band", lp.qv.values, lo**2, hi**2, dt, t, slack, out)
        if spec.s0 is not None:
            _worst("initial_price", np.array([abs(w[0] - spec.s0) - tol]), t[:1], out)
        if spec.holder_bound is not None:
            alpha = spec.holder_alpha if spec.holder_alpha is not None else 0.5
            val = holder_norm(lp.price, alpha).value
            _worst("holder_bound", np.array([val - spec.holder_bound - tol]), t[-1:], out)
    elif isinstance(spec, BlackScholesUncertain):
        lo = _vol_values(spec.sigma_lo, lp)
        hi = _vol_values(spec.sigma_hi, lp)
        sq_lo, sq_hi = _cell_square_range(w)
        slack = tol * (1.0 + (float(np.max(hi)) ** 2 if hi.size else 0.0))
        tols["bs_band"] = slack
        _check_band("bs_band", lp.qv.values, lo**2 * sq_lo, hi**2 * sq_hi, dt, t, slack, out)
        _worst("initial_price", np.array([abs(w[0] - spec.s0) - tol]), t[:1], out)
    elif isinstance(spec, AvgFluctuation):
        _worst("initial_price", np.array([abs(w[0] - 1.0) - tol]), t[:1], out)
        _worst("nonnegative", -w - tol, t, out)
        T = t[-1]
        interior = (t > 0) & (t < T)
        if np.any(interior):
            suf_max = np.maximum.accumulate(w[::-1])[::-1]
            suf_min = np.minimum.accumulate(w[::-1])[::-1]
            ti = t[interior]
            lhs = (suf_max[interior] - suf_min[interior]) / (T - ti)
            rhs = spec.c * lp.qv.values[interior] / ti
            _worst("avg_fluctuation", lhs - rhs - tol, ti, out)
        tols["avg_fluctuation"] = tol
    elif isinstance(spec, DualityGap):
        _worst("initial_price", np.array([abs(w[0]) - tol]), t[:1], out)
        _worst("range_lower", -w - tol, t, out)
        _worst("range_upper", w - 1.0 - tol, t, out)
    elif isinstance(spec, HolderBall):
        val = holder_norm(lp.price, spec.alpha, pairs=spec.pairs).value
        _worst("holder_bound", np.array([val - spec.bound - tol]), t[-1:], out)
    else:
        raise TypeError(f"not a prediction-set spec: {spec!r}")


def contains(spec: PredictionSetSpec, lp: LiftedPath, tol: float = DEFAULT_TOL) -> MembershipReport:
    if tol <= 0:
        raise ValueError("tol must be positive")
    out: list = []
    tols = {"A2": tol, "default": tol}
    _check_a2(lp, tol, out)
    _contains(spec, lp, tol, out, tols)
    return MembershipReport(member=not out, violated_conditions=out, tolerances=tols)


def stop_closure_failures(spec: PredictionSetSpec, lp: LiftedPath, tol: float = DEFAULT_TOL) -> list:
    """Grid times t at which the stopped lift leaves the set."""
    if not contains(spec, lp, tol).member:
        raise ContractError("stop_closure_check needs a member of the set")
    return [
        float(t) for t in lp.grid.points if not contains(spec, stop_lifted(lp, float(t)), tol).member
    ]


def stop_closure_check(spec: PredictionSetSpec, lp: LiftedPath, tol: float = DEFAULT_TOL) -> bool:
    """True iff the lift stopped at every grid time is still a member."""
    return not stop_closure_failures(spec, lp, tol)


def build_qv_and_check(spec: PredictionSetSpec, path: DiscretePath, qv_cfg: QvConfig = QvConfig(),
                       tol: float | None = None) -> tuple[LiftedPath, MembershipReport]:
    """Lift the path by its pathwise qv and test the lift."""
    lp, res = lift_path(path, qv_cfg)
    tol = qv_cfg.tol if tol is None else tol
    report = contains(spec, lp, tol)
    if not res.in_omega:
        gap = res.gaps[-1] if res.gaps else np.inf
        report.violated_conditions.insert(0, Violation("omega", float(path.T), float(gap)))
        report.member = False
    return lp, report


# ---------------------------------------------------------------------------
# growth function


@dataclass(frozen=True)
class GrowthValue:
    value: float
    level: float
    diagnostic: str = ""


@dataclass(frozen=True)
class GrowthFunction:
    """Z(w, nu) = Y(w, nu) + |w|_inf + |nu|_inf on the set, +inf off it.

    Y is the least integer n >= 1/alpha with |w|_a + |nu|_a <= a_{n+1}, using
    Hoelder seminorms and the tabulated thresholds a_1, a_2, ...
    """

    thresholds: tuple
    base_spec: PredictionSetSpec
    alpha: float = 0.2
    pairs: str = "all"
    tol: float = DEFAULT_TOL

    def __post_init__(self):
        a = np.asarray(self.thresholds, dtype=float)
        if a.size < 2 or np.any(np.diff(a) <= 0):
            raise ValueError("thresholds must be strictly increasing with at least two entries")
        if not 0 < self.alpha <= 0.25:
            raise ValueError("alpha must be in (0, 1/4]")
        object.__setattr__(self, "thresholds", tuple(float(x) for x in a))

    @classmethod
    def linear(cls, base_spec, scale: float, n_max: int = 200, alpha: float = 0.2, **kw) -> "GrowthFunction":
        return cls(tuple(scale * n for n in range(1, n_max + 1)), base_spec, alpha, **kw)

    def holder_sum(self, lp: LiftedPath) -> float:
        return holder_seminorm(lp.price, self.alpha, self.pairs) + holder_seminorm(lp.qv, self.alpha, self.pairs)


def growth_value(g: GrowthFunction, lp: LiftedPath) -> GrowthValue:
    if not contains(g.base_spec, lp, g.tol).member:
        return GrowthValue(np.inf, np.inf, "outside prediction set")
    h = g.holder_sum(lp)
    a = g.thresholds  # a[k] is a_{k+1}
    n0 = int(np.ceil(1.0 / g.alpha - 1e-12))
    for n in range(n0, len(a)):
        if h <= a[n]:
            return GrowthValue(float(n) + sup_norm(lp.price) + sup_norm(lp.qv), float(n))
    return GrowthValue(np.inf, np.inf, "tabulation exhausted")


def calibrate_thresholds(lifted: list, alpha: float = 0.2, n_max: int = 200, pairs: str = "all") -> tuple:
    """a_n = n * A with a_1 just above the median Hoelder sum of the calibration lifts."""
    sums = [holder_seminorm(lp.price, alpha, pairs) + holder_seminorm(lp.qv, alpha, pairs) for lp in lifted]
    med = float(np.median(sums)) if sums else 0.0
    A = 1.01 * med if med > 0 else 1.0
    return tuple(A * n for n in range(1, n_max + 1))
