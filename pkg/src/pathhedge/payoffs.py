"""Claims evaluated on lifted paths.

Terminal-only claims also expose a vectorized ``terminal(s_T, s0)`` so that
recombining trees can be valued node by node.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .path_core import LiftedPath
from .prediction_sets import DEFAULT_TOL, contains, spec_from_json, spec_to_json


class Payoff:
    terminal_only: bool = False
    needs_qv: bool = False

    def __call__(self, lp: LiftedPath) -> float:
        w = lp.price.values
        return float(self.terminal(np.asarray([w[-1]]), float(w[0]))[0])

    def terminal(self, s_T: np.ndarray, s0: float) -> np.ndarray:
        raise TypeError(f"{type(self).__name__} is path dependent")

    def to_json(self) -> dict:
        raise TypeError(f"{type(self).__name__} does not serialize")


@dataclass(frozen=True)
class EuropeanCall(Payoff):
    K: float
    terminal_only = True

    def terminal(self, s_T, s0):
        return np.maximum(np.asarray(s_T, float) - self.K, 0.0)

    def to_json(self):
        return {"type": "EuropeanCall", "K": self.K}


@dataclass(frozen=True)
class EuropeanPut(Payoff):
    K: float
    terminal_only = True

    def terminal(self, s_T, s0):
        return np.maximum(self.K - np.asarray(s_T, float), 0.0)

    def to_json(self):
        return {"type": "EuropeanPut", "K": self.K}


@dataclass(frozen=True)
class Digital(Payoff):
    K: float
    terminal_only = True

    def terminal(self, s_T, s0):
        return (np.asarray(s_T, float) >= self.K).astype(float)

    def to_json(self):
        return {"type": "Digital", "K": self.K}


@dataclass(frozen=True)
class IndicatorOfSet(Payoff):
    """M on lifts inside the set (outside it when ``negate``), else 0."""

    spec: object
    M: float
    negate: bool = False
    tol: float = DEFAULT_TOL
    needs_qv = True

    def __call__(self, lp):
        inside = contains(self.spec, lp, self.tol).member
        return float(self.M) if inside != self.negate else 0.0

    def to_json(self):
        return {"type": "IndicatorOfSet", "spec": spec_to_json(self.spec), "M": self.M,
                "negate": self.negate, "tol": self.tol}


# name -> (function, terminal_only); terminal functions take (s_T, s0, **params)
PAYOFF_REGISTRY: dict[str, tuple[Callable, bool]] = {}


def register_payoff(name: str, terminal: bool = False):
    def deco(fn):
        PAYOFF_REGISTRY[name] = (fn, terminal)
        return fn

    return deco


@register_payoff("constant", terminal=True)
def _constant(s_T, s0, c=0.0):
    return np.full(np.shape(s_T), float(c))


@register_payoff("abs_move", terminal=True)
def _abs_move(s_T, s0):
    return np.abs(np.asarray(s_T, float) - s0)


@register_payoff("neg_abs_move", terminal=True)
def _neg_abs_move(s_T, s0):
    return -np.abs(np.asarray(s_T, float) - s0)


@register_payoff("affine", terminal=True)
def _affine(s_T, s0, a=0.0, b=1.0):
    return a + b * (np.asarray(s_T, float) - s0)


@register_payoff("nonzero_indicator")
def _nonzero_indicator(lp, M=np.inf, atol=1e-12):
    return float(M) if np.max(np.abs(lp.price.values)) > atol else 0.0


@register_payoff("running_max")
def _running_max(lp):
    return float(np.max(lp.price.values))


@register_payoff("lookback_call")
def _lookback_call(lp, K=1.0):
    return max(float(np.max(lp.price.values)) - K, 0.0)


@dataclass(frozen=True)
class CustomPathFunctional(Payoff):
    name: str
    params: tuple = ()

    def __post_init__(self):
        if self.name not in PAYOFF_REGISTRY:
            raise ValueError(f"unregistered payoff {self.name!r}")
        if isinstance(self.params, dict):
            object.__setattr__(self, "params", tuple(sorted(self.params.items())))

    @property
    def terminal_only(self):
        return PAYOFF_REGISTRY[self.name][1]

    def __call__(self, lp):
        fn, term = PAYOFF_REGISTRY[self.name]
        if term:
            return super().__call__(lp)
        return float(fn(lp, **dict(self.params)))

    def terminal(self, s_T, s0):
        fn, term = PAYOFF_REGISTRY[self.name]
        if not term:
            return super().terminal(s_T, s0)
        return np.asarray(fn(np.asarray(s_T, float), s0, **dict(self.params)), float)

    def to_json(self):
        return {"type": "CustomPathFunctional", "name": self.name, "params": dict(self.params)}


@dataclass(frozen=True)
class FunctionPayoff(Payoff):
    """Wraps a plain Python callable on lifted paths (not serializable)."""

    fn: Callable = field(compare=False)
    needs_qv: bool = False
    terminal_only = False

    def __call__(self, lp):
        return float(self.fn(lp))


@dataclass(frozen=True)
class Affine(Payoff):
    """a * base + b."""

    base: Payoff
    a: float = 1.0
    b: float = 0.0

    @property
    def terminal_only(self):
        return self.base.terminal_only

    @property
    def needs_qv(self):
        return self.base.needs_qv

    def __call__(self, lp):
        return self.a * self.base(lp) + self.b

    def terminal(self, s_T, s0):
        return self.a * self.base.terminal(s_T, s0) + self.b

    def to_json(self):
        return {"type": "Affine", "base": self.base.to_json(), "a": self.a, "b": self.b}


def payoff_from_json(d: dict) -> Payoff:
    d = dict(d)
    kind = d.pop("type")
    if kind == "EuropeanCall":
        return EuropeanCall(float(d["K"]))
    if kind == "EuropeanPut":
        return EuropeanPut(float(d["K"]))
    if kind == "Digital":
        return Digital(float(d["K"]))
    if kind == "IndicatorOfSet":
        return IndicatorOfSet(spec_from_json(d["spec"]), float(d["M"]), bool(d.get("negate", False)),
                              float(d.get("tol", DEFAULT_TOL)))
    if kind == "CustomPathFunctional":
        return CustomPathFunctional(d["name"], tuple(sorted(d.get("params", {}).items())))
    if kind == "Affine":
        return Affine(payoff_from_json(d["base"]), float(d.get("a", 1.0)), float(d.get("b", 0.0)))
    raise ValueError(f"unknown payoff type {kind!r}")
