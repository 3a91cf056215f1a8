"""Seeded path models used by the experiments."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .path_core import TimeGrid


class UnknownModel(KeyError):
    pass


@dataclass(frozen=True)
class BrownianModel:
    sigma: float = 0.2
    n_points: int = 2**14 + 1
    T: float = 1.0
    s0: float = 0.0

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid.uniform(self.T, self.n_points)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        dt = self.T / (self.n_points - 1)
        z = rng.standard_normal((n, self.n_points - 1))
        out = np.empty((n, self.n_points))
        out[:, 0] = self.s0
        np.cumsum(self.sigma * np.sqrt(dt) * z, axis=1, out=out[:, 1:])
        out[:, 1:] += self.s0
        return out


@dataclass(frozen=True)
class GBMModel:
    """Driftless geometric Brownian motion, exact lognormal steps."""

    sigma: float = 0.2
    n_points: int = 2**14 + 1
    T: float = 1.0
    s0: float = 1.0

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid.uniform(self.T, self.n_points)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        t = self.grid.points
        dt = self.T / (self.n_points - 1)
        w = np.concatenate([np.zeros((n, 1)), np.cumsum(np.sqrt(dt) * rng.standard_normal((n, self.n_points - 1)), axis=1)], axis=1)
        return self.s0 * np.exp(self.sigma * w - 0.5 * self.sigma**2 * t)


_SMOOTH = {
    "linear": lambda t, T: t / T,
    "square": lambda t, T: (t / T) ** 2,
    "sine": lambda t, T: np.sin(2 * np.pi * t / T),
}


@dataclass(frozen=True)
class SmoothModel:
    kind: str = "linear"
    n_points: int = 2**14 + 1
    T: float = 1.0

    def __post_init__(self):
        if self.kind not in _SMOOTH:
            raise UnknownModel(f"smooth kind must be one of {sorted(_SMOOTH)}")

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid.uniform(self.T, self.n_points)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return np.tile(_SMOOTH[self.kind](self.grid.points, self.T), (n, 1))


@dataclass(frozen=True)
class ZeroModel:
    n_points: int = 65
    T: float = 1.0
    s0: float = 0.0

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid.uniform(self.T, self.n_points)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return np.full((n, self.n_points), self.s0)


@dataclass(frozen=True)
class BandModel:
    """Martingale whose volatility switches inside [sigma_lo, sigma_hi]:
    sigma_lo above the start level, sigma_hi at or below it."""

    sigma_lo: float
    sigma_hi: float
    n_points: int = 257
    T: float = 1.0
    s0: float = 0.0

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid.uniform(self.T, self.n_points)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        dt = self.T / (self.n_points - 1)
        out = np.empty((n, self.n_points))
        out[:, 0] = self.s0
        for k in range(self.n_points - 1):
            vol = np.where(out[:, k] > self.s0, self.sigma_lo, self.sigma_hi)
            out[:, k + 1] = out[:, k] + vol * np.sqrt(dt) * rng.standard_normal(n)
        return out


MODEL_REGISTRY = {
    "brownian": BrownianModel,
    "gbm": GBMModel,
    "smooth": SmoothModel,
    "zero": ZeroModel,
    "band": BandModel,
}


def make_model(name: str, **params):
    try:
        cls = MODEL_REGISTRY[name]
    except KeyError:
        raise UnknownModel(f"unknown model {name!r}; known: {sorted(MODEL_REGISTRY)}") from None
    return cls(**params)
