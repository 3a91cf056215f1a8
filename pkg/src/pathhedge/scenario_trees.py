"""Finite scenario trees, martingale transition measures and path projection.

A tree stores price geometry only.  Nodes on a level are ordered by price and
children of a node are ordered by price, so a path is the tuple of local child
positions taken at each level.  Conditional variances (and hence the qv
coordinate of a projected path) come from a ``TreeMeasure``.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .path_core import DiscretePath, LiftedPath, TimeGrid

MARTINGALE_TOL = 1e-12
MAX_ENUMERATION = 10**6


class TreeConstructionError(ValueError):
    """Requested band cannot be carried by the tree geometry."""


class InvalidPathIndex(IndexError):
    pass


@dataclass(frozen=True, eq=False)
class ScenarioTree:
    prices: tuple            # level n -> array of node prices (ascending)
    children: tuple          # level n < N -> int array (n_nodes, k) into level n + 1
    T: float
    multiplicative: bool = False
    recombining: bool = True
    band: tuple | None = None  # (sigma_lo, sigma_hi) the geometry was sized for

    def __post_init__(self):
        if len(self.children) != len(self.prices) - 1:
            raise TreeConstructionError("need one children table per non-terminal level")
        for n, ch in enumerate(self.children):
            if ch.shape[0] != self.prices[n].size:
                raise TreeConstructionError(f"level {n}: children table does not match nodes")
            incs = self.prices[n + 1][ch] - self.prices[n][:, None]
            if ch.shape[1] > 1 and np.any(np.diff(incs, axis=1) <= 0):
                raise TreeConstructionError(f"level {n}: child increments must be distinct and ascending")
        if self.multiplicative and any(np.any(p <= 0) for p in self.prices):
            raise TreeConstructionError("multiplicative tree with non-positive price")

    @property
    def depth(self) -> int:
        return len(self.children)

    @property
    def dt(self) -> float:
        return self.T / self.depth

    @property
    def s0(self) -> float:
        return float(self.prices[0][0])

    @property
    def branching(self) -> int:
        return int(self.children[0].shape[1])

    def increments(self, n: int) -> np.ndarray:
        return self.prices[n + 1][self.children[n]] - self.prices[n][:, None]

    def n_nodes_with_children(self) -> int:
        return sum(p.size for p in self.prices[:-1])

    def n_paths(self) -> int:
        return self.branching ** self.depth

    def grid(self) -> TimeGrid:
        return TimeGrid(np.linspace(0.0, self.T, self.depth + 1))

    def feasible_variance(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Range of conditional variances of martingale transitions at level n."""
        inc = self.increments(n)
        a, b = -inc[:, 0], inc[:, -1]
        top = a * b
        if inc.shape[1] == 3:
            return np.zeros_like(top), top
        return top.copy(), top

    def node_sequence(self, idx: Sequence[int]) -> list:
        if len(idx) != self.depth:
            raise InvalidPathIndex(f"path index has length {len(idx)}, tree depth is {self.depth}")
        nodes = [0]
        for n, c in enumerate(idx):
            if not 0 <= c < self.children[n].shape[1]:
                raise InvalidPathIndex(f"child choice {c} invalid at level {n}")
            nodes.append(int(self.children[n][nodes[-1], c]))
        return nodes

    def path_prices(self, idx: Sequence[int]) -> np.ndarray:
        nodes = self.node_sequence(idx)
        return np.array([self.prices[n][j] for n, j in enumerate(nodes)])

    def paths(self, limit: int = MAX_ENUMERATION) -> Iterator[tuple]:
        if self.n_paths() > limit:
            raise ValueError(f"tree has {self.n_paths()} paths, above the enumeration limit {limit}")
        return itertools.product(range(self.branching), repeat=self.depth)

    def path_node_matrix(self, limit: int = MAX_ENUMERATION) -> np.ndarray:
        """All root-to-leaf node sequences, one row per path in lexicographic order."""
        if self.n_paths() > limit:
            raise ValueError(f"tree has {self.n_paths()} paths, above the enumeration limit {limit}")
        k = self.branching
        rows = np.zeros((1, 1), dtype=np.int64)
        for n in range(self.depth):
            nxt = self.children[n][rows[:, -1]]  # (P, k)
            rows = np.concatenate([np.repeat(rows, k, axis=0), nxt.reshape(-1, 1)], axis=1)
        return rows

    def unroll(self, depth_cap: int = 12) -> "ScenarioTree":
        """Non-recombining copy: one node per history."""
        if not self.recombining:
            return self
        if self.depth > depth_cap:
            raise ValueError(f"unrolling depth {self.depth} exceeds cap {depth_cap}")
        k = self.branching
        prices = [self.prices[0].copy()]
        children = []
        orig = np.zeros(1, dtype=np.int64)
        for n in range(self.depth):
            nxt = self.children[n][orig].reshape(-1)
            children.append(np.arange(nxt.size, dtype=np.int64).reshape(-1, k))
            prices.append(self.prices[n + 1][nxt])
            orig = nxt
        # unrolled levels are ordered by history, not by price
        return ScenarioTree(tuple(prices), tuple(children), self.T, self.multiplicative, False, self.band)

    def to_json(self) -> dict:
        return {
            "T": self.T,
            "depth": self.depth,
            "multiplicative": self.multiplicative,
            "recombining": self.recombining,
            "band": list(self.band) if self.band is not None else None,
            "levels": [
                {"prices": self.prices[n].tolist(),
                 "children": self.children[n].tolist() if n < self.depth else []}
                for n in range(self.depth + 1)
            ],
        }


# ---------------------------------------------------------------------------
# measures


def node_probabilities(inc: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Martingale transition probabilities with conditional variance q.

    Closed form for children (-a, 0, b): p_up = q/(b(a+b)), p_down = q/(a(a+b)).
    Binomial nodes (-a, b) ignore q (their variance is ab).
    """
    if inc.shape[1] not in (2, 3):
        raise ValueError("variance-indexed transitions need 2 or 3 children; use explicit probabilities")
    a, b = -inc[:, 0], inc[:, -1]
    if inc.shape[1] == 2:
        p_up = a / (a + b)
        return np.stack([1.0 - p_up, p_up], axis=1)
    q = np.asarray(q, float)
    p_up = q / (b * (a + b))
    p_dn = q / (a * (a + b))
    return np.stack([p_dn, 1.0 - p_up - p_dn, p_up], axis=1)


@dataclass(frozen=True, eq=False)
class TreeMeasure:
    tree: ScenarioTree
    probs: tuple   # level n -> (n_nodes, k)
    var: tuple     # level n -> (n_nodes,)

    def __post_init__(self):
        for n, (p, v) in enumerate(zip(self.probs, self.var)):
            if np.any(p < -1e-15) or np.any(p > 1 + 1e-15):
                raise ValueError(f"level {n}: probabilities outside [0, 1]")
            if np.max(np.abs(p.sum(axis=1) - 1.0)) > 1e-12:
                raise ValueError(f"level {n}: probabilities do not sum to one")

    @classmethod
    def from_variances(cls, tree: ScenarioTree, var: Sequence[np.ndarray]) -> "TreeMeasure":
        probs, out_var = [], []
        for n in range(tree.depth):
            inc = tree.increments(n)
            lo, hi = tree.feasible_variance(n)
            q = np.clip(np.asarray(var[n], float), lo, hi)
            p = np.clip(node_probabilities(inc, q), 0.0, 1.0)
            probs.append(p)
            out_var.append((p * inc**2).sum(axis=1))
        return cls(tree, tuple(probs), tuple(out_var))

    @classmethod
    def lazy(cls, tree: ScenarioTree) -> "TreeMeasure":
        return cls.from_variances(tree, [np.zeros(p.size) for p in tree.prices[:-1]])

    def martingale_defect(self) -> float:
        return max(
            float(np.max(np.abs((p * self.tree.increments(n)).sum(axis=1))))
            for n, p in enumerate(self.probs)
        )

    def path_probability(self, idx: Sequence[int]) -> float:
        nodes = self.tree.node_sequence(idx)
        pr = 1.0
        for n, c in enumerate(idx):
            pr *= float(self.probs[n][nodes[n], c])
        return pr

    def path_probabilities(self, node_matrix: np.ndarray) -> np.ndarray:
        """Probabilities of the rows of ``ScenarioTree.path_node_matrix``."""
        P = node_matrix.shape[0]
        k = self.tree.branching
        out = np.ones(P)
        for n in range(self.tree.depth):
            # the child position taken at level n is the digit n of the row index in base k
            digits = (np.arange(P) // (k ** (self.tree.depth - 1 - n))) % k
            out *= self.probs[n][node_matrix[:, n], digits]
        return out

    def terminal_distribution(self) -> np.ndarray:
        """Probability of each terminal node, by forward propagation."""
        mass = np.ones(1)
        for n in range(self.tree.depth):
            nxt = np.zeros(self.tree.prices[n + 1].size)
            np.add.at(nxt, self.tree.children[n].reshape(-1), (mass[:, None] * self.probs[n]).reshape(-1))
            mass = nxt
        return mass

    def to_json(self) -> dict:
        return {
            "probs": [p.tolist() for p in self.probs],
            "var": [v.tolist() for v in self.var],
        }


def band_variances(tree: ScenarioTree, sigma_lo: float | None, sigma_hi: float | None, rtol: float = 1e-9):
    """Per-node conditional-variance interval induced by a volatility band.

    ``None`` for an end uses the tree's feasible extreme there.  Variances scale
    with dt (additive) or dt * s^2 (multiplicative).
    """
    out = []
    for n in range(tree.depth):
        f_lo, f_hi = tree.feasible_variance(n)
        scale = tree.dt * (tree.prices[n] ** 2 if tree.multiplicative else 1.0)
        lo = f_lo.copy() if sigma_lo is None else sigma_lo**2 * scale * np.ones_like(f_lo)
        hi = f_hi.copy() if sigma_hi is None else sigma_hi**2 * scale * np.ones_like(f_hi)
        if np.any(hi > f_hi * (1 + rtol) + 1e-300) or np.any(lo < f_lo * (1 - rtol) - 1e-300) or np.any(lo > hi * (1 + rtol)):
            raise TreeConstructionError(
                f"level {n}: band variances [{lo.min():.6g}, {hi.max():.6g}] not inside the feasible "
                f"interval [{f_lo.min():.6g}, {f_hi.min():.6g}] (per unit scale: "
                f"sigma^2 in [{(f_lo / scale).max():.6g}, {(f_hi / scale).min():.6g}])"
            )
        out.append((np.clip(lo, f_lo, f_hi), np.clip(hi, f_lo, f_hi)))
    return out


def _multiplicative_factor(x: float) -> float:
    # u with (u - 1)(1 - 1/u) = x, so the widest martingale variance is x * s^2
    return 1.0 + x / 2.0 + np.sqrt(x + x * x / 4.0)


def build_trinomial(s0: float, sigma_lo: float, sigma_hi: float, N: int, T: float = 1.0,
                    multiplicative: bool = False, u: float | None = None) -> ScenarioTree:
    """Recombining trinomial tree whose widest martingale step variance is sigma_hi^2 dt.

    Additive: increments (-u, 0, u) with default u = sigma_hi sqrt(dt).
    Multiplicative: factors (1/u, 1, u) with default u solving
    (u - 1)(1 - 1/u) = sigma_hi^2 dt, so node variance tops out at sigma_hi^2 dt s^2.
    """
    if not 0 <= sigma_lo <= sigma_hi:
        raise TreeConstructionError(f"need 0 <= sigma_lo <= sigma_hi, got {sigma_lo}, {sigma_hi}")
    if N < 1:
        raise TreeConstructionError("N must be >= 1")
    dt = T / N
    if u is None:
        x = sigma_hi**2 * dt if sigma_hi > 0 else dt
        u = _multiplicative_factor(x) if multiplicative else np.sqrt(x)
    if multiplicative and u <= 1:
        raise TreeConstructionError("multiplicative factor u must exceed 1")
    if not multiplicative and u <= 0:
        raise TreeConstructionError("additive step u must be positive")
    prices, children = [], []
    for n in range(N + 1):
        j = np.arange(-n, n + 1)
        prices.append(s0 * u ** j.astype(float) if multiplicative else s0 + u * j)
        if n < N:
            base = np.arange(2 * n + 1)
            children.append(np.stack([base, base + 1, base + 2], axis=1))
    tree = ScenarioTree(tuple(prices), tuple(children), T, multiplicative, True, (sigma_lo, sigma_hi))
    band_variances(tree, sigma_lo, sigma_hi)  # raises with the feasible band if unachievable
    return tree


def build_binomial(s0: float, up: float, down: float, N: int, T: float = 1.0) -> ScenarioTree:
    """Recombining multiplicative binomial tree with factors (down, up)."""
    if not 0 < down < 1 < up:
        raise TreeConstructionError("need 0 < down < 1 < up")
    prices, children = [], []
    for n in range(N + 1):
        k = np.arange(n + 1)
        prices.append(s0 * down ** (n - k).astype(float) * up ** k.astype(float))
        if n < N:
            children.append(np.stack([k, k + 1], axis=1))
    return ScenarioTree(tuple(prices), tuple(children), T, True, True, None)


def build_tree(s0: float, increments: Sequence[float], N: int, T: float = 1.0) -> ScenarioTree:
    """Additive non-recombining tree with the same increment set at every node."""
    inc = np.sort(np.asarray(increments, float))
    k = inc.size
    prices = [np.array([float(s0)])]
    children = []
    for n in range(N):
        cur = prices[-1]
        children.append(np.arange(cur.size * k, dtype=np.int64).reshape(-1, k))
        prices.append((cur[:, None] + inc[None, :]).reshape(-1))
    return ScenarioTree(tuple(prices), tuple(children), T, False, False, None)


def measures_for_band(tree: ScenarioTree, sigma_lo: float | None, sigma_hi: float | None,
                      grid_count: int, limit: int = 10**5) -> list:
    """All measures whose node variances take one of ``grid_count`` levels of the band.

    One level means the midpoint; otherwise the levels are uniform and include
    both end points.
    """
    if grid_count < 1:
        raise ValueError("grid_count must be >= 1")
    bands = band_variances(tree, sigma_lo, sigma_hi)
    n_nodes = tree.n_nodes_with_children()
    count = grid_count**n_nodes
    if count > limit:
        raise ValueError(f"{count} measures exceed the enumeration limit {limit}")
    fracs = np.array([0.5]) if grid_count == 1 else np.linspace(0.0, 1.0, grid_count)
    flat_lo = np.concatenate([lo for lo, _ in bands])
    flat_hi = np.concatenate([hi for _, hi in bands])
    sizes = [p.size for p in tree.prices[:-1]]
    splits = np.cumsum(sizes)[:-1]
    out = []
    for combo in itertools.product(range(len(fracs)), repeat=n_nodes):
        f = fracs[np.asarray(combo, dtype=int)]
        v = flat_lo + f * (flat_hi - flat_lo)
        out.append(TreeMeasure.from_variances(tree, np.split(v, splits)))
    return out


def random_band_measure(tree: ScenarioTree, sigma_lo, sigma_hi, rng: np.random.Generator) -> TreeMeasure:
    bands = band_variances(tree, sigma_lo, sigma_hi)
    var = [lo + rng.random(lo.size) * (hi - lo) for lo, hi in bands]
    return TreeMeasure.from_variances(tree, var)


def extremal_measure(tree: ScenarioTree, sigma_lo, sigma_hi, upper: bool = True) -> TreeMeasure:
    bands = band_variances(tree, sigma_lo, sigma_hi)
    return TreeMeasure.from_variances(tree, [hi if upper else lo for lo, hi in bands])


# ---------------------------------------------------------------------------
# projection


def project_path(tree: ScenarioTree, idx: Sequence[int], measure: TreeMeasure) -> LiftedPath:
    """Price path through the nodes and the cumulative conditional variances."""
    nodes = tree.node_sequence(idx)
    grid = tree.grid()
    prices = np.array([tree.prices[n][j] for n, j in enumerate(nodes)])
    steps = np.array([measure.var[n][j] for n, j in enumerate(nodes[:-1])])
    qv = np.concatenate([[0.0], np.cumsum(steps)])
    return LiftedPath(DiscretePath(grid, prices), DiscretePath(grid, qv))


def lift_prices(tree: ScenarioTree, measure: TreeMeasure, prices: Sequence[float]) -> LiftedPath:
    """Recover the qv coordinate from a price sequence alone (the tree's lift map)."""
    prices = np.asarray(prices, float)
    if prices.size != tree.depth + 1 or prices[0] != tree.s0:
        raise InvalidPathIndex("price sequence does not start at the root or has the wrong length")
    node, idx = 0, []
    for n in range(tree.depth):
        cand = tree.prices[n + 1][tree.children[n][node]]
        c = int(np.argmin(np.abs(cand - prices[n + 1])))
        if abs(cand[c] - prices[n + 1]) > 1e-9 * (1 + abs(prices[n + 1])):
            raise InvalidPathIndex(f"price {prices[n + 1]} is not a child at level {n}")
        idx.append(c)
        node = int(tree.children[n][node, c])
    return project_path(tree, idx, measure)


def filter_paths(tree: ScenarioTree, measure: TreeMeasure, spec, tol: float = 1e-6) -> list:
    """Path indices whose projected lift lies in the prediction set."""
    from .prediction_sets import contains

    return [idx for idx in tree.paths() if contains(spec, project_path(tree, idx, measure), tol).member]


def sample_tree_paths(tree: ScenarioTree, measure: TreeMeasure, rng: np.random.Generator, n: int) -> np.ndarray:
    """Price paths (n, depth + 1) drawn from the measure."""
    out = np.empty((n, tree.depth + 1))
    node = np.zeros(n, dtype=np.int64)
    out[:, 0] = tree.s0
    for lvl in range(tree.depth):
        cum = np.cumsum(measure.probs[lvl][node], axis=1)
        u = rng.random(n)[:, None]
        choice = np.minimum((u >= cum).sum(axis=1), cum.shape[1] - 1)
        node = tree.children[lvl][node, choice]
        out[:, lvl + 1] = tree.prices[lvl + 1][node]
    return out


def dump_json(obj: dict, file) -> None:
    with open(file, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)
