"""Supremum of expected payoffs over martingale measures on a discretized set.

Three routes: exact backward recursion over a variance band (the lattice
Black-Scholes-Barenblatt scheme), brute-force enumeration over a finite
measure family, and Monte Carlo for a single model.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .path_core import DiscretePath, LiftedPath
from .payoffs import Payoff
from .prediction_sets import contains, is_stop_closed, stop_closure_check
from .scenario_trees import (
    ScenarioTree,
    TreeMeasure,
    band_variances,
    extremal_measure,
    node_probabilities,
    project_path,
)

EMPTY = -np.inf
SUPPORT_EPS = 1e-14


class PathMemoryError(ValueError):
    """Path-dependent payoff requested on a recombining tree."""


class StopClosureError(ValueError):
    """The set is not closed under stopping, so the stopping identity may fail."""


@dataclass
class DualResult:
    value: float
    argmax_measure: TreeMeasure | None
    method: str
    diagnostics: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        diag = {}
        for k, v in self.diagnostics.items():
            if isinstance(v, np.ndarray):
                v = v.tolist()
            elif isinstance(v, list) and v and isinstance(v[0], np.ndarray):
                v = [x.tolist() for x in v]
            diag[k] = v
        return {
            "value": _num(self.value),
            "method": self.method,
            "argmax_measure": self.argmax_measure.to_json() if self.argmax_measure is not None else None,
            "diagnostics": diag,
        }


def _num(x):
    x = float(x)
    if np.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


def _leaf_histories(tree: ScenarioTree) -> np.ndarray:
    """Price history for every leaf of a non-recombining tree, in leaf order."""
    nodes = tree.path_node_matrix()
    return np.stack([tree.prices[n][nodes[:, n]] for n in range(tree.depth + 1)], axis=1)


def leaf_values(tree: ScenarioTree, payoff: Payoff) -> np.ndarray:
    if payoff.terminal_only:
        return np.asarray(payoff.terminal(tree.prices[-1], tree.s0), float)
    if tree.recombining:
        raise PathMemoryError("path-dependent payoff on a recombining tree: call tree.unroll() first")
    if payoff.needs_qv:
        raise PathMemoryError("payoff depends on the qv coordinate, which is measure dependent; use dual_bruteforce")
    grid = tree.grid()
    zero = DiscretePath(grid, np.zeros(tree.depth + 1))
    return np.array([payoff(LiftedPath(DiscretePath(grid, h), zero)) for h in _leaf_histories(tree)])


def _band_step(tree, n, V_next, lo, hi):
    inc = tree.increments(n)
    Vc = V_next[tree.children[n]]
    e_lo = (node_probabilities(inc, lo) * Vc).sum(axis=1)
    e_hi = (node_probabilities(inc, hi) * Vc).sum(axis=1)
    # E_q[V] is affine in q: one of the end points is optimal; ties go to the upper end
    take_hi = e_hi >= e_lo
    return np.where(take_hi, e_hi, e_lo), np.where(take_hi, hi, lo)


def dual_recursion(tree: ScenarioTree, band, payoff: Payoff) -> DualResult:
    """V(leaf) = payoff; V(node) = max over feasible variance q of E_q[V(child)].

    ``band`` is (sigma_lo, sigma_hi); ``None`` (or a None end) uses the tree's
    full martingale polytope at that end.
    """
    lo_s, hi_s = (None, None) if band is None else band
    bands = band_variances(tree, lo_s, hi_s)
    V = leaf_values(tree, payoff)
    chosen = [None] * tree.depth
    for n in range(tree.depth - 1, -1, -1):
        lo, hi = bands[n]
        V, chosen[n] = _band_step(tree, n, V, lo, hi)
    measure = TreeMeasure.from_variances(tree, chosen)
    return DualResult(float(V[0]), measure, "recursion", {"chosen_variance": chosen})


def forward_expectation(tree: ScenarioTree, measure: TreeMeasure, payoff: Payoff) -> float:
    """E[payoff] by forward propagation (terminal claims) or by enumerating leaves."""
    if payoff.terminal_only:
        dist = measure.terminal_distribution()
        return float(np.dot(dist, payoff.terminal(tree.prices[-1], tree.s0)))
    vals = leaf_values(tree, payoff)
    probs = measure.path_probabilities(tree.path_node_matrix())
    return float(np.dot(probs, vals))


def _row_of(idx, k: int, depth: int) -> int:
    r = 0
    for c in idx:
        r = r * k + int(c)
    return r


def dual_bruteforce(tree: ScenarioTree, measures, spec=None, payoff: Payoff | None = None,
                    tol: float = 1e-6, retained=None, limit: int = 10**6) -> DualResult:
    """Max of E[payoff] over the listed measures concentrated on the set.

    A measure counts when every positive-probability path projects into
    ``spec`` and (if given) belongs to ``retained``.  With no such measure the
    value is the -inf sentinel.
    """
    if payoff is None:
        raise ValueError("payoff required")
    nodes = tree.path_node_matrix()
    P = nodes.shape[0]
    if P * len(measures) > limit:
        raise ValueError(f"{P} paths x {len(measures)} measures exceed the guard {limit}")
    k, N = tree.branching, tree.depth
    grid = tree.grid()
    prices = np.stack([tree.prices[n][nodes[:, n]] for n in range(N + 1)], axis=1)
    allowed = np.ones(P, bool)
    if retained is not None:
        allowed[:] = False
        allowed[[_row_of(i, k, N) for i in retained]] = True

    fixed_vals = None
    if not payoff.needs_qv:
        zero = DiscretePath(grid, np.zeros(N + 1))
        if payoff.terminal_only:
            fixed_vals = np.asarray(payoff.terminal(prices[:, -1], tree.s0), float)
        else:
            fixed_vals = np.array([payoff(LiftedPath(DiscretePath(grid, p), zero)) for p in prices])

    best, best_m, n_adm = EMPTY, None, 0
    for m in measures:
        probs = m.path_probabilities(nodes)
        support = np.flatnonzero(probs > SUPPORT_EPS)
        if not np.all(allowed[support]):
            continue
        need_lift = spec is not None or fixed_vals is None
        if need_lift:
            steps = np.stack([m.var[n][nodes[:, n]] for n in range(N)], axis=1)
            qv = np.concatenate([np.zeros((P, 1)), np.cumsum(steps, axis=1)], axis=1)
            lifts = {i: LiftedPath(DiscretePath(grid, prices[i]), DiscretePath(grid, qv[i])) for i in support}
        if spec is not None and not all(contains(spec, lifts[i], tol).member for i in support):
            continue
        n_adm += 1
        if fixed_vals is not None:
            vals = fixed_vals[support]
        else:
            vals = np.array([payoff(lifts[i]) for i in support])
        e = float(np.dot(probs[support], vals))
        if e > best:
            best, best_m = e, m
    diag = {"n_measures": len(measures), "n_admissible": n_adm}
    if best_m is None:
        diag["empty"] = True
    return DualResult(best, best_m, "enumeration", diag)


def dual_mc(sampler, payoff: Payoff, n_samples: int, seed: int = 0) -> DualResult:
    """Monte Carlo mean of the payoff under a single path model."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    X = sampler.sample(rng, n_samples)
    if payoff.terminal_only:
        vals = np.asarray(payoff.terminal(X[:, -1], float(X[0, 0])), float)
    else:
        grid = sampler.grid
        zero = DiscretePath(grid, np.zeros(len(grid)))
        vals = np.array([payoff(LiftedPath(DiscretePath(grid, x), zero)) for x in X])
    mean = float(np.mean(vals))
    se = float(np.std(vals, ddof=1) / np.sqrt(n_samples)) if n_samples > 1 else 0.0
    return DualResult(mean, None, "monte_carlo", {"stderr": se, "n_samples": n_samples, "seed": seed})


def _exercise_values(tree: ScenarioTree, payoff: Payoff, n: int) -> np.ndarray:
    """Payoff of the path stopped at each node of level n."""
    if payoff.terminal_only:
        return np.asarray(payoff.terminal(tree.prices[n], tree.s0), float)
    if tree.recombining:
        raise PathMemoryError("path-dependent payoff on a recombining tree: call tree.unroll() first")
    k = tree.branching
    grid = tree.grid()
    zero = DiscretePath(grid, np.zeros(tree.depth + 1))
    nodes = tree.path_node_matrix()
    # one representative leaf per level-n node: its first descendant in leaf order
    reps = nodes[:: k ** (tree.depth - n)]
    out = np.empty(reps.shape[0])
    for j, row in enumerate(reps):
        hist = np.array([tree.prices[l][row[l]] for l in range(n + 1)])
        full = np.concatenate([hist, np.full(tree.depth - n, hist[-1])])
        out[j] = payoff(LiftedPath(DiscretePath(grid, full), zero))
    return out


def forward_stopped_expectation(tree: ScenarioTree, measure: TreeMeasure, stop: list, payoff: Payoff) -> float:
    """E[payoff(S^tau)] for the node stopping rule ``stop`` (level -> bool mask)."""
    mass = np.ones(1)
    total = 0.0
    for n in range(tree.depth):
        ex = _exercise_values(tree, payoff, n)
        total += float(np.dot(mass[stop[n]], ex[stop[n]]))
        live = np.where(stop[n], 0.0, mass)
        nxt = np.zeros(tree.prices[n + 1].size)
        np.add.at(nxt, tree.children[n].reshape(-1), (live[:, None] * measure.probs[n]).reshape(-1))
        mass = nxt
    total += float(np.dot(mass, _exercise_values(tree, payoff, tree.depth)))
    return total


def stopped_payoff_sup(tree: ScenarioTree, band, payoff: Payoff, spec=None, force: bool = False,
                       n_check: int = 8, tol: float = 1e-6) -> DualResult:
    """sup over grid stopping times and band measures of E[payoff(S^tau)].

    Optimal stopping inside the band recursion: V = max(stop value, best
    continuation); ties continue.  Refuses sets not closed under stopping
    unless ``force``.
    """
    lo_s, hi_s = (None, None) if band is None else band
    bands = band_variances(tree, lo_s, hi_s)
    if not force:
        closed = all(np.all(lo == 0.0) for lo, _ in bands)
        if spec is not None:
            closed = closed and is_stop_closed(spec)
            if closed:
                m = extremal_measure(tree, lo_s, hi_s)
                rng = np.random.default_rng(0)
                for idx in rng.integers(0, tree.branching, (n_check, tree.depth)):
                    lp = project_path(tree, idx, m)
                    if contains(spec, lp, tol).member and not stop_closure_check(spec, lp, tol):
                        closed = False
                        break
        if not closed:
            raise StopClosureError("band/set not closed under stopping; the stopping identity can fail (force=True overrides)")
    V = leaf_values(tree, payoff)
    chosen = [None] * tree.depth
    stop = [None] * (tree.depth + 1)
    stop[tree.depth] = np.zeros(V.size, bool)
    for n in range(tree.depth - 1, -1, -1):
        lo, hi = bands[n]
        cont, chosen[n] = _band_step(tree, n, V, lo, hi)
        ex = _exercise_values(tree, payoff, n)
        stop[n] = ex > cont
        V = np.where(stop[n], ex, cont)
    measure = TreeMeasure.from_variances(tree, chosen)
    plain = dual_recursion(tree, band, payoff).value
    check = forward_stopped_expectation(tree, measure, stop[:-1], payoff)
    return DualResult(
        float(V[0]),
        measure,
        "recursion",
        {
            "plain_value": plain,
            "identity_gap": float(V[0]) - plain,
            "forward_check": check,
            "n_stop_nodes": int(sum(int(s.sum()) for s in stop)),
        },
    )


def _two_point_vertices(inc_row: np.ndarray) -> list:
    """Extreme martingale laws on the increments: delta at 0 or two-point mixes."""
    k = inc_row.size
    out = []
    for i in range(k):
        if inc_row[i] == 0.0:
            p = np.zeros(k)
            p[i] = 1.0
            out.append(p)
    for i in range(k):
        for j in range(k):
            if inc_row[i] < 0.0 < inc_row[j]:
                p = np.zeros(k)
                p[i] = inc_row[j] / (inc_row[j] - inc_row[i])
                p[j] = 1.0 - p[i]
                out.append(p)
    return out


def dual_polytope(tree: ScenarioTree, payoff: Payoff) -> DualResult:
    """Exact sup over every martingale measure on the tree, any branching.

    Each node maximizes over the vertices of its one-step martingale
    polytope; vertices are a point mass on a zero increment or a two-point
    law straddling zero.  Ties keep the first vertex in enumeration order.
    """
    V = leaf_values(tree, payoff)
    probs = [None] * tree.depth
    for n in range(tree.depth - 1, -1, -1):
        inc = tree.increments(n)
        Vc = V[tree.children[n]]
        newV = np.empty(inc.shape[0])
        P = np.empty_like(inc)
        for x in range(inc.shape[0]):
            verts = _two_point_vertices(inc[x])
            if not verts:
                raise ValueError(f"level {n} node {x}: no martingale law on these increments")
            vals = [float(np.dot(p, Vc[x])) for p in verts]
            b = int(np.argmax(vals))
            newV[x], P[x] = vals[b], verts[b]
        V, probs[n] = newV, P
    var = tuple((p * tree.increments(n) ** 2).sum(axis=1) for n, p in enumerate(probs))
    measure = TreeMeasure(tree, tuple(probs), var)
    return DualResult(float(V[0]), measure, "recursion", {"chosen_variance": list(var)})
