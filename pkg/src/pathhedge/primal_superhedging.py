"""Superhedging linear programs on scenario trees and on finite path sets.

Holdings are indexed by tree node, so adaptedness holds by construction.  Two
formulations:

* path LP: constraints per retained path (terminal domination plus running
  floor at every time), needed when only part of the tree is retained or the
  floor depends on the path;
* nodal LP: superhedging values V(node) with V(child) <= V(node) + gains,
  exact when every path is retained and the floor is a constant 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from .dual_valuation import _row_of, leaf_values
from .path_core import DiscretePath, LiftedPath
from .pathwise_calculus import QvConfig, lift_path
from .payoffs import Payoff
from .prediction_sets import GrowthFunction, growth_value
from .scenario_trees import ScenarioTree, TreeMeasure, project_path

LP_TOL = 1e-7
VERIFY_TOL = 1e-6
MODES = ("floor_zero", "floor_cZ", "none")


class EmptyDiscretization(ValueError):
    pass


class UnboundedLP(RuntimeError):
    """Superhedging LP unbounded below; cannot happen with a floor."""


@dataclass
class HedgeLP:
    c: np.ndarray
    A_ub: sparse.csr_matrix
    b_ub: np.ndarray
    bounds: list
    var_names: list
    row_names: list

    def to_lp_format(self) -> str:
        """CPLEX LP text, rows in assembly order."""
        def term(coef, name):
            sign = "-" if coef < 0 else "+"
            return f"{sign} {abs(coef):.17g} {name}"

        lines = ["\\ superhedging LP", "Minimize", " obj: " + " ".join(
            term(v, self.var_names[j]) for j, v in enumerate(self.c) if v != 0) or " obj: 0", "Subject To"]
        A = self.A_ub.tocsr()
        for i in range(A.shape[0]):
            lo, hi = A.indptr[i], A.indptr[i + 1]
            body = " ".join(term(A.data[p], self.var_names[A.indices[p]]) for p in range(lo, hi))
            lines.append(f" {self.row_names[i]}: {body or '0 x0'} <= {self.b_ub[i]:.17g}")
        lines.append("Bounds")
        for name, (lo, hi) in zip(self.var_names, self.bounds):
            if lo is None and hi is None:
                lines.append(f" {name} free")
            else:
                lo_s = "-inf" if lo is None else f"{lo:.17g}"
                hi_s = "+inf" if hi is None else f"{hi:.17g}"
                lines.append(f" {lo_s} <= {name} <= {hi_s}")
        lines.append("End")
        return "\n".join(lines) + "\n"


@dataclass
class HedgeResult:
    lambda_star: float
    strategy: dict          # asset -> {(level, node): holding}
    status: str             # optimal | infeasible | unbounded_cap
    duality_gap_vs: float | None = None
    formulation: str = "path"
    values: list | None = None       # nodal LP: V per level
    ladder: list = field(default_factory=list)
    settings: dict = field(default_factory=dict, repr=False)
    lp: HedgeLP | None = field(default=None, repr=False)

    def to_json(self) -> dict:
        lam = self.lambda_star
        return {
            "lambda_star": "inf" if np.isinf(lam) else float(lam),
            "status": self.status,
            "formulation": self.formulation,
            "duality_gap_vs": self.duality_gap_vs,
            "strategy": {
                a: [[n, j, float(h)] for (n, j), h in sorted(s.items())] for a, s in self.strategy.items()
            },
            "ladder": self.ladder,
        }


@dataclass
class VerificationReport:
    passed: bool
    worst_terminal_margin: float
    worst_floor_margin: float
    offending_path: tuple | None
    n_paths_checked: int


def delta_ss_on_tree(tree: ScenarioTree, idx, measure: TreeMeasure | None = None) -> np.ndarray:
    """Left-endpoint increments S(node) * dS along a tree path."""
    s = tree.path_prices(idx)
    return s[:-1] * np.diff(s)


# ---------------------------------------------------------------------------


def _capped(vals: np.ndarray, cap: float | None) -> np.ndarray:
    vals = np.asarray(vals, float)
    if cap is not None:
        vals = np.minimum(vals, cap)
    if not np.all(np.isfinite(vals)):
        raise ValueError("payoff not finite on the retained paths; pass a cap M")
    return vals


def path_payoffs(tree: ScenarioTree, paths: list, payoff: Payoff, measure: TreeMeasure | None) -> np.ndarray:
    if payoff.terminal_only:
        return np.asarray(payoff.terminal(np.array([tree.path_prices(i)[-1] for i in paths]), tree.s0), float)
    if payoff.needs_qv:
        if measure is None:
            raise ValueError("payoff needs the qv coordinate: pass a measure for the projection")
        return np.array([payoff(project_path(tree, i, measure)) for i in paths])
    grid = tree.grid()
    zero = DiscretePath(grid, np.zeros(tree.depth + 1))
    return np.array([payoff(LiftedPath(DiscretePath(grid, tree.path_prices(i)), zero)) for i in paths])


def _floors(tree, paths, mode, c, growth, measure) -> np.ndarray:
    if mode == "floor_zero":
        return np.zeros(len(paths))
    if mode == "none":
        return np.full(len(paths), -np.inf)
    if growth is None or measure is None:
        raise ValueError("floor_cZ needs a growth function and a measure for the qv coordinate")
    if c < 0:
        raise ValueError("c must be >= 0")
    z = np.array([growth_value(growth, project_path(tree, i, measure)).value for i in paths])
    with np.errstate(invalid="ignore"):
        return np.where(np.isinf(z), -np.inf, -c * z) if c > 0 else np.zeros(len(paths))


def _solve(lp: HedgeLP):
    res = linprog(lp.c, A_ub=lp.A_ub, b_ub=lp.b_ub, bounds=lp.bounds, method="highs")
    return res


def superhedge_lp(tree: ScenarioTree, retained=None, payoff: Payoff | None = None, assets=("S",),
                  mode: str = "floor_zero", c: float = 0.0, growth: GrowthFunction | None = None,
                  cap: float | None = None, measure: TreeMeasure | None = None,
                  formulation: str = "auto", dual_value: float | None = None) -> HedgeResult:
    """Minimal initial capital of an adapted strategy dominating the payoff.

    ``retained=None`` means every tree path.  ``assets`` is ("S",) or
    ("S", "SS"); the second asset trades the iterated integral with
    left-endpoint increments S * dS.
    """
    if payoff is None:
        raise ValueError("payoff required")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    assets = tuple(assets)
    if assets not in (("S",), ("S", "SS")):
        raise ValueError("assets must be ('S',) or ('S', 'SS')")
    if retained is not None and len(retained) == 0:
        raise EmptyDiscretization("empty prediction set discretization")
    if formulation == "auto":
        formulation = "nodal" if retained is None and mode != "floor_cZ" else "path"
    settings = dict(assets=assets, mode=mode, c=c, growth=growth, cap=cap, measure=measure)
    if formulation == "nodal":
        if retained is not None or mode == "floor_cZ":
            raise ValueError("nodal formulation needs every path retained and a constant floor")
        lp, layout = _nodal_lp(tree, payoff, assets, mode, cap)
    else:
        paths = list(tree.paths()) if retained is None else [tuple(int(x) for x in i) for i in retained]
        for i in paths:
            tree.node_sequence(i)
        lp, layout = _path_lp(tree, paths, payoff, assets, mode, c, growth, cap, measure)
        settings["paths"] = paths

    res = _solve(lp)
    if res.status == 2:
        return HedgeResult(np.inf, {}, "infeasible", formulation=formulation, settings=settings, lp=lp)
    if res.status == 3:
        raise UnboundedLP("superhedging LP unbounded below")
    if res.status != 0:
        raise RuntimeError(f"LP solver failed: {res.message}")
    x = res.x
    strategy = {a: {key: float(x[j]) for key, j in layout[a].items()} for a in assets}
    lam = float(x[layout["lambda"]])
    values = None
    if formulation == "nodal":
        values = [x[sl] for sl in layout["V"]]
    gap = None if dual_value is None else lam - float(dual_value)
    return HedgeResult(lam, strategy, "optimal", gap, formulation, values, settings=settings, lp=lp)


def _holding_columns(keys, assets, start):
    layout, names = {}, []
    j = start
    for a in assets:
        layout[a] = {}
        for key in keys:
            layout[a][key] = j
            names.append(f"{'h' if a == 'S' else 'g'}_{key[0]}_{key[1]}")
            j += 1
    return layout, names, j


def _path_lp(tree, paths, payoff, assets, mode, c, growth, cap, measure):
    N = tree.depth
    xi = _capped(path_payoffs(tree, paths, payoff, measure), cap)
    floors = _floors(tree, paths, mode, c, growth, measure)
    seqs = [tree.node_sequence(i) for i in paths]
    keys = sorted({(n, s[n]) for s in seqs for n in range(N)})
    layout, names, n_var = _holding_columns(keys, assets, 1)
    layout["lambda"] = 0
    names = ["lam"] + names

    rows, cols, data, b, row_names = [], [], [], [], []
    seen = set()

    def add_row(coef_cols, coef_vals, rhs, name):
        r = len(b)
        rows.extend([r] * len(coef_cols))
        cols.extend(coef_cols)
        data.extend(coef_vals)
        b.append(rhs)
        row_names.append(name)

    for p, (s, idx) in enumerate(zip(seqs, paths)):
        prices = np.array([tree.prices[n][j] for n, j in enumerate(s)])
        dS = np.diff(prices)
        dSS = prices[:-1] * dS
        ccols, cvals = [0], [-1.0]
        # wealth_k = lam + sum_{n<k} h dS + g dSS; rows are -wealth <= -bound
        for k in range(N + 1):
            if k > 0:
                n = k - 1
                ccols.append(layout["S"][(n, s[n])])
                cvals.append(-dS[n])
                if "SS" in assets:
                    ccols.append(layout["SS"][(n, s[n])])
                    cvals.append(-dSS[n])
            if np.isfinite(floors[p]):
                key = (tuple(s[: k + 1]), floors[p])
                if key not in seen:
                    seen.add(key)
                    add_row(list(ccols), list(cvals), -floors[p], f"floor_{p}_{k}")
        add_row(list(ccols), list(cvals), -xi[p], f"term_{p}")

    A = sparse.csr_matrix((data, (rows, cols)), shape=(len(b), n_var))
    c_obj = np.zeros(n_var)
    c_obj[0] = 1.0
    lp = HedgeLP(c_obj, A, np.asarray(b, float), [(None, None)] * n_var, names, row_names)
    return lp, layout


def _nodal_lp(tree, payoff, assets, mode, cap):
    N = tree.depth
    xi = _capped(leaf_values(tree, payoff), cap)
    offsets = np.concatenate([[0], np.cumsum([p.size for p in tree.prices])])
    n_V = int(offsets[-1])
    keys = [(n, j) for n in range(N) for j in range(tree.prices[n].size)]
    layout, hnames, n_var = _holding_columns(keys, assets, n_V)
    layout["lambda"] = 0
    layout["V"] = [slice(int(offsets[n]), int(offsets[n + 1])) for n in range(N + 1)]
    names = [f"V_{n}_{j}" for n in range(N + 1) for j in range(tree.prices[n].size)] + hnames

    rows, cols, data, row_names = [], [], [], []
    r0 = 0
    for n in range(N):
        ch = tree.children[n]
        inc = tree.increments(n)
        m, k = ch.shape
        parent = offsets[n] + np.repeat(np.arange(m), k)
        child = offsets[n + 1] + ch.reshape(-1)
        hcol = np.array([layout["S"][(n, j)] for j in range(m)]).repeat(k)
        r = r0 + np.arange(m * k)
        # V(child) - V(node) - h inc - g S inc <= 0
        parts = [(child, np.ones(m * k)), (parent, -np.ones(m * k)), (hcol, -inc.reshape(-1))]
        if "SS" in assets:
            gcol = np.array([layout["SS"][(n, j)] for j in range(m)]).repeat(k)
            parts.append((gcol, -(tree.prices[n][:, None] * inc).reshape(-1)))
        for cc, vv in parts:
            rows.append(r)
            cols.append(cc)
            data.append(vv)
        row_names.extend(f"step_{n}_{j}_{c}" for j in range(m) for c in range(k))
        r0 += m * k
    A = sparse.csr_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))), shape=(r0, n_var)
    )
    lower = 0.0 if mode == "floor_zero" else None
    bounds = [(lower, None)] * n_V + [(None, None)] * (n_var - n_V)
    for j, v in enumerate(xi):
        lo = v if lower is None else max(v, lower)
        bounds[int(offsets[N]) + j] = (lo, None)
    c_obj = np.zeros(n_var)
    c_obj[0] = 1.0
    return HedgeLP(c_obj, A, np.zeros(r0), bounds, names, row_names), layout


# ---------------------------------------------------------------------------


def simulate_wealth(tree: ScenarioTree, idx, result: HedgeResult) -> np.ndarray:
    """Running wealth lam + (H.S)_k + (G.SS)_k along a path, k = 0..N."""
    s = tree.node_sequence(idx)
    prices = np.array([tree.prices[n][j] for n, j in enumerate(s)])
    dS = np.diff(prices)
    gains = np.zeros(tree.depth)
    for a, hold in result.strategy.items():
        h = np.array([hold.get((n, s[n]), 0.0) for n in range(tree.depth)])
        gains += h * (dS if a == "S" else prices[:-1] * dS)
    return result.lambda_star + np.concatenate([[0.0], np.cumsum(gains)])


def verify_hedge(tree: ScenarioTree, retained, payoff: Payoff, result: HedgeResult,
                 atol: float = VERIFY_TOL, max_paths: int = 20000, seed: int = 0) -> VerificationReport:
    """Re-simulate the strategy on the retained paths, independent of the solver.

    With ``retained=None`` every path is checked, or a seeded sample of
    ``max_paths`` of them on large trees.
    """
    if result.status != "optimal":
        raise ValueError("verify_hedge needs an optimal result")
    st = result.settings
    if retained is None:
        if tree.n_paths() <= max_paths:
            paths = list(tree.paths())
        else:
            rng = np.random.default_rng(seed)
            paths = [tuple(int(c) for c in row) for row in rng.integers(0, tree.branching, (max_paths, tree.depth))]
    else:
        paths = [tuple(int(x) for x in i) for i in retained]
    xi = _capped(path_payoffs(tree, paths, payoff, st.get("measure")), st.get("cap"))
    floors = _floors(tree, paths, st.get("mode", "floor_zero"), st.get("c", 0.0), st.get("growth"), st.get("measure"))
    worst_t, worst_f, bad = np.inf, np.inf, None
    for p, idx in enumerate(paths):
        w = simulate_wealth(tree, idx, result)
        mt = w[-1] - xi[p]
        mf = float(np.min(w - floors[p])) if np.isfinite(floors[p]) else np.inf
        if (mt < -atol or mf < -atol) and bad is None:
            bad = idx
        worst_t, worst_f = min(worst_t, mt), min(worst_f, mf)
    return VerificationReport(bad is None, float(worst_t), float(worst_f), bad, len(paths))


# ---------------------------------------------------------------------------


def _lift_for(payoff: Payoff, path: DiscretePath, qv_cfg: QvConfig) -> LiftedPath:
    if payoff.needs_qv:
        return lift_path(path, qv_cfg)[0]
    return LiftedPath(path, DiscretePath(path.grid, np.zeros(len(path))))


def static_superhedge(paths: list, payoff: Payoff, caps=(10.0, 100.0, 1000.0), floor: bool = False,
                      qv_cfg: QvConfig = QvConfig()) -> HedgeResult:
    """Cheapest buy-and-hold superhedge lam + h (w(T) - w(0)) >= payoff on every path.

    ``caps`` gives a ladder of truncations min(payoff, M); the result is
    flagged effectively infinite (status unbounded_cap) when lam*(M) >= 0.9 M
    along the whole ladder.  ``floor`` adds lam + h (w(t) - w(0)) >= 0 at all
    grid times.
    """
    if not paths:
        raise EmptyDiscretization("empty prediction set discretization")
    raw = np.array([payoff(_lift_for(payoff, p, qv_cfg)) for p in paths])
    moves = np.array([p.values[-1] - p.values[0] for p in paths])
    ladder = []
    for M in (caps if caps else [None]):
        xi = _capped(raw, M)
        A = [[-1.0, -m] for m in moves]
        b = list(-xi)
        if floor:
            for p in paths:
                for d in p.values - p.values[0]:
                    A.append([-1.0, -d])
                    b.append(0.0)
        res = linprog([1.0, 0.0], A_ub=np.array(A), b_ub=np.array(b), bounds=[(None, None)] * 2, method="highs")
        if res.status != 0:
            raise UnboundedLP(f"static LP not solved: {res.message}")
        ladder.append({"M": None if M is None else float(M), "lambda": float(res.x[0]), "h": float(res.x[1])})
    last = ladder[-1]
    strategy = {"S": {(0, 0): last["h"]}}
    if caps and len(ladder) >= 2 and all(r["lambda"] >= 0.9 * r["M"] for r in ladder):
        return HedgeResult(np.inf, strategy, "unbounded_cap", formulation="static", ladder=ladder)
    return HedgeResult(last["lambda"], strategy, "optimal", formulation="static", ladder=ladder)


def retained_rows(tree: ScenarioTree, retained) -> np.ndarray:
    """Row numbers of retained path indices in ``path_node_matrix`` order."""
    return np.array([_row_of(i, tree.branching, tree.depth) for i in retained], dtype=np.int64)
