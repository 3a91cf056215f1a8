"""Command-line entry point: ``pathhedge <subcommand> [options]``.

Exit codes: 0 all invariants pass, 1 an invariant failed, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

from . import experiments as ex
from .dual_valuation import dual_polytope, dual_recursion, forward_expectation
from .path_core import LiftedPath, PathDomainError, read_path_csv
from .pathwise_calculus import (
    LevelWarning,
    NotInOmegaError,
    QvConfig,
    SimpleStrategy,
    generalized_integral,
    integral_S,
    pathwise_qv,
    pathwise_qv_quiet,
)
from .payoffs import EuropeanCall
from .prediction_sets import build_qv_and_check, contains, load_spec
from .primal_superhedging import superhedge_lp, verify_hedge


class UsageError(Exception):
    pass


def _common(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=d, help="experiment config JSON")
    parser.add_argument("--seed", type=int, default=d, help="RNG seed (overrides config)")
    parser.add_argument("--out", default=d, help="output directory for reports")
    parser.add_argument("--tol", type=float, default=d, help="numerical tolerance (overrides config)")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pathhedge", description="Pathwise superhedging toolkit")
    _common(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        _common(sp, suppress=True)
        return sp

    sp = add("qv", "pathwise quadratic variation of a CSV path, or the qv experiment")
    sp.add_argument("--path", help="CSV with header t,value")
    sp.add_argument("--m-min", type=int, default=1)
    sp.add_argument("--m-max", type=int, default=8)
    sp.add_argument("--qv-tol", type=float, default=1e-3)

    sp = add("integrate", "(H.S) and (G.SS) of simple strategies along a CSV path")
    sp.add_argument("--path", required=True)
    sp.add_argument("--H", required=True, help="strategy JSON")
    sp.add_argument("--G", help="strategy JSON for the iterated-integral leg")
    sp.add_argument("--m-max", type=int, default=8)
    sp.add_argument("--qv-tol", type=float, default=1e-3)

    sp = add("check-set", "membership of a path (lifted by its qv) in a prediction set")
    sp.add_argument("--set", dest="set_file", required=True, help="prediction-set JSON")
    sp.add_argument("--path", required=True)
    sp.add_argument("--qv-path", help="CSV for the qv coordinate; default: pathwise qv of the path")
    sp.add_argument("--require-member", action="store_true", help="exit 1 when not a member")

    sp = add("dual", "dual value on the configured trinomial tree")
    sp.add_argument("--method", choices=("recursion", "polytope"), default="recursion")

    sp = add("primal", "superhedging LP on the configured trinomial tree")
    sp.add_argument("--lp-out", help="write the LP in CPLEX LP text format")
    sp.add_argument("--assets", choices=("S", "S+SS"), default="S")

    sp = add("duality", "primal/dual comparison experiment")
    sp.add_argument("--kind", choices=("band", "full_polytope", "duality_gap", "weak"))
    add("moments", "fourth-moment bound experiment")
    add("stop-closure", "closure under stopping and the stopped-payoff identity")
    return p


def _config(args, experiment: str) -> ex.ExperimentConfig:
    cfg = ex.ExperimentConfig.from_json(args.config) if args.config else ex.ExperimentConfig()
    cfg.experiment = experiment
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2**64:
            raise UsageError("--seed must be an unsigned 64-bit integer")
        cfg.seed = args.seed
    if args.tol is not None:
        if args.tol <= 0:
            raise UsageError("--tol must be positive")
        cfg.tol = args.tol
    return cfg


def _emit(obj: dict, args, name: str) -> None:
    text = json.dumps(obj, sort_keys=True, indent=1) + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{name}.json").write_text(text)
    sys.stdout.write(text)


def _run_report(args, experiment: str) -> int:
    cfg = _config(args, experiment)
    if experiment == "duality" and getattr(args, "kind", None):
        cfg.kind = args.kind
    report, timings = ex.run_experiment(cfg)
    name = experiment if experiment != "duality" else f"duality_{cfg.kind}"
    if args.out:
        ex.write_report(report, timings, args.out, name)
    sys.stdout.write(json.dumps({"experiment": name, "passed": report["passed"],
                                 "invariants": report["invariants"], "summary": report["summary"]},
                                sort_keys=True, indent=1) + "\n")
    return 0 if report["passed"] else 1


def _cmd_qv(args) -> int:
    if not args.path:
        return _run_report(args, "qv")
    path = read_path_csv(args.path)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", LevelWarning)
        res = pathwise_qv(path, args.m_min, args.m_max, args.qv_tol)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    _emit(res.to_json(), args, "qv_path")
    return 0


def _load_strategy(file) -> SimpleStrategy:
    return SimpleStrategy.from_dict(json.loads(Path(file).read_text()))


def _cmd_integrate(args) -> int:
    path = read_path_csv(args.path)
    H = _load_strategy(args.H)
    out = {"t": path.times.tolist(), "H_dot_S": integral_S(H, path).values.tolist()}
    if args.G:
        G = _load_strategy(args.G)
        res = pathwise_qv_quiet(path, QvConfig(1, args.m_max, args.qv_tol))
        try:
            gi = generalized_integral(H, G, path, res)
        except NotInOmegaError as e:
            print(f"error: {e}", file=sys.stderr)
            return 1
        out["total"] = gi.total.values.tolist()
        out["level_gaps"] = {str(k): v for k, v in gi.gaps.items()}
    _emit(out, args, "integrate")
    return 0


def _cmd_check_set(args) -> int:
    spec = load_spec(args.set_file)
    path = read_path_csv(args.path)
    tol = args.tol if args.tol is not None else 1e-6
    if args.qv_path:
        report = contains(spec, LiftedPath(path, read_path_csv(args.qv_path)), tol)
    else:
        _, report = build_qv_and_check(spec, path, QvConfig(), tol)
    _emit(report.to_json(), args, "check_set")
    return 1 if args.require_member and not report.member else 0


def _cmd_dual(args) -> int:
    cfg = _config(args, "dual")
    tree = ex.config_tree(cfg)
    payoff = ex._payoff(cfg, EuropeanCall(cfg.K))
    res = dual_recursion(tree, (cfg.sigma_lo, cfg.sigma_hi), payoff) if args.method == "recursion" else dual_polytope(tree, payoff)
    fwd = forward_expectation(tree, res.argmax_measure, payoff)
    ok = abs(fwd - res.value) <= 1e-9
    out = res.to_json()
    out.pop("argmax_measure")  # large; the chosen variances stay in diagnostics
    out["forward_check"] = abs(fwd - res.value)
    out["passed"] = ok
    _emit(out, args, "dual")
    return 0 if ok else 1


def _cmd_primal(args) -> int:
    cfg = _config(args, "primal")
    tree = ex.config_tree(cfg)
    payoff = ex._payoff(cfg, EuropeanCall(cfg.K))
    assets = ("S", "SS") if args.assets == "S+SS" else ("S",)
    res = superhedge_lp(tree, payoff=payoff, assets=assets)
    if args.lp_out:
        Path(args.lp_out).write_text(res.lp.to_lp_format())
    ver = verify_hedge(tree, None, payoff, res, seed=cfg.seed) if res.status == "optimal" else None
    out = {"lambda_star": res.to_json()["lambda_star"], "status": res.status, "formulation": res.formulation,
           "verified": None if ver is None else ver.passed,
           "worst_terminal_margin": None if ver is None else ver.worst_terminal_margin}
    _emit(out, args, "primal")
    return 0 if ver is not None and ver.passed else 1


COMMANDS = {
    "qv": _cmd_qv,
    "integrate": _cmd_integrate,
    "check-set": _cmd_check_set,
    "dual": _cmd_dual,
    "primal": _cmd_primal,
    "duality": lambda a: _run_report(a, "duality"),
    "moments": lambda a: _run_report(a, "moments"),
    "stop-closure": lambda a: _run_report(a, "stop-closure"),
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ex.ConfigError, PathDomainError, FileNotFoundError, KeyError, ValueError,
            json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
