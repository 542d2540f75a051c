"""Command-line front end: JSON config in, CSV tables and JSON reports out.

Exit codes: 0 when every assertion in the report holds, 1 when one fails,
2 for configuration errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import generators as gen
from .decomp import backward_reflection, doob_meyer
from .nlexp import DriftBoundError, check_drift_bound, conditional_inf, conditional_sup
from .pathspace import PathTree, StoppingRegion, TreeProcess, format_label
from .regularize import inf_convolution, is_n_lipschitz, sup_convolution
from .snell import snell_drift, snell_envelope
from .solver import (
    FamilySpec,
    build_subsolution_family,
    comparison_check,
    default_tol,
    horizon_region,
    perron_construct,
    ppde_solve,
    pucci_max_principle,
    remaining,
)
from .viscosity import JetSample, check_subsolution, check_supersolution

SIG = 12


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


# ---------------------------------------------------------------------------
# Payoff registry: functions of (t, path matrix, params, rng) -> one value per row

PayoffFn = Callable[[float, np.ndarray, dict, np.random.Generator], np.ndarray]


def _payoff_levels(t, paths, p, rng):
    table = p["values"]
    level = paths.shape[1] - 1
    row = np.asarray(table[level], dtype=float)
    if row.shape != (paths.shape[0],):
        raise ConfigError("obstacle.params.values", f"level {level} needs {paths.shape[0]} values")
    return row


PAYOFFS: dict[str, dict] = {
    "zero": {"fn": lambda t, x, p, r: np.zeros(x.shape[0]), "params": {}},
    "constant": {"fn": lambda t, x, p, r: np.full(x.shape[0], float(p["c"])), "params": {"c": 1.0}},
    "brownian": {"fn": lambda t, x, p, r: p["scale"] * x[:, -1], "params": {"scale": 1.0}},
    "call": {"fn": lambda t, x, p, r: np.maximum(x[:, -1] - p["K"], 0.0), "params": {"K": 0.0}},
    "put": {"fn": lambda t, x, p, r: np.maximum(p["K"] - x[:, -1], 0.0), "params": {"K": 0.0}},
    "running_max": {"fn": lambda t, x, p, r: x.max(axis=1), "params": {}},
    "time": {"fn": lambda t, x, p, r: np.full(x.shape[0], t), "params": {}},
    "random": {"fn": lambda t, x, p, r: r.uniform(p["lo"], p["hi"], x.shape[0]),
               "params": {"lo": -1.0, "hi": 1.0}},
    "levels": {"fn": _payoff_levels, "params": {"values": []}},
}


def payoff_process(tree: PathTree, spec: dict, rng: np.random.Generator, where: str) -> TreeProcess:
    name = spec.get("name")
    if name not in PAYOFFS:
        raise ConfigError(f"{where}.name", f"unknown payoff {name!r}; known: {sorted(PAYOFFS)}")
    entry = PAYOFFS[name]
    params = {**entry["params"], **spec.get("params", {})}
    unknown = set(params) - set(entry["params"])
    if unknown:
        raise ConfigError(f"{where}.params", f"unknown parameters {sorted(unknown)}")
    levels = [np.asarray(entry["fn"](tree.time(k), tree.path_matrix(k), params, rng), float)
              for k in tree.levels()]
    return TreeProcess(tree, levels)


def terminal_values(tree: PathTree, spec: dict, rng: np.random.Generator) -> np.ndarray:
    name = spec.get("name")
    if name == "random":
        entry = PAYOFFS["random"]
        params = {**entry["params"], **spec.get("params", {})}
        return rng.uniform(params["lo"], params["hi"], tree.n_leaves)
    if name == "leaves":
        vals = np.asarray(spec.get("params", {}).get("values", []), float)
        if vals.shape != (tree.n_leaves,):
            raise ConfigError("terminal.params.values", f"need {tree.n_leaves} values")
        return vals
    return payoff_process(tree, spec, rng, "terminal").leaves


# ---------------------------------------------------------------------------
# Config


OPERATIONS = ("solve", "perron", "compare", "maxprinciple", "snell", "decompose",
              "regularize", "check", "expect")


@dataclass
class ExperimentConfig:
    operation: str
    tree: PathTree
    generator: gen.Generator
    generator_spec: dict
    terminal: dict
    obstacle: dict
    L: float = 0.0
    tol: float | None = None
    seed: int = 0
    family_spec: FamilySpec = field(default_factory=FamilySpec)
    options: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: dict, operation: str | None = None) -> "ExperimentConfig":
        op = operation or data.get("operation")
        if op not in OPERATIONS:
            raise ConfigError("operation", f"expected one of {list(OPERATIONS)}, got {op!r}")
        tdata = data.get("tree", {})
        try:
            depth, dt = int(tdata["depth"]), float(tdata["dt"])
        except (KeyError, TypeError, ValueError):
            raise ConfigError("tree", "needs integer depth and float dt") from None
        if depth < 1:
            raise ConfigError("tree.depth", "must be >= 1")
        if not dt > 0:
            raise ConfigError("tree.dt", "must be positive")
        try:
            tree = PathTree(depth, dt)
        except ValueError as exc:
            raise ConfigError("tree", str(exc)) from None
        gspec = data.get("generator", {"name": "zero"})
        try:
            F = gen.make(gspec.get("name", "zero"), **gspec.get("params", {}))
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError("generator", str(exc)) from None
        L = float(data.get("L", 0.0))
        for name, value in (("generator.lipschitz", F.lipschitz), ("L", L)):
            try:
                check_drift_bound(value, dt)
            except DriftBoundError as exc:
                raise ConfigError(name, str(exc)) from None
        tol = data.get("tol")
        try:
            family = FamilySpec.from_dict(data.get("family_spec", {}))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError("family_spec", str(exc)) from None
        return cls(
            operation=op,
            tree=tree,
            generator=F,
            generator_spec={"name": gspec.get("name", "zero"), "params": gspec.get("params", {})},
            terminal=data.get("terminal", {"name": "zero"}),
            obstacle=data.get("obstacle", {"name": "zero"}),
            L=L,
            tol=None if tol is None else float(tol),
            seed=int(data.get("seed", 0)),
            family_spec=family,
            options=dict(data.get("options", {})),
        )


# ---------------------------------------------------------------------------
# Output


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x) or math.isinf(x):
            return str(x)
        return format(x, f".{SIG}g")
    return str(x)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x) or math.isinf(x):
            return str(x)
        return float(format(x, f".{SIG}g"))
    return obj


def write_json(path: Path, data: dict) -> None:
    path.write_text(json.dumps(_jsonable(data), indent=2, sort_keys=True) + "\n")


def write_csv(path: Path, header: list[str], rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def node_rows(tree: PathTree, *cols: TreeProcess):
    for k in tree.levels():
        vals = tree.values(k)
        for i in range(2**k):
            yield [format_label(k, i), tree.time(k), vals[i]] + [c.levels[k][i] for c in cols]


@dataclass
class Outcome:
    passed: bool
    report: dict
    tables: dict[str, tuple[list[str], list]] = field(default_factory=dict)
    summary: list[tuple[str, object]] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Operations


def _tol(cfg: ExperimentConfig, F: gen.Generator, xi) -> float:
    return cfg.tol if cfg.tol is not None else default_tol(cfg.tree, F, xi)


def _sample(cfg: ExperimentConfig) -> JetSample:
    opts = cfg.options
    hitting = tuple(tuple(h) for h in opts.get("hitting", [(3, 1.5)]))
    betas = opts.get("betas")
    return JetSample(betas=None if betas is None else tuple(betas), hitting=hitting)


def op_solve(cfg: ExperimentConfig, rng) -> Outcome:
    xi = terminal_values(cfg.tree, cfg.terminal, rng)
    u = ppde_solve(cfg.generator, xi, cfg.tree)
    report = {"generator": cfg.generator_spec, "root": u.root, "sup_norm": u.sup_norm()}
    return Outcome(True, report, {"values": (["node", "t", "x", "u"], list(node_rows(cfg.tree, u)))},
                   [("root", u.root)])


def op_perron(cfg: ExperimentConfig, rng, threads) -> Outcome:
    F = cfg.generator
    xi = terminal_values(cfg.tree, cfg.terminal, rng)
    tol = _tol(cfg, F, xi)
    fam = build_subsolution_family(F, xi, cfg.tree, cfg.family_spec, tol, _sample(cfg), threads)
    u = ppde_solve(F, xi, cfg.tree)
    report = {"generator": cfg.generator_spec, "family_spec": cfg.family_spec.to_dict(),
              "members": fam.provenance, "dropped": fam.dropped, "tol": tol,
              "note": "bounds are oracle -+ slack, members screened by the sampled checker"}
    if not fam.members:
        report["error"] = "empty family"
        return Outcome(False, report, summary=[("members", 0)])
    P = perron_construct(F, fam)
    chk = check_subsolution(P.value, F, _sample(cfg), tol=tol)
    over = float(np.max(P.value.flat() - u.flat()))
    gap = u.root - P.value.root
    passed = chk.passed and over <= tol
    report.update({"perron_check": chk.to_dict(), "max_above_oracle": over, "root_gap": gap,
                   "passed": passed})
    arg = TreeProcess(cfg.tree, [a.astype(float) for a in P.argmax])
    table = (["node", "t", "x", "perron", "oracle", "member"], list(node_rows(cfg.tree, P.value, u, arg)))
    return Outcome(passed, report, {"values": table},
                   [("members", len(fam)), ("dropped", len(fam.dropped)), ("root_gap", gap),
                    ("subsolution", chk.passed)])


def _shifted(cfg: ExperimentConfig, u: TreeProcess, key: str, offset: float, slope: float) -> TreeProcess:
    o = cfg.options.get(key, {})
    return u + float(o.get("offset", offset)) + remaining(cfg.tree) * float(o.get("slope", slope))


def op_compare(cfg: ExperimentConfig, rng) -> Outcome:
    F = cfg.generator
    xi = terminal_values(cfg.tree, cfg.terminal, rng)
    tol = _tol(cfg, F, xi)
    u0 = ppde_solve(F, xi, cfg.tree)
    u = _shifted(cfg, u0, "u", 0.0, -0.1)
    v = _shifted(cfg, u0, "v", 0.0, 0.1)
    sub = check_subsolution(u, F, _sample(cfg), tol=tol)
    sup = check_supersolution(v, F, _sample(cfg), tol=tol)
    rep = comparison_check(u, v, tol, sub, sup)
    out = rep.to_dict()
    out.update({"generator": cfg.generator_spec, "u_check": sub.to_dict(), "v_check": sup.to_dict()})
    table = (["node", "t", "x", "u", "v"], list(node_rows(cfg.tree, u, v)))
    return Outcome(rep.passed, out, {"values": table},
                   [("terminal_ok", rep.terminal_ok), ("violations", len(rep.violations)),
                    ("max_gap", rep.max_gap)])


def op_maxprinciple(cfg: ExperimentConfig, rng) -> Outcome:
    L = float(cfg.options.get("L", cfg.L))
    xi = terminal_values(cfg.tree, cfg.terminal, rng)
    u = ppde_solve(gen.pucci_plus(L), xi, cfg.tree)
    u = u + float(cfg.options.get("offset", 0.0))
    rep = pucci_max_principle(u, L, n=float(cfg.options.get("n", 8.0)),
                              m=float(cfg.options.get("m", 4.0)), tol=cfg.tol, sample=_sample(cfg))
    table = (["node", "t", "x", "u"], list(node_rows(cfg.tree, u)))
    return Outcome(rep.passed, rep.to_dict(), {"values": table},
                   [("terminal_ok", rep.terminal_ok), ("max_u", rep.max_gap)])


def _horizon(cfg: ExperimentConfig) -> StoppingRegion:
    spec = cfg.options.get("horizon")
    return StoppingRegion.leaves(cfg.tree) if spec is None else horizon_region(cfg.tree, spec)


def op_snell(cfg: ExperimentConfig, rng) -> Outcome:
    X = payoff_process(cfg.tree, cfg.obstacle, rng, "obstacle")
    res = snell_envelope(X, _horizon(cfg), cfg.L)
    stop = TreeProcess(cfg.tree, [m.astype(float) for m in res.optimal_region.marks])
    report = {"value": res.value, "L": cfg.L, "tau_star": res.optimal_region.labels()}
    table = (["node", "t", "x", "X", "Y", "tau_star"], list(node_rows(cfg.tree, X, res.envelope, stop)))
    return Outcome(True, report, {"values": table}, [("Y0", res.value)])


def op_decompose(cfg: ExperimentConfig, rng) -> Outcome:
    X = payoff_process(cfg.tree, cfg.obstacle, rng, "obstacle")
    res = snell_envelope(X, _horizon(cfg), cfg.L)
    mu = snell_drift(res)
    dm = doob_meyer(res.envelope, mu)
    refl = backward_reflection(X, res, mu)
    reassembly = dm.reassemble().max_abs_diff(res.envelope)
    passed = refl.exact and reassembly <= 1e-12 * max(1.0, res.envelope.sup_norm())
    report = {"value": res.value, "L": cfg.L, "reassembly_error": reassembly,
              "reflection": refl.to_dict(), "passed": passed}
    table = (["node", "t", "x", "Y", "M", "A"], list(node_rows(cfg.tree, res.envelope, dm.M, dm.A)))
    return Outcome(passed, report, {"values": table},
                   [("Y0", res.value), ("reflection_deviation", refl.max_deviation)])


def op_regularize(cfg: ExperimentConfig, rng, n: float, mode: str) -> Outcome:
    X = payoff_process(cfg.tree, cfg.obstacle, rng, "obstacle")
    res = sup_convolution(X, n) if mode == "sup" else inf_convolution(X, n)
    R = res.regularized
    side = (R.flat() >= X.flat()).all() if mode == "sup" else (R.flat() <= X.flat()).all()
    lip_ok, worst = is_n_lipschitz(R, n)
    passed = bool(side and lip_ok)
    report = {"n": n, "mode": mode, "M": res.M, "threshold": res.threshold,
              "ordered": bool(side), "lipschitz_excess": worst, "passed": passed,
              "leaf_only": res.leaf_only_labels()}
    table = (["node", "t", "x", "original", "regularized"], list(node_rows(cfg.tree, X, R)))
    return Outcome(passed, report, {"values": table}, [("ordered", side), ("lipschitz", lip_ok)])


def op_check(cfg: ExperimentConfig, rng, role: str, generator: str | None) -> Outcome:
    F = cfg.generator if generator is None else gen.make(generator)
    xi = terminal_values(cfg.tree, cfg.terminal, rng)
    tol = _tol(cfg, F, xi)
    u = ppde_solve(F, xi, cfg.tree)
    u = _shifted(cfg, u, "u", 0.0, 0.0)
    fn = check_subsolution if role == "sub" else check_supersolution
    rep = fn(u, F, _sample(cfg), tol=tol)
    print(rep.summary())
    table = (["node", "t", "x", "u"], list(node_rows(cfg.tree, u)))
    return Outcome(rep.passed, rep.to_dict(), {"values": table},
                   [("violations", len(rep.violations)), ("max_margin", rep.max_margin)])


def op_expect(cfg: ExperimentConfig, rng) -> Outcome:
    xi = terminal_values(cfg.tree, cfg.terminal, rng)
    X = TreeProcess.from_leaves(cfg.tree, xi)
    up = conditional_sup(X, None, cfg.L)
    lo = conditional_inf(X, None, cfg.L)
    report = {"L": cfg.L, "sup": up.root, "inf": lo.root}
    table = (["node", "t", "x", "sup", "inf"], list(node_rows(cfg.tree, up, lo)))
    return Outcome(True, report, {"values": table}, [("sup", up.root), ("inf", lo.root)])


def list_registry() -> str:
    lines = ["generators:"]
    for e in gen.describe_registry():
        lines.append(f"  {e['name']}: params {json.dumps(e['params'], sort_keys=True)}; rho: {e['rho']}")
    lines.append("terminals and obstacles:")
    for name in sorted(PAYOFFS):
        lines.append(f"  {name}: params {json.dumps(PAYOFFS[name]['params'], sort_keys=True)}")
    lines.append("  leaves (terminal only): params {\"values\": [...one per leaf]}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ppde-lab", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config (JSON)")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    common.add_argument("--tol", type=float, help="override the tolerance")
    common.add_argument("--seed", type=int, help="seed for randomized fixtures")
    common.add_argument("--threads", type=int, help="worker threads (falls back to PPDE_LAB_THREADS)")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in OPERATIONS:
        p = sub.add_parser(name, parents=[common])
        if name == "regularize":
            p.add_argument("--n", type=float, default=4.0)
            p.add_argument("--mode", choices=("sup", "inf"), default="sup")
        if name == "check":
            p.add_argument("--role", choices=("sub", "super"), default="sub")
            p.add_argument("--generator")
    sub.add_parser("registry")
    return parser


def run(cfg: ExperimentConfig, args: argparse.Namespace) -> Outcome:
    rng = np.random.default_rng(cfg.seed)
    threads = args.threads or int(os.environ.get("PPDE_LAB_THREADS", "1") or 1)
    op = cfg.operation
    if op == "solve":
        return op_solve(cfg, rng)
    if op == "perron":
        return op_perron(cfg, rng, threads)
    if op == "compare":
        return op_compare(cfg, rng)
    if op == "maxprinciple":
        return op_maxprinciple(cfg, rng)
    if op == "snell":
        return op_snell(cfg, rng)
    if op == "decompose":
        return op_decompose(cfg, rng)
    if op == "regularize":
        return op_regularize(cfg, rng, args.n, args.mode)
    if op == "check":
        return op_check(cfg, rng, args.role, args.generator)
    return op_expect(cfg, rng)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "registry":
        print(list_registry())
        return 0
    try:
        data = json.loads(args.config.read_text()) if args.config else {}
        if args.tol is not None:
            data["tol"] = args.tol
        if args.seed is not None:
            data["seed"] = args.seed
        cfg = ExperimentConfig.from_dict(data, args.command)
        outcome = run(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    args.out.mkdir(parents=True, exist_ok=True)
    report = {"operation": cfg.operation, "passed": outcome.passed, "seed": cfg.seed,
              "tree": {"depth": cfg.tree.depth, "dt": cfg.tree.dt}, **outcome.report}
    report["passed"] = outcome.passed
    write_json(args.out / "report.json", report)
    for name, (header, rows) in outcome.tables.items():
        write_csv(args.out / f"{name}.csv", header, rows)
    width = max([len(k) for k, _ in outcome.summary] + [len("operation")])
    print(f"{'operation':<{width}}  {cfg.operation}")
    for key, value in outcome.summary:
        print(f"{key:<{width}}  {fmt(value)}")
    print(f"{'status':<{width}}  {'PASS' if outcome.passed else 'FAIL'}")
    return 0 if outcome.passed else 1
