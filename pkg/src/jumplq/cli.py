"""Batch command-line front end.

Scalar results are written as JSON, time-indexed arrays as CSV. Every JSON
payload records the seed and path count; when a CSV goes to a file, a
``<file>.meta.json`` sidecar records the run parameters. Timing goes under a
separate ``timing`` key so reruns give identical numeric payloads.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import examples as ex_mod
from .costs import mc_cost
from .errors import ConfigError, LQError, StructureViolation
from .laws import Feedback, OpenLoopTable, Zero
from .model import LQProblem, validate_problem
from .riccati import DEFAULT_RICCATI_STEPS, closed_loop_jump_multiplier, solve_riccati
from .simulate import DEFAULT_SIM_STEPS, TimeGrid, simulate_state
from .verify import (VerificationReport, check_unifconvex_phi, completion_of_squares_report,
                     convexity_gram, optimality_reports, reports_to_json)

# default run parameters and tolerances, in one place
DEFAULTS = {
    "paths": 10_000,
    "seed": 0,
    "knots": DEFAULT_RICCATI_STEPS,
    "sim_steps": DEFAULT_SIM_STEPS,
    "intervals": 8,
    "stderr_multiple": 3.0,
    "challengers": ("zero", "1", "-0.5"),
}


@dataclass
class RunConfig:
    subcommand: str
    builtin: str | None = None
    config: str | None = None
    paths: int = DEFAULTS["paths"]
    seed: int = DEFAULTS["seed"]
    step: float | None = None
    knots: int = DEFAULTS["knots"]
    out: str | None = None
    format: str | None = None
    strict: bool = False
    xi: list[float] | None = None
    law: str = "feedback"
    workers: int = 1
    extra: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# problem loading
# ---------------------------------------------------------------------------


def load_config(path: str) -> dict:
    """Read a JSON problem config, reporting the line and column of syntax errors."""
    text = Path(path).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None


def load_problem(cfg: RunConfig) -> tuple[LQProblem, dict]:
    """The problem named by ``--builtin`` or described by ``--config``, plus its defaults."""
    if bool(cfg.builtin) == bool(cfg.config):
        raise ConfigError("give exactly one of --builtin or --config")
    if cfg.builtin:
        b = ex_mod.builtin(cfg.builtin)
        return b.problem, dict(b.defaults)
    raw = load_config(cfg.config)
    try:
        problem = validate_problem(raw)
    except LQError as exc:
        raise type(exc)(f"{cfg.config}: {exc}") from None
    defaults = {}
    if "builtin" in raw:
        defaults = dict(ex_mod.builtin(raw["builtin"], **dict(raw.get("params") or {})).defaults)
    if "xi" in raw:
        defaults["xi"] = raw["xi"]
    return problem, defaults


def _xi(cfg: RunConfig, problem: LQProblem, defaults: dict) -> np.ndarray:
    xi = cfg.xi if cfg.xi is not None else defaults.get("xi", np.zeros(problem.n))
    xi = np.asarray(xi, dtype=float).reshape(-1)
    if xi.size != problem.n:
        raise ConfigError(f"--xi has {xi.size} entries, the state has dimension {problem.n}")
    return xi


def _sim_grid(cfg: RunConfig, problem: LQProblem) -> TimeGrid:
    if cfg.step is not None:
        return TimeGrid.for_problem(problem, h=cfg.step)
    return TimeGrid.for_problem(problem)


def _riccati_grid(cfg: RunConfig, problem: LQProblem) -> TimeGrid:
    return TimeGrid.uniform(problem.t0, problem.T, cfg.knots)


def parse_law(spec: str, problem: LQProblem, sol_factory):
    """``zero``, ``feedback`` or a comma-separated constant control such as ``1`` or ``0.5,-1``."""
    s = spec.strip().lower()
    if s == "zero":
        return Zero()
    if s == "feedback":
        return Feedback(sol_factory())
    try:
        values = [float(v) for v in s.split(",")]
    except ValueError:
        raise ConfigError(f"unknown law {spec!r}; use zero, feedback or numbers") from None
    if len(values) not in (1, problem.m):
        raise ConfigError(f"constant law has {len(values)} entries, the control has dimension {problem.m}")
    return OpenLoopTable.constant(np.broadcast_to(values, (problem.m,)), problem.t0, problem.T)


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------


def _emit_text(cfg: RunConfig, text: str, meta: dict | None = None) -> None:
    if cfg.out:
        Path(cfg.out).write_text(text)
        if meta is not None:
            Path(cfg.out + ".meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    else:
        sys.stdout.write(text)


def _emit_json(cfg: RunConfig, payload: dict) -> None:
    _emit_text(cfg, json.dumps(payload, indent=2, default=_default) + "\n")


def _default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _run_meta(cfg: RunConfig, problem: LQProblem, **more) -> dict:
    meta = {"command": cfg.subcommand, "problem": problem.name or cfg.config,
            "seed": cfg.seed, "n_paths": cfg.paths}
    meta.update(more)
    return meta


def _split_timing(d: dict) -> tuple[dict, dict]:
    d = dict(d)
    wt = d.pop("wall_time", None)
    return d, ({"wall_time": wt} if wt is not None else {})


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_riccati(cfg: RunConfig) -> int:
    problem, _ = load_problem(cfg)
    sol = solve_riccati(problem, _riccati_grid(cfg, problem))
    meta = _run_meta(cfg, problem, knots=cfg.knots, seed=None, n_paths=None,
                     min_eig_R_hat=float(np.min(sol.min_eig_R_hat)),
                     jump_multiplier_min_abs_det=sol.jump_multiplier_min_abs_det)
    if (cfg.format or "csv") == "json":
        _emit_json(cfg, {**meta, "t": sol.t, "P": sol.P, "Theta": sol.Theta,
                         "R_hat": sol.R_hat, "S_hat": sol.S_hat})
        return 0
    buf = io.StringIO()
    sol.to_csv(buf)
    _emit_text(cfg, buf.getvalue(), meta)
    return 0


def cmd_simulate(cfg: RunConfig) -> int:
    problem, defaults = load_problem(cfg)
    xi = _xi(cfg, problem, defaults)
    law = parse_law(cfg.law, problem, lambda: solve_riccati(problem, _riccati_grid(cfg, problem)))
    index = int(cfg.extra.get("index", 0))
    path = simulate_state(problem, law, xi, _sim_grid(cfg, problem), seed=cfg.seed, index=index)
    meta = _run_meta(cfg, problem, n_paths=1, path_index=index, law=cfg.law, xi=xi.tolist(),
                     n_jumps=len(path.events))
    if (cfg.format or "csv") == "json":
        _emit_json(cfg, {**meta, "t": path.t, "X": path.X, "u": path.u,
                         "jump_times": [e.time for e in path.events],
                         "jump_marks": [e.mark_id for e in path.events]})
        return 0
    buf = io.StringIO()
    path.to_csv(buf, problem.jump_measure.ids)
    _emit_text(cfg, buf.getvalue(), meta)
    return 0


def cmd_cost(cfg: RunConfig) -> int:
    problem, defaults = load_problem(cfg)
    xi = _xi(cfg, problem, defaults)
    law = parse_law(cfg.law, problem, lambda: solve_riccati(problem, _riccati_grid(cfg, problem)))
    est = mc_cost(problem, law, xi, cfg.paths, cfg.seed, _sim_grid(cfg, problem), workers=cfg.workers)
    body, timing = _split_timing(est.as_dict())
    payload = {**_run_meta(cfg, problem, law=cfg.law, xi=xi.tolist()), **body, "timing": timing}
    if cfg.format == "csv":
        keys = ["mean", "stderr", "n_paths", "seed", "confidence_level"]
        _emit_text(cfg, _csv_text(keys, [[payload[k] for k in keys]]))
        return 0
    _emit_json(cfg, payload)
    return 0


def verification_bundle(problem: LQProblem, xi, n_paths: int, seed: int, sim_grid: TimeGrid,
                        ric_grid: TimeGrid, *, workers: int = 1,
                        delta: float | None = None) -> tuple[list[VerificationReport], dict]:
    """All generic checks that apply to a deterministic problem."""
    sol = solve_riccati(problem, ric_grid)
    challengers = [parse_law(c, problem, None) for c in DEFAULTS["challengers"]]
    reports = []
    for law in [*challengers, Feedback(sol)]:
        reports.append(completion_of_squares_report(problem, sol, law, xi, n_paths, seed,
                                                    sim_grid, workers=workers))
    reports += optimality_reports(problem, sol, xi, challengers, n_paths, seed, sim_grid,
                                  workers=workers)
    extra = {"min_eig_R_hat": float(np.min(sol.min_eig_R_hat)),
             "jump_multiplier": asdict(closed_loop_jump_multiplier(problem, sol))}
    if delta is not None:
        try:
            reports.append(check_unifconvex_phi(problem, delta, ric_grid))
        except StructureViolation as exc:
            extra["unifconvex_phi"] = f"not applicable: {exc}"
    return reports, extra


def cmd_verify(cfg: RunConfig) -> int:
    problem, defaults = load_problem(cfg)
    start = time.perf_counter()
    if problem.weights.pathwise is not None:
        if cfg.builtin != "example_9_3":
            raise ConfigError("verify supports pathwise weights only for example_9_3")
        reports = ex_mod.malliavin_verify(cfg.paths, cfg.seed, _sim_grid(cfg, problem),
                                          T=problem.T, workers=cfg.workers)
        extra = {}
    else:
        xi = _xi(cfg, problem, defaults)
        reports, extra = verification_bundle(problem, xi, cfg.paths, cfg.seed,
                                             _sim_grid(cfg, problem), _riccati_grid(cfg, problem),
                                             workers=cfg.workers, delta=cfg.extra.get("delta"))
    ok = all(r.passed for r in reports)
    if cfg.format == "csv":
        rows = [[r.name, r.statistic, r.lower, r.upper, r.passed] for r in reports]
        _emit_text(cfg, _csv_text(["name", "statistic", "lower", "upper", "passed"], rows),
                   _run_meta(cfg, problem))
    else:
        body = json.loads(reports_to_json(reports, **_run_meta(cfg, problem)))
        body["details"] = extra
        body["timing"] = {"wall_time": time.perf_counter() - start}
        _emit_json(cfg, body)
    return 1 if (cfg.strict and not ok) else 0


def cmd_convexity(cfg: RunConfig) -> int:
    problem, _ = load_problem(cfg)
    n_int = int(cfg.extra.get("intervals", DEFAULTS["intervals"]))
    start = time.perf_counter()
    g = convexity_gram(problem, n_int, cfg.paths, cfg.seed, _sim_grid(cfg, problem),
                       workers=cfg.workers)
    if cfg.format == "csv":
        _emit_text(cfg, _csv_text([f"e{j}" for j in range(g.gram.shape[1])], g.gram.tolist()),
                   _run_meta(cfg, problem, intervals=n_int, eps_hat=g.eps_hat))
        return 0
    _emit_json(cfg, {**_run_meta(cfg, problem, intervals=n_int), **g.as_dict(),
                     "timing": {"wall_time": time.perf_counter() - start}})
    return 0


def cmd_examples(cfg: RunConfig) -> int:
    action = cfg.extra.get("action")
    if action == "list":
        items = [{"name": n, "description": ex_mod.DESCRIPTIONS[n]} for n in ex_mod.names()]
        if cfg.format == "csv":
            _emit_text(cfg, _csv_text(["name", "description"], [[i["name"], i["description"]] for i in items]))
        else:
            _emit_json(cfg, {"examples": items})
        return 0
    name = cfg.extra.get("name")
    if not name:
        raise ConfigError("examples run needs an example name")
    rows = ex_mod.run_example(name, cfg.paths, cfg.seed, include_gram=bool(cfg.extra.get("gram")),
                              workers=cfg.workers)
    ok = all(r.passed is not False for r in rows)
    if cfg.format == "csv":
        keys = ["quantity", "expected", "measured", "error", "tolerance", "passed", "source", "note"]
        _emit_text(cfg, _csv_text(keys, [[r.as_dict()[k] for k in keys] for r in rows]),
                   {"example": name, "seed": cfg.seed, "n_paths": cfg.paths})
    else:
        _emit_json(cfg, {"example": name, "seed": cfg.seed, "n_paths": cfg.paths,
                         "all_passed": ok, "manifest": [r.as_dict() for r in rows]})
    return 1 if (cfg.strict and not ok) else 0


COMMANDS = {"riccati": cmd_riccati, "simulate": cmd_simulate, "cost": cmd_cost,
            "verify": cmd_verify, "convexity": cmd_convexity, "examples": cmd_examples}


def run(cfg: RunConfig) -> int:
    """Dispatch one command; returns the process exit status."""
    return COMMANDS[cfg.subcommand](cfg)


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    src = common.add_argument_group("problem")
    src.add_argument("--builtin", help="name of a built-in problem (see 'examples list')")
    src.add_argument("--config", help="JSON problem config")
    run_opts = common.add_argument_group("run")
    run_opts.add_argument("--paths", type=int, default=DEFAULTS["paths"], help="Monte-Carlo paths")
    run_opts.add_argument("--seed", type=int, default=DEFAULTS["seed"])
    run_opts.add_argument("--step", type=float, help="simulation step (default: horizon / %d)"
                          % DEFAULTS["sim_steps"])
    run_opts.add_argument("--knots", type=int, default=DEFAULTS["knots"],
                          help="number of Riccati grid intervals")
    run_opts.add_argument("--workers", type=int, default=1, help="threads for Monte-Carlo chunks")
    out = common.add_argument_group("output")
    out.add_argument("--out", help="output file (default: stdout)")
    out.add_argument("--format", choices=("json", "csv"))
    out.add_argument("--strict", action="store_true", help="nonzero exit when any check fails")

    p = argparse.ArgumentParser(prog="jumplq", description="LQ control of jump-diffusions")
    sub = p.add_subparsers(dest="subcommand", required=True)
    sub.add_parser("riccati", parents=[common], help="solve the Riccati equation, dump the solution")
    for name, helptext in (("simulate", "simulate one controlled path"),
                           ("cost", "Monte-Carlo cost estimate")):
        sp = sub.add_parser(name, parents=[common], help=helptext)
        sp.add_argument("--xi", type=_floats, help="initial state, e.g. 1,1")
        sp.add_argument("--law", default="feedback", help="zero, feedback or constant values")
        if name == "simulate":
            sp.add_argument("--index", type=int, default=0, help="path index within the seed")
    sp = sub.add_parser("verify", parents=[common], help="run the verification checks")
    sp.add_argument("--xi", type=_floats)
    sp.add_argument("--delta", type=float, help="also run the Phi criterion with this delta")
    sp = sub.add_parser("convexity", parents=[common], help="Gram matrix and coercivity estimate")
    sp.add_argument("--intervals", type=int, default=DEFAULTS["intervals"])
    ex = sub.add_parser("examples", help="built-in examples")
    ex_sub = ex.add_subparsers(dest="action", required=True)
    ex_sub.add_parser("list", parents=[common])
    er = ex_sub.add_parser("run", parents=[common])
    er.add_argument("name", choices=ex_mod.names())
    er.add_argument("--gram", action="store_true", help="also estimate the convexity constant")
    return p


def config_from_args(ns: argparse.Namespace) -> RunConfig:
    extra = {k: getattr(ns, k) for k in ("index", "delta", "intervals", "action", "name", "gram")
             if getattr(ns, k, None) is not None}
    return RunConfig(subcommand=ns.subcommand, builtin=ns.builtin, config=ns.config,
                     paths=ns.paths, seed=ns.seed, step=ns.step, knots=ns.knots, out=ns.out,
                     format=ns.format, strict=ns.strict, xi=getattr(ns, "xi", None),
                     law=getattr(ns, "law", "feedback"), workers=ns.workers, extra=extra)


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    cfg = config_from_args(ns)
    try:
        return run(cfg)
    except (LQError, FileNotFoundError) as exc:
        print(f"jumplq {cfg.subcommand}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
