"""Command-line entry points: ``generate``, ``run``, ``sweep`` and ``report``.

Exit codes
----------
0  success
2  invalid flags or empty grid
3  instance generation failed
4  missing, unreadable or empty input
5  no solution for a task
"""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .delay_model import PriorConfig
from .experiment import (
    CSV_FIELDS,
    ExperimentConfig,
    derive_seed,
    run_suite,
    write_results,
    write_rows,
)
from .graph_model import GenerationFailed, Instance, generate_instance
from .planner import MODES, NoSolution

EXIT_OK, EXIT_USAGE, EXIT_GENERATION, EXIT_INPUT, EXIT_NO_SOLUTION = 0, 2, 3, 4, 5
CELL_STREAM = 3


class UsageError(Exception):
    pass


def _float_list(text: str) -> list[float]:
    vals = [t for t in text.split(",") if t.strip()]
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return [float(t) for t in vals]


def _int_list(text: str) -> list[int]:
    vals = [t for t in text.split(",") if t.strip()]
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return [int(t) for t in vals]


def _str_list(text: str) -> list[str]:
    vals = [t.strip() for t in text.split(",") if t.strip()]
    if not vals or any(v not in MODES for v in vals):
        raise argparse.ArgumentTypeError(f"modes must be drawn from {MODES}")
    return vals


def _prior(text: str) -> PriorConfig:
    try:
        return PriorConfig.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _bool_list(text: str) -> list[bool]:
    table = {"1": True, "0": False, "true": True, "false": False, "on": True, "off": False}
    vals = [t.strip().lower() for t in text.split(",") if t.strip()]
    if not vals or any(v not in table for v in vals):
        raise argparse.ArgumentTypeError("expected a list of on/off values")
    return [table[v] for v in vals]


def _add_experiment_flags(p: argparse.ArgumentParser, grid: bool) -> None:
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--map", type=Path, required=not grid, help="instance JSON from `generate`")
    if grid:
        p.add_argument("--mode", type=_str_list, default=["gstt"])
        p.add_argument("--or", dest="use_or", type=_bool_list, default=None, help="e.g. on,off")
        p.add_argument("--pu", dest="use_pu", type=_bool_list, default=None)
        p.add_argument("--t-ci", type=_float_list, default=[100.0])
        p.add_argument("--agents", type=_int_list, default=None,
                       help="generate one instance per agent count (needs --vertices)")
        p.add_argument("--vertices", type=int, default=None)
    else:
        p.add_argument("--mode", choices=MODES, default="gstt")
        p.add_argument("--or", dest="use_or", action=argparse.BooleanOptionalAction, default=False)
        p.add_argument("--pu", dest="use_pu", action=argparse.BooleanOptionalAction, default=False)
        p.add_argument("--t-ci", type=float, default=100.0)
    p.add_argument("--tasks", type=int, default=None)
    p.add_argument("--epsilon", type=float, default=0.01)
    p.add_argument("--penalty", type=float, default=1.0)
    p.add_argument("--t-limit-ms", type=int, default=10000)
    p.add_argument("--mc-samples", type=int, default=1000)
    p.add_argument("--prior", type=_prior, default=PriorConfig())
    p.add_argument("--no-error", action="store_true", help="plan with the true delay parameters")
    p.add_argument("--out", type=Path, default=Path("out"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stochmapf", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a random instance")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--vertices", type=int, required=True)
    g.add_argument("--agents", type=int, required=True)
    g.add_argument("--tasks", type=int, default=100)
    g.add_argument("--max-attempts", type=int, default=1000)
    g.add_argument("--out", type=Path, required=True, help="output JSON path")

    _add_experiment_flags(sub.add_parser("run", help="run one configuration over an instance"), grid=False)
    _add_experiment_flags(sub.add_parser("sweep", help="run a grid of configurations"), grid=True)

    r = sub.add_parser("report", help="summarize result files into plot-ready CSV")
    r.add_argument("inputs", nargs="+", type=Path, help="aggregate JSON files written by run/sweep")
    r.add_argument("--out", type=Path, default=Path("report"))
    return parser


def _config(args, mode: str, use_or: bool, use_pu: bool, t_ci: float, seed: int) -> ExperimentConfig:
    try:
        return ExperimentConfig(
            mode=mode, use_or=use_or, use_pu=use_pu, epsilon=args.epsilon, t_ci=t_ci,
            c_penalty=args.penalty, t_limit=args.t_limit_ms / 1000.0, prior=args.prior,
            n_samples=args.mc_samples, seed=seed, oracle_params=args.no_error,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _load(path: Path) -> Instance:
    try:
        return Instance.load(path)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise FileNotFoundError(f"cannot read instance {path}: {exc}") from exc


def _flags(args) -> dict:
    return {k: (str(v) if isinstance(v, (Path, PriorConfig)) else v) for k, v in vars(args).items()}


def cmd_generate(args) -> int:
    if args.vertices < 2 or args.agents < 1 or args.agents > args.vertices // 2 or args.tasks < 0:
        raise UsageError("need vertices >= 2 and 1 <= agents <= vertices / 2")
    inst = generate_instance(args.seed, args.vertices, args.agents, args.tasks, max_attempts=args.max_attempts)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    inst.save(args.out)
    print(f"vertices={len(inst.graph)} edges={len(inst.graph.edges)} tasks={len(inst.tasks)} "
          f"attempts={inst.attempts} -> {args.out}")
    return EXIT_OK


def cmd_run(args) -> int:
    inst = _load(args.map)
    cfg = _config(args, args.mode, args.use_or, args.use_pu, args.t_ci, args.seed)
    n = _n_tasks(args, inst)
    result = run_suite(inst, cfg, n)
    write_results(result, args.out, meta={"flags": _flags(args)})
    agg = result.aggregates
    print(" ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in agg.items()))
    return EXIT_OK


def _n_tasks(args, inst: Instance) -> int:
    n = len(inst.tasks) if args.tasks is None else args.tasks
    if n < 1 or n > len(inst.tasks):
        raise UsageError(f"--tasks must be in 1..{len(inst.tasks)}")
    return n


def _cell(job):
    key, inst, cfg, n = job
    return key, run_suite(inst, cfg, n)


def _threads() -> int:
    try:
        cap = int(os.environ.get("STOCHMAPF_THREADS", "0"))
    except ValueError:
        cap = 0
    avail = os.cpu_count() or 1
    return max(1, min(cap, avail) if cap > 0 else avail)


def cmd_sweep(args) -> int:
    if args.agents is not None:
        if args.vertices is None:
            raise UsageError("--agents list requires --vertices")
        n_tasks = args.tasks or 100
        instances = {}
        for n_agents in args.agents:
            if n_agents < 1 or n_agents > args.vertices // 2:
                raise UsageError("agents must be in 1..vertices/2")
            instances[n_agents] = generate_instance(derive_seed(args.seed, CELL_STREAM, n_agents),
                                                    args.vertices, n_agents, n_tasks)
    else:
        if args.map is None:
            raise UsageError("--map or --agents/--vertices required")
        inst = _load(args.map)
        instances = {len(inst.tasks[0]) if inst.tasks else 0: inst}
    ors = args.use_or if args.use_or is not None else [False]
    pus = args.use_pu if args.use_pu is not None else [False]
    jobs = []
    for (n_agents, inst), mode, o, p, t_ci in itertools.product(instances.items(), args.mode, ors, pus, args.t_ci):
        key = (n_agents, mode, int(o), int(p), t_ci)
        cfg = _config(args, mode, o, p, t_ci, args.seed)
        jobs.append((key, inst, cfg, _n_tasks(args, inst)))
    if not jobs:
        raise UsageError("empty grid")
    workers = min(_threads(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_cell, jobs))
    else:
        results = [_cell(j) for j in jobs]
    results.sort(key=lambda kr: kr[0])
    rows, summary = [], []
    for key, res in results:
        for row in res.rows():
            rows.append({"agents": key[0], **row})
        summary.append({"agents": key[0], **res.to_json()})
    args.out.mkdir(parents=True, exist_ok=True)
    write_rows(args.out / "sweep.csv", rows, ["agents"] + CSV_FIELDS)
    (args.out / "sweep.json").write_text(json.dumps({"meta": {"flags": _flags(args)}, "cells": summary}, indent=1))
    for key, res in results:
        agg = res.aggregates
        print(f"agents={key[0]} mode={key[1]} or={key[2]} pu={key[3]} t_ci={key[4]:g} "
              f"conflicts={agg['mean_vertex_conflicts']:.3f} flowtime={agg['mean_flowtime']:.1f} "
              f"timeout_rate={agg['timeout_rate']:.2f}")
    return EXIT_OK


def _read_cells(path: Path) -> list[dict]:
    try:
        data = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise FileNotFoundError(f"cannot read {path}: {exc}") from exc
    cells = data.get("cells", [data]) if isinstance(data, dict) else []
    cells = [c for c in cells if c.get("aggregates")]
    if not cells:
        raise FileNotFoundError(f"{path} holds no results")
    return cells


def cmd_report(args) -> int:
    cells = []
    for path in args.inputs:
        for c in _read_cells(path):
            cells.append((path, c))
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    table, curves, edges = [], [], []
    for idx, (path, c) in enumerate(cells):
        cfg, agg = c["config"], c["aggregates"]
        label = f"{cfg['mode']}{'+OR' if cfg['use_or'] else ''}{'+PU' if cfg['use_pu'] else ''}"
        table.append({"cell": idx, "source": str(path), "label": label, "t_ci": cfg["t_ci"], **agg})
        lr = c.get("learning", {})
        for t, ra, rb in zip(lr.get("task_id", []), lr.get("rmse_a", []), lr.get("rmse_b", [])):
            curves.append({"cell": idx, "label": label, "task_id": t, "rmse_a": ra, "rmse_b": rb})
        for e in lr.get("edges", []):
            edges.append({"cell": idx, "label": label, **e})
    agg_fields = ["cell", "source", "label", "t_ci"] + [k for k in table[0] if k not in
                                                       ("cell", "source", "label", "t_ci")]
    write_rows(out / "table.csv", table, agg_fields)
    write_rows(out / "learning_curves.csv", curves, ["cell", "label", "task_id", "rmse_a", "rmse_b"])
    write_rows(out / "edges.csv", edges,
               ["cell", "label", "u", "v", "x1", "y1", "x2", "y2", "n_obs", "e_a", "e_b"])
    width = max(len(r["label"]) for r in table)
    print(f"{'config':<{width}}  t_ci  conflicts  flowtime  calc_ms  timeout")
    for r in table:
        print(f"{r['label']:<{width}}  {r['t_ci']:4g}  {r['mean_vertex_conflicts']:9.3f}  "
              f"{r['mean_flowtime']:8.1f}  {r['mean_init_calc_ms']:7.1f}  {r['timeout_rate']:7.2f}")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "run": cmd_run, "sweep": cmd_sweep, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except GenerationFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_GENERATION
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NoSolution as exc:
        print(f"error: no solution: {exc}", file=sys.stderr)
        return EXIT_NO_SOLUTION


if __name__ == "__main__":
    sys.exit(main())
