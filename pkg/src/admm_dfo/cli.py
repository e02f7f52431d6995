"""
Command-line front end.

``admm-dfo run`` solves one benchmark instance and writes ``trace.csv``,
``summary.json`` and figure data to an output directory.  ``admm-dfo
summarize`` collects ``summary.json`` files into a comparison table.

Settings are resolved in three layers: built-in defaults, then an optional
config file, then command-line flags.
"""

import argparse
import configparser
import csv
import dataclasses
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import admm
from .admm import InnerStallError, OuterConfig, ParallelMode, ToleranceSchedule
from .benchmarks import (
    DataFormatError,
    arwhead_eval,
    decompose_arwhead,
    decompose_nn,
    decompose_rosenbrock,
    load_banknote,
    nelder_mead,
    rosenbrock_eval,
    validation_accuracy,
)
from .benchmarks.nn import N_WEIGHTS
from .plotting import render_figures, write_figure_data
from .problem import BlockProblem, ConfigurationError, LocalObjective, Smoothness
from .tr_nonsmooth import NonsmoothTrConfig
from .tr_smooth import SmoothTrConfig

__all__ = ["main", "build_parser", "resolve_settings", "run", "summarize", "load_custom_problem"]

logger = logging.getLogger("admm_dfo")

OUT_ENV = "ADMM_DFO_OUT"
BENCHMARKS = ("arwhead", "rosenbrock", "banknote-nn", "custom")
SOLVERS = ("admm-dfo", "nelder-mead")

EXIT_OK, EXIT_NOT_CONVERGED, EXIT_USAGE = 0, 1, 2

# run-level settings: name -> (type, default)
RUN_KEYS = {
    "benchmark": (str, "arwhead"),
    "n": (int, 10),
    "solver": (str, "admm-dfo"),
    "mode": (str, "jacobi"),
    "seed": (int, 0),
    "threads": (int, None),
    "out": (str, None),
    "max_evals": (int, None),
    "beta1": (float, None),
    "problem": (str, None),
    "data": (str, None),
    "reg": (float, 0.01),
    "target": (float, 1e-5),
    "nm_max_evals": (int, 1_000_000),
    "nm_step": (float, 1.0),
    "plots": (bool, True),
}

OUTER_KEYS = (
    "omega", "gamma", "max_outer", "max_inner", "delta0",
    "warm_factor", "warm_floor", "stall_window", "stall_factor",
)


class UsageError(Exception):
    """Bad flags, config or input files; maps to exit code 2."""


def _parse_bool(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _caster(tp):
    return _parse_bool if tp is bool else tp


def _fields(cls):
    return {f.name: (type(f.default) if f.default is not None else float, f.default) for f in dataclasses.fields(cls)}


def _sections():
    """Every configurable key, grouped as in the config file."""
    sched = _fields(ToleranceSchedule)
    outer = {k: v for k, v in _fields(OuterConfig).items() if k in OUTER_KEYS}
    outer["lambda_min"] = (float, -1e3)
    outer["lambda_max"] = (float, 1e3)
    return {
        "run": RUN_KEYS,
        "schedule": sched,
        "outer": outer,
        "smooth": _fields(SmoothTrConfig),
        "nonsmooth": _fields(NonsmoothTrConfig),
    }


def _flag(section, key):
    name = key.replace("_", "-")
    return f"--{name}" if section in ("run", "schedule", "outer") else f"--{section}-{name}"


def _dest(section, key):
    return f"{section}__{key}"


def build_parser():
    parser = argparse.ArgumentParser(prog="admm-dfo", description="Distributed derivative-free optimization.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="solve one benchmark instance")
    p_run.add_argument("--config", help="key = value settings file (sections: run, schedule, outer, smooth, nonsmooth)")
    choices = {"benchmark": BENCHMARKS, "solver": SOLVERS, "mode": tuple(m.value for m in ParallelMode)}
    for section, keys in _sections().items():
        group = p_run.add_argument_group(section)
        for key, (tp, default) in keys.items():
            kw = dict(dest=_dest(section, key), default=None, type=_caster(tp))
            if key in choices:
                kw["choices"] = choices[key]
            group.add_argument(_flag(section, key), help=f"default: {default}", **kw)
    p_run.add_argument("--no-plots", dest="run__plots", action="store_false", default=None)

    p_sum = sub.add_parser("summarize", help="tabulate summary.json files")
    p_sum.add_argument("paths", nargs="*", help="summary.json files or directories containing them")
    p_sum.add_argument("--csv", help="also write the table as CSV")
    return parser


def _read_config(path):
    text = Path(path).read_text()
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string("[run]\n" + text, source=str(path))
    except configparser.Error as exc:
        raise UsageError(f"cannot parse config {path}: {exc}") from None
    sections = _sections()
    values = {}
    for section in parser.sections():
        if section not in sections:
            raise UsageError(f"{path}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in sections[section]:
                raise UsageError(f"{path}: unknown key {key!r} in [{section}]")
            tp = sections[section][key][0]
            try:
                values[(section, key)] = _caster(tp)(raw)
            except ValueError as exc:
                raise UsageError(f"{path}: bad value for {section}.{key}: {exc}") from None
    return values


def resolve_settings(args):
    """Merge defaults, the config file and explicit flags into nested dicts."""
    sections = _sections()
    settings = {s: {k: d for k, (_, d) in keys.items()} for s, keys in sections.items()}
    if getattr(args, "config", None):
        try:
            file_values = _read_config(args.config)
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from None
        for (s, k), v in file_values.items():
            settings[s][k] = v
    for s, keys in sections.items():
        for k in keys:
            v = getattr(args, _dest(s, k), None)
            if v is not None:
                settings[s][k] = v
    run_cfg = settings["run"]
    if run_cfg["benchmark"] not in BENCHMARKS:
        raise UsageError(f"unknown benchmark {run_cfg['benchmark']!r}")
    if run_cfg["solver"] not in SOLVERS:
        raise UsageError(f"unknown solver {run_cfg['solver']!r}")
    if run_cfg["beta1"] is None:
        run_cfg["beta1"] = 7.0 if run_cfg["benchmark"] == "banknote-nn" else 20.0
    if run_cfg["benchmark"] == "custom" and not run_cfg["problem"]:
        raise UsageError("--benchmark custom needs --problem FILE")
    if run_cfg["benchmark"] in ("arwhead", "rosenbrock") and run_cfg["n"] < 2:
        raise UsageError("--n must be at least 2")
    return settings


def build_configs(settings):
    run_cfg = settings["run"]
    try:
        schedule = ToleranceSchedule(**settings["schedule"])
        smooth = SmoothTrConfig(**settings["smooth"])
        nonsmooth = NonsmoothTrConfig(**settings["nonsmooth"])
        outer_kw = {k: v for k, v in settings["outer"].items() if k in OUTER_KEYS}
        outer = OuterConfig(
            lambda_bounds=(settings["outer"]["lambda_min"], settings["outer"]["lambda_max"]),
            beta1=run_cfg["beta1"],
            parallel_mode=run_cfg["mode"],
            threads=run_cfg["threads"],
            max_evals=run_cfg["max_evals"],
            smooth=smooth,
            nonsmooth=nonsmooth,
            **outer_kw,
        )
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None
    return outer, schedule


# ------------------------------------------------------------------ problems

def _quadratic_block(H, c, l1):
    def f(x):
        return float(0.5 * x @ H @ x + c @ x + l1 * np.abs(x).sum())

    return f


def load_custom_problem(path):
    """
    Read a JSON problem with quadratic (optionally l1-regularized) blocks::

        {"blocks": [{"H": [[...]], "c": [...], "A": [[...]], "l1": 0.0}, ...],
         "B": [[...]], "b": [...]}

    Blocks with ``l1 > 0`` are solved by the nonsmooth method.
    """
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read problem file: {exc}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("blocks"), list) or not doc["blocks"]:
        raise UsageError(f"{path}: expected an object with a non-empty 'blocks' list")
    for key in ("B", "b"):
        if key not in doc:
            raise UsageError(f"{path}: missing key {key!r}")
    blocks, A, smooth = [], [], []
    try:
        b = np.asarray(doc["b"], dtype=float).reshape(-1)
        m = b.shape[0]
        B = np.asarray(doc["B"], dtype=float).reshape(m, -1)
        for j, blk in enumerate(doc["blocks"]):
            for key in ("H", "c", "A"):
                if key not in blk:
                    raise UsageError(f"{path}: block {j} is missing {key!r}")
            c = np.asarray(blk["c"], dtype=float).reshape(-1)
            n = c.shape[0]
            H = np.asarray(blk["H"], dtype=float).reshape(n, n)
            l1 = float(blk.get("l1", 0.0))
            blocks.append(LocalObjective(_quadratic_block(H, c, l1), n, name=f"custom[{j}]"))
            A.append(np.asarray(blk["A"], dtype=float).reshape(m, n))
            smooth.append(Smoothness.NONSMOOTH if l1 > 0 else Smoothness.SMOOTH)
        return BlockProblem(blocks, A, B, b, smoothness=smooth, name=Path(path).stem)
    except UsageError:
        raise
    except (ValueError, TypeError, KeyError) as exc:
        raise UsageError(f"{path}: malformed problem: {exc}") from None


class _Instance:
    """A problem plus how to score a final ADMM state and a monolithic point."""

    def __init__(self, problem, objective_of_state, monolithic=None, dim=None, extras=None):
        self.problem = problem
        self.objective_of_state = objective_of_state
        self.monolithic = monolithic
        self.dim = dim
        self.extras = extras or (lambda x: {})


def _raw(problem):
    return [blk.func for blk in problem.blocks]


def make_instance(run_cfg):
    bench = run_cfg["benchmark"]
    if bench in ("arwhead", "rosenbrock"):
        dec, ev = (decompose_arwhead, arwhead_eval) if bench == "arwhead" else (decompose_rosenbrock, rosenbrock_eval)
        problem, layout = dec(run_cfg["n"])
        return _Instance(
            problem,
            lambda st: ev(layout.from_blocks(st.x, st.x_bar)),
            monolithic=ev,
            dim=run_cfg["n"],
        )
    if bench == "banknote-nn":
        try:
            split = load_banknote(run_cfg["data"], seed=run_cfg["seed"])
        except (DataFormatError, OSError) as exc:
            raise UsageError(str(exc)) from None
        problem = decompose_nn(split.partitions, reg=run_cfg["reg"])
        funcs = _raw(problem)

        def consensus_loss(w):
            return float(sum(f(w) for f in funcs))

        return _Instance(
            problem,
            lambda st: consensus_loss(st.x_bar),
            monolithic=consensus_loss,
            dim=N_WEIGHTS,
            extras=lambda w: {"validation_accuracy": validation_accuracy(w, split.validation), "reg": run_cfg["reg"]},
        )
    problem = load_custom_problem(run_cfg["problem"])
    funcs = _raw(problem)
    return _Instance(problem, lambda st: float(sum(f(x) for f, x in zip(funcs, st.x))))


# ------------------------------------------------------------------ run

def _out_dir(run_cfg):
    if run_cfg["out"]:
        return Path(run_cfg["out"])
    base = Path(os.environ.get(OUT_ENV, "runs"))
    name = f"{run_cfg['benchmark']}-{run_cfg['n']}-{run_cfg['solver']}-seed{run_cfg['seed']}"
    return base / name


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _write_summary(out, summary):
    with open(out / "summary.json", "w") as fh:
        json.dump(_jsonable(summary), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _run_admm(inst, settings, out):
    outer, schedule = build_configs(settings)
    run_cfg = settings["run"]
    problem = inst.problem
    problem.reset_counts()
    started = time.perf_counter()
    stall = None
    try:
        result = admm.solve(problem, outer, schedule, seed=run_cfg["seed"])
        state, trace, status = result.state, result.trace, result.status
        residuals, outer_it, inner_it = result.residuals, result.outer_iterations, result.inner_iterations
    except InnerStallError as exc:
        stall = str(exc)
        state, trace, status = exc.state, exc.trace, "stalled"
        residuals, outer_it, inner_it = exc.residuals, state.k, len(trace)
    wall = time.perf_counter() - started
    trace.to_csv(out / "trace.csv")
    write_figure_data(trace, out)
    if run_cfg["plots"]:
        render_figures(trace, out, title=f"{run_cfg['benchmark']} ({problem.name})")
    counts = problem.eval_counts()
    summary = {
        "final_obj": inst.objective_of_state(state),
        "total_evals": int(sum(counts)),
        "max_block_evals": int(max(counts)),
        "eval_counts": counts,
        "wall_time": wall,
        "converged": status == "converged",
        "status": status,
        "budget_exhausted": status == "budget",
        "outer_iterations": outer_it,
        "inner_iterations": inner_it,
        "residuals": {"eps1": residuals[0], "eps2": residuals[1], "eps3": residuals[2]},
        "z_norm": float(np.linalg.norm(state.z)),
        "beta": state.beta,
        "n_blocks": problem.N,
    }
    if stall:
        summary["message"] = stall
    summary.update(inst.extras(state.x_bar))
    return summary


def _run_nelder_mead(inst, settings, out):
    run_cfg = settings["run"]
    if inst.monolithic is None:
        raise UsageError("the nelder-mead solver needs a built-in benchmark")
    history = []

    def oracle(u):
        v = inst.monolithic(u)
        history.append(v)
        return v

    started = time.perf_counter()
    res = nelder_mead(oracle, np.zeros(inst.dim), run_cfg["target"], run_cfg["nm_max_evals"], step=run_cfg["nm_step"])
    wall = time.perf_counter() - started
    best = np.minimum.accumulate(np.asarray(history)) if history else np.zeros(0)
    with open(out / "nm_history.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("evals", "f_best"))
        stride = max(1, len(best) // 5000)
        for j in range(0, len(best), stride):
            w.writerow((j + 1, format(best[j], ".17g")))
        if len(best) and (len(best) - 1) % stride:
            w.writerow((len(best), format(best[-1], ".17g")))
    summary = {
        "final_obj": res.f,
        "total_evals": res.evals,
        "max_block_evals": res.evals,
        "wall_time": wall,
        "converged": res.converged,
        "status": "converged" if res.converged else "budget",
        "budget_exhausted": not res.converged,
    }
    summary.update(inst.extras(res.x))
    return summary


def run(settings):
    """Execute one experiment; returns ``(exit_code, summary, out_dir)``."""
    run_cfg = settings["run"]
    inst = make_instance(run_cfg)
    if run_cfg["solver"] == "admm-dfo":
        build_configs(settings)  # fail on bad constants before creating files
    out = _out_dir(run_cfg)
    out.mkdir(parents=True, exist_ok=True)
    if run_cfg["solver"] == "admm-dfo":
        summary = _run_admm(inst, settings, out)
    else:
        summary = _run_nelder_mead(inst, settings, out)
    summary = {
        "benchmark": run_cfg["benchmark"],
        "n": run_cfg["n"] if run_cfg["benchmark"] in ("arwhead", "rosenbrock") else inst.problem.n_xbar,
        "solver": run_cfg["solver"],
        "mode": run_cfg["mode"],
        "seed": run_cfg["seed"],
        **summary,
        "settings": settings,
    }
    _write_summary(out, summary)
    code = EXIT_OK if summary["converged"] else EXIT_NOT_CONVERGED
    return code, summary, out


# ------------------------------------------------------------------ summarize

def _collect(paths):
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            files.extend(sorted(p.rglob("summary.json")))
        elif p.is_file():
            files.append(p)
        else:
            raise UsageError(f"no such file or directory: {p}")
    if not files:
        raise UsageError("no summary.json files given")
    out = []
    for f in files:
        try:
            data = json.loads(f.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"{f}: {exc}") from None
        missing = {"benchmark", "n", "solver", "final_obj", "wall_time", "max_block_evals", "converged"} - set(data)
        if missing:
            raise UsageError(f"{f}: missing fields {sorted(missing)}")
        out.append(data)
    return out


def summarize(paths):
    """
    Group summaries by ``(benchmark, n)`` and lay solvers side by side.

    Returns ``(header, rows)`` where each row holds, per solver, the final
    objective, time and evaluation count.  A dagger marks runs that did not
    converge; an asterisk marks the fastest time and the fewest evaluations
    within a row.
    """
    records = _collect(paths)
    solvers = sorted({r["solver"] for r in records})
    groups = {}
    for r in records:
        groups.setdefault((r["benchmark"], int(r["n"])), {})[r["solver"]] = r
    header = ["benchmark", "N"]
    for s in solvers:
        header += [f"{s} final_obj", f"{s} time_s", f"{s} evals"]
    rows = []
    for (bench, n), by_solver in sorted(groups.items()):
        present = [by_solver[s] for s in solvers if s in by_solver]
        best_t = min(r["wall_time"] for r in present)
        best_e = min(r["max_block_evals"] for r in present if r["converged"]) if any(r["converged"] for r in present) else None
        row = [bench, str(n)]
        for s in solvers:
            r = by_solver.get(s)
            if r is None:
                row += ["", "", ""]
                continue
            t = f"{r['wall_time']:.2f}" + ("*" if r["wall_time"] == best_t and len(present) > 1 else "")
            if r["converged"]:
                e = f"{r['max_block_evals']}" + ("*" if r["max_block_evals"] == best_e and len(present) > 1 else "")
            else:
                e = "†"
            row += [f"{float(r['final_obj']):.3g}", t, e]
        rows.append(row)
    return header, rows


def _format_table(header, rows):
    widths = [max(len(h), *(len(r[j]) for r in rows)) for j, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows]
    return "\n".join(lines)


# ------------------------------------------------------------------ entry

def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        if args.command == "summarize":
            header, rows = summarize(args.paths)
            print(_format_table(header, rows))
            if args.csv:
                with open(args.csv, "w", newline="") as fh:
                    csv.writer(fh).writerows([header] + rows)
            return EXIT_OK
        code, summary, out = run(resolve_settings(args))
    except (UsageError, ConfigurationError) as exc:
        print(f"admm-dfo: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(
        f"{summary['benchmark']} N={summary['n']} {summary['solver']}: "
        f"final_obj={summary['final_obj']:.6g} max_block_evals={summary['max_block_evals']} "
        f"time={summary['wall_time']:.2f}s status={summary['status']} -> {out}"
    )
    return code


if __name__ == "__main__":
    sys.exit(main())
