"""
Command-line interface.

Subcommands
-----------
``run``           run an experiment described by a YAML config
``rrmse-table``   RRMSE of every LF source against HF, next to the reported values
``latent-dump``   export per-iteration latent coordinates of a JSON trace
``list-problems`` list built-in problems and function ids

Experiment config (YAML)::

    problem: simple1d              # or problem_file: path/to/problem.yaml
    task: GF                       # GF or BO
    methods: [mufasa-beta, sfgp]   # names, or mappings with per-method options
    stop: {max_iters: 20, max_infill_cost: 600}   # optional; built-in default
    n_replicates: 5
    base_seed: 0
    output: runs/simple1d          # optional; --out and LVMF_OUTPUT_ROOT also work
    parallel: 1
    fit: {n_restarts: 8}           # optional FitConfig overrides
    optimizer: {n_polish: 4}       # optional OptimizerConfig overrides
    refit_restarts: null
    n_test: 10000
    problem_params: {theta: 8.0}   # optional keyword parameters of the problem

Exit codes: 0 success, 2 configuration error, 3 runtime error (no replicate
finished), 4 partial failure (some replicates failed).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .acquisition import OptimizerConfig
from .exceptions import ConfigurationError
from .lvgp import FitConfig
from .planner import MethodSpec, RunRecord, StopCriteria, read_trace_csv, replicate_seeds, run_replicates
from .problems import BUILTIN, FUNCTIONS, Problem, default_stop, get_problem, load_problem_file, source_rrmse

log = logging.getLogger("lvmf")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_PARTIAL = 0, 2, 3, 4
OUTPUT_ENV = "LVMF_OUTPUT_ROOT"

_CONFIG_KEYS = {
    "problem", "problem_file", "task", "methods", "stop", "n_replicates", "base_seed", "output",
    "parallel", "fit", "optimizer", "refit_restarts", "n_test", "problem_params",
}
_METHOD_KEYS = {"variant", "refit_restarts", "divisor", "mfca_tau", "serv_rho_squared", "fit", "optimizer"}


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------


def _dataclass_override(cls, base, values):
    if not values:
        return base
    if not isinstance(values, dict):
        raise ConfigurationError(f"{cls.__name__} overrides must be a mapping")
    fields = set(cls.__dataclass_fields__)
    unknown = set(values) - fields
    if unknown:
        raise ConfigurationError(f"unknown {cls.__name__} keys {sorted(unknown)}")
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    return cls(**{**base.__dict__, **kw})


def load_problem(cfg: dict, base_dir: Path) -> Problem:
    task = cfg.get("task", "GF")
    if "problem_file" in cfg:
        path = Path(cfg["problem_file"])
        return load_problem_file(path if path.is_absolute() else base_dir / path)
    if "problem" not in cfg:
        raise ConfigurationError("config needs 'problem' or 'problem_file'")
    return get_problem(str(cfg["problem"]), task, **(cfg.get("problem_params") or {}))


def build_methods(cfg: dict) -> list[MethodSpec]:
    task = cfg.get("task", "GF")
    fit = _dataclass_override(FitConfig, FitConfig(), cfg.get("fit"))
    opt = _dataclass_override(OptimizerConfig, OptimizerConfig(), cfg.get("optimizer"))
    methods = cfg.get("methods")
    if not methods:
        raise ConfigurationError("config needs a non-empty 'methods' list")
    out = []
    for m in methods:
        entry = {"variant": m} if isinstance(m, str) else dict(m)
        unknown = set(entry) - _METHOD_KEYS
        if unknown or "variant" not in entry:
            raise ConfigurationError(f"bad method entry {m!r}")
        out.append(MethodSpec(
            entry["variant"], task,
            fit=_dataclass_override(FitConfig, fit, entry.get("fit")),
            refit_restarts=entry.get("refit_restarts", cfg.get("refit_restarts")),
            optimizer=_dataclass_override(OptimizerConfig, opt, entry.get("optimizer")),
            divisor=entry.get("divisor", "current"),
            mfca_tau=float(entry.get("mfca_tau", 2.5)),
            serv_rho_squared=bool(entry.get("serv_rho_squared", True)),
        ))
    return out


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"invalid YAML in {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigurationError("config must be a mapping")
    unknown = set(cfg) - _CONFIG_KEYS
    if unknown:
        raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
    return cfg


# ---------------------------------------------------------------------------
# summary
# ---------------------------------------------------------------------------


def summarize_traces(paths, source_names) -> dict:
    """Per-method statistics recomputed from trace CSV files alone."""
    finals, costs = [], []
    counts = {name: 0 for name in source_names}
    for p in paths:
        rows = read_trace_csv(p)
        if not rows:
            continue
        finals.append(rows[-1]["metric"])
        costs.append(rows[-1]["cum_cost"])
        for r in rows[1:]:
            counts[source_names[r["source"]]] += 1
    f = np.array(finals, dtype=float)
    c = np.array(costs, dtype=float)
    out = {
        "n_traces": len(finals),
        "final_metric_median": float(np.median(f)) if f.size else float("nan"),
        "final_metric_mean": float(f.mean()) if f.size else float("nan"),
        "final_metric_std": float(f.std()) if f.size else float("nan"),
        "total_cost_mean": float(c.mean()) if c.size else float("nan"),
    }
    out.update({f"infill_{k}": v for k, v in counts.items()})
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    base_dir = Path(args.config).resolve().parent
    problem = load_problem(cfg, base_dir)
    task = cfg.get("task", "GF")
    methods = build_methods(cfg)
    stop = StopCriteria.from_dict(cfg["stop"]) if cfg.get("stop") else StopCriteria(**default_stop(problem, task))
    n_rep = int(args.replicates if args.replicates is not None else cfg.get("n_replicates", 1))
    base_seed = int(args.seed if args.seed is not None else cfg.get("base_seed", 0))
    parallel = int(args.parallel if args.parallel is not None else cfg.get("parallel", 1))
    n_test = int(cfg.get("n_test", 10000))
    if n_rep < 1:
        raise ConfigurationError("n_replicates must be >= 1")
    for m in methods:
        m.validate_for(problem)

    if args.out is not None:
        out = Path(args.out)
    elif cfg.get("output"):
        out = Path(cfg["output"])
        out = out if out.is_absolute() else base_dir / out
    else:
        out = Path(os.environ.get(OUTPUT_ENV, "runs")) / Path(args.config).stem
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigurationError(f"output directory {out} is not writable: {exc}") from exc

    records = run_replicates(problem, methods, stop, n_rep, base_seed, parallel, n_test)

    manifest = {
        "version": __version__, "config": cfg, "problem": problem.name, "task": task,
        "base_seed": base_seed, "n_replicates": n_rep, "stop": stop.__dict__, "runs": [],
    }
    paths: dict = {m.variant: [] for m in methods}
    idx = 0
    for r in range(n_rep):
        for m in methods:
            rec: RunRecord = records[idx]
            idx += 1
            seed, doe_seed = replicate_seeds(base_seed, m.variant, r)
            d = out / m.variant
            d.mkdir(exist_ok=True)
            stem = d / f"rep_{r:03d}"
            rec.write_csv(stem.with_suffix(".csv"))
            rec.save_json(stem.with_suffix(".json"))
            if rec.status == "ok":
                paths[m.variant].append(stem.with_suffix(".csv"))
            manifest["runs"].append({
                "method": m.variant, "replicate": r, "seed": seed, "doe_seed": doe_seed,
                "status": rec.status, "stop_reason": rec.stop_reason, "error": rec.error,
                "trace": str(stem.with_suffix(".csv").relative_to(out)),
            })

    rows = []
    for m in methods:
        rows.append({"method": m.variant, **summarize_traces(paths[m.variant], problem.source_names())})
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, default=str)

    n_bad = sum(rec.status != "ok" for rec in records)
    print(f"wrote {len(records)} traces to {out}")
    if n_bad == len(records):
        return EXIT_RUNTIME
    return EXIT_PARTIAL if n_bad else EXIT_OK


def rrmse_rows(problem: Problem, n_test: int = 10000) -> list[dict]:
    rows = []
    for s, src in enumerate(problem.sources):
        if s == problem.hf_label:
            continue
        val = source_rrmse(problem, s, n_test)
        ref = src.reported_rrmse
        rows.append({
            "source": src.name, "rrmse": val, "reported": ref,
            "rel_dev": None if ref is None else abs(val - ref) / ref,
        })
    return rows


def cmd_rrmse_table(args) -> int:
    if args.problem_file:
        problem = load_problem_file(args.problem_file)
    elif args.problem:
        problem = get_problem(args.problem)
    else:
        raise ConfigurationError("give a problem name or --problem-file")
    print(f"{'source':<8}{'rrmse':>12}{'reported':>12}{'rel_dev':>10}")
    for r in rrmse_rows(problem, args.n_test):
        ref = "-" if r["reported"] is None else f"{r['reported']:.4f}"
        dev = "-" if r["rel_dev"] is None else f"{100 * r['rel_dev']:.2f}%"
        print(f"{r['source']:<8}{r['rrmse']:>12.4f}{ref:>12}{dev:>10}")
    return EXIT_OK


def latent_rows(record: RunRecord, include_initial: bool = False) -> list[list]:
    rows = []
    for it in record.iterations:
        if it.latent is None or (it.iteration == 0 and not include_initial):
            continue
        for s, (z1, z2) in enumerate(it.latent):
            rows.append([it.iteration, s, record.source_names[s], z1, z2])
    return rows


def cmd_latent_dump(args) -> int:
    path = Path(args.trace)
    if not path.exists():
        print(f"error: trace {path} not found", file=sys.stderr)
        return EXIT_RUNTIME
    record = RunRecord.load_json(path)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "source", "name", "z1", "z2"])
        for it, s, name, z1, z2 in latent_rows(record, args.include_initial):
            w.writerow([it, s, name, repr(float(z1)), repr(float(z2))])
    finally:
        if fh is not sys.stdout:
            fh.close()
    return EXIT_OK


def cmd_list_problems(args) -> int:
    for name in sorted(BUILTIN):
        p = get_problem(name)
        srcs = ", ".join(f"{s.name}(cost {s.cost:g})" for s in p.sources)
        print(f"{name:<11} q={p.q:<3} {srcs}")
    print("function ids: " + ", ".join(sorted(FUNCTIONS)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lvmf", description="Multi-fidelity adaptive sampling experiments")
    ap.add_argument("-v", "--verbose", action="store_true", help="log one line per iteration")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--replicates", type=int)
    p.add_argument("--parallel", type=int)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("rrmse-table", help="RRMSE of each LF source vs HF")
    p.add_argument("problem", nargs="?")
    p.add_argument("--problem-file")
    p.add_argument("--n-test", type=int, default=10000)
    p.set_defaults(func=cmd_rrmse_table)

    p = sub.add_parser("latent-dump", help="latent coordinates of a JSON trace as CSV")
    p.add_argument("trace")
    p.add_argument("--out")
    p.add_argument("--include-initial", action="store_true")
    p.set_defaults(func=cmd_latent_dump)

    p = sub.add_parser("list-problems", help="list built-in problems")
    p.set_defaults(func=cmd_list_problems)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - report and map to an exit code
        log.exception("run failed")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
