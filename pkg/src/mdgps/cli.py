"""Command line: ``mdgps train``, ``mdgps eval`` and ``mdgps table``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, default_config, format_config, load_config
from .envs import final_distances, make_env, sample_rollouts
from .errors import InvalidInputError, NumericalError
from .mdgps import SIX_COSTS, MDGPSState, run_iteration
from .policy import CheckpointVersionError, load_checkpoint, save_checkpoint

log = logging.getLogger("mdgps")

RUNLOG_VERSION = 1
RUNLOG_NAME = "runlog.csv"
TABLE_ITERATIONS = (3, 6, 9, 12)

EXIT_OK, EXIT_USAGE, EXIT_RUN_FAILED = 0, 2, 3


# ---------------------------------------------------------------- run log


def runlog_columns(n_conditions):
    cols = ["iteration"]
    for i in range(n_conditions):
        cols += [f"epsilon_{i}", f"eta_{i}", f"kl_{i}"]
        cols += [f"{name}_{i}" for name in SIX_COSTS]
        cols += [f"bound_rhs_{i}", f"bound_eps_max_{i}", f"tv_bound_{i}"]
    cols += ["mean_local_return", "mean_global_return", "mean_final_distance", "success_rate",
             "s_step_loss", "wall_time"]
    return cols


def runlog_row(rec):
    row = {"iteration": rec.iteration}
    for i, c in enumerate(rec.conditions):
        row.update({f"epsilon_{i}": c.epsilon, f"eta_{i}": c.eta, f"kl_{i}": c.kl})
        row.update({f"{name}_{i}": c.costs[name] for name in SIX_COSTS})
        row.update({f"bound_rhs_{i}": c.bound["bound_rhs"],
                    f"bound_eps_max_{i}": c.bound["eps_max"],
                    f"tv_bound_{i}": c.bound["tv_bound_final"]})
    row.update(mean_local_return=rec.mean_local_return, mean_global_return=rec.mean_global_return,
               mean_final_distance=rec.mean_final_distance, success_rate=rec.success_rate,
               s_step_loss=rec.s_step_loss, wall_time=rec.wall_time)
    return row


class RunLogWriter:
    """CSV with a version line and ``# key=value`` metadata lines ahead of the header."""

    def __init__(self, path, metadata, n_conditions):
        self.path = Path(path)
        self.columns = runlog_columns(n_conditions)
        with self.path.open("w", newline="") as f:
            f.write(f"# runlog_version={RUNLOG_VERSION}\n")
            for key, value in metadata.items():
                f.write(f"# {key}={value}\n")
            csv.writer(f).writerow(self.columns)

    def append(self, row):
        with self.path.open("a", newline="") as f:
            csv.writer(f).writerow([repr(float(row[c])) if c != "iteration" else row[c]
                                    for c in self.columns])


def read_runlog(path):
    """Return (metadata, rows); rows map column name to float (iteration to int)."""
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# runlog_version="):
        raise InvalidInputError(f"{path} is not a run log")
    version = lines[0].split("=", 1)[1].strip()
    if version != str(RUNLOG_VERSION):
        raise InvalidInputError(f"{path}: run log version {version} is not supported "
                                f"(this build reads version {RUNLOG_VERSION})")
    meta, body = {}, []
    for line in lines[1:]:
        if line.startswith("# "):
            key, _, value = line[2:].partition("=")
            meta[key] = value
        else:
            body.append(line)
    reader = csv.DictReader(body)
    rows = [{k: (int(v) if k == "iteration" else float(v)) for k, v in r.items()} for r in reader]
    return meta, rows


# ---------------------------------------------------------------- commands


def _resolve_config(args):
    cfg = load_config(args.config) if args.config else default_config()
    overrides = {"seed": args.seed, "iterations": args.iterations, "sampling": args.sampling,
                 "step_rule": args.step_rule, "epsilon": args.epsilon, "output": args.output}
    return replace(cfg, **{k: v for k, v in overrides.items() if v is not None})


def cmd_train(args):
    try:
        cfg = _resolve_config(args)
        spec = cfg.make_env()
        algo = cfg.algorithm_config()
    except InvalidInputError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(cfg.output)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(format_config(cfg))
    writer = RunLogWriter(out / RUNLOG_NAME, {k: v for k, v in _flat(cfg).items()},
                          spec.n_conditions)
    state = MDGPSState.initial(spec, algo)
    eps_trace, records, status, error = [], [], "completed", None
    for _ in range(cfg.iterations):
        try:
            state, rec = run_iteration(state)
        except NumericalError as exc:
            status, error = "failed", str(exc)
            log.error("run failed at iteration %d: %s", state.iteration + 1, exc)
            break
        records.append(rec)
        writer.append(runlog_row(rec))
        eps_trace.append([c.epsilon for c in rec.conditions])
        save_checkpoint(state.policy, out / "checkpoints" / f"iter_{rec.iteration:03d}.json",
                        iteration=rec.iteration, env=cfg.env, seed=cfg.seed)
    last = records[-1] if records else None
    summary = {
        "status": status, "error": error, "iterations_completed": len(records),
        "env": cfg.env, "sampling": cfg.sampling, "step_rule": cfg.step_rule, "seed": cfg.seed,
        "final_success_rate": last.success_rate if last else None,
        "final_mean_return": last.mean_global_return if last else None,
        "final_mean_distance": last.mean_final_distance if last else None,
        "epsilon_trace": eps_trace,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    print(f"{status}: {len(records)} iterations written to {out}")
    return EXIT_OK if status == "completed" else EXIT_RUN_FAILED


def _flat(cfg):
    return dict(line.split(" = ", 1) for line in format_config(cfg).splitlines())


def evaluate_policy(policy, spec, n_rollouts, seed, deterministic=True):
    if n_rollouts <= 0:
        raise InvalidInputError("n_rollouts must be positive")
    if policy.dx != spec.dx or policy.du != spec.du:
        raise InvalidInputError(f"checkpoint expects state/action dims ({policy.dx}, {policy.du}), "
                                f"task {spec.name!r} has ({spec.dx}, {spec.du})")
    rolls = [r for i in range(spec.n_conditions)
             for r in sample_rollouts(spec, policy, i, n_rollouts, seed, deterministic)]
    dist = final_distances(spec, rolls)
    return {
        "env": spec.name, "n_rollouts_per_condition": n_rollouts, "seed": seed,
        "deterministic": deterministic, "mean_return": float(np.mean([r.total_cost for r in rolls])),
        "final_distance": {"mean": float(dist.mean()), "median": float(np.median(dist)),
                           "min": float(dist.min()), "max": float(dist.max())},
        "success_threshold": spec.success_threshold,
        "success_rate": float(np.mean(dist < spec.success_threshold)),
    }


def cmd_eval(args):
    try:
        policy, _ = load_checkpoint(args.checkpoint)
        summary = evaluate_policy(policy, make_env(args.env), args.n_rollouts, args.seed,
                                  not args.stochastic)
    except CheckpointVersionError as exc:
        print(f"refusing checkpoint: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InvalidInputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    text = json.dumps(summary, indent=1)
    print(text)
    if args.output:
        Path(args.output).write_text(text)
    return EXIT_OK


def success_table(run_dirs, iterations=TABLE_ITERATIONS):
    """Group runs that differ only in seed and output directory; average success rates."""
    groups = {}
    for d in run_dirs:
        meta, rows = read_runlog(Path(d) / RUNLOG_NAME)
        label = f"{meta.get('env')} {meta.get('sampling')} {meta.get('step_rule')}"
        key = tuple(sorted((k, v) for k, v in meta.items() if k not in ("seed", "output")))
        by_iter = {r["iteration"]: r["success_rate"] for r in rows}
        groups.setdefault(key, (label, []))[1].append(by_iter)
    table = []
    for label, runs in groups.values():
        cells = []
        for k in iterations:
            vals = [r[k] for r in runs if k in r]
            cells.append(float(np.mean(vals)) if vals else None)
        table.append((label, len(runs), cells))
    return table


def format_table(table, iterations=TABLE_ITERATIONS):
    head = ["run", "seeds"] + [f"iter {k}" for k in iterations]
    body = [[label, str(n)] + ["absent" if c is None else f"{100 * c:.1f}%" for c in cells]
            for label, n, cells in table]
    widths = [max(len(r[j]) for r in [head] + body) for j in range(len(head))]
    return "\n".join("  ".join(v.ljust(w) for v, w in zip(r, widths)) for r in [head] + body)


def cmd_table(args):
    try:
        text = format_table(success_table(args.runs))
    except (InvalidInputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(text)
    if args.output:
        Path(args.output).write_text(text + "\n")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="mdgps", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run the training loop and log every iteration")
    train.add_argument("--config", help="config file (bare names resolve to bundled configs)")
    train.add_argument("--seed", type=int)
    train.add_argument("--iterations", type=int)
    train.add_argument("--sampling", choices=["on_policy", "off_policy"])
    train.add_argument("--step-rule", dest="step_rule", choices=["classic", "global"])
    train.add_argument("--epsilon", type=float)
    train.add_argument("--output", help="run directory")
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="roll out a saved policy")
    ev.add_argument("checkpoint")
    ev.add_argument("--env", default="pointmass")
    ev.add_argument("--n-rollouts", dest="n_rollouts", type=int, default=5,
                    help="rollouts per condition")
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--stochastic", action="store_true", help="sample actions instead of means")
    ev.add_argument("--output", help="also write the summary as JSON here")
    ev.set_defaults(func=cmd_eval)

    tab = sub.add_parser("table", help="success rates at iterations 3, 6, 9 and 12")
    tab.add_argument("runs", nargs="+", help="run directories")
    tab.add_argument("--output")
    tab.set_defaults(func=cmd_table)
    return parser


def main(argv=None):
    level = os.environ.get("MDGPS_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
