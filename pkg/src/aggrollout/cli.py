"""Command-line entry point: ``aggrollout [flags] <verb> [flags]``.

Exit codes: 0 on success, 2 for configuration errors, 3 when a capacity,
budget or convergence limit stops the run.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .errors import AggRolloutError, BudgetExceeded, CapacityExceeded, ConfigError, MetricUndefined, NonConvergence
from .experiments import (
    BOUND_COLUMNS,
    COUNT_COLUMNS,
    EVAL_COLUMNS,
    ExperimentConfig,
    count_representatives,
    run_adaptation,
    run_bound_experiment,
    run_evaluate,
    run_oracle,
    run_solve,
)

EXIT_OK, EXIT_CONFIG, EXIT_CAPACITY = 0, 2, 3

log = logging.getLogger("aggrollout")


def _metadata(cfg: ExperimentConfig, command: str) -> str:
    return f"# command={command} config_sha256={cfg.digest} seed={cfg.seed}"


def write_csv(path: Path, columns: list[str], rows: list[dict], cfg: ExperimentConfig, command: str) -> None:
    extra = [k for r in rows[:1] for k in r if k not in columns]
    with open(path, "w", newline="") as fh:
        fh.write(_metadata(cfg, command) + "\n")
        w = csv.DictWriter(fh, fieldnames=columns + extra, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def write_json(path: Path, payload: dict, cfg: ExperimentConfig, command: str) -> None:
    doc = {"meta": {"command": command, "config_sha256": cfg.digest, "seed": cfg.seed}, **payload}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers, got {text!r}")
    if any(v < 1 for v in vals):
        raise argparse.ArgumentTypeError("values must be positive")
    return vals


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="JSON experiment configuration")
    p.add_argument("--seed", type=int, default=d, help="overrides the configured seed")
    p.add_argument("--threads", type=int, default=argparse.SUPPRESS if suppress else 1, help="worker count (results do not depend on it)")
    p.add_argument("--out", default=d, help="output directory (default: config output_dir)")
    p.add_argument("--no-timing", action="store_true", default=argparse.SUPPRESS if suppress else False,
                   help="omit wall-time fields so reruns are byte-identical")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aggrollout", description="Belief aggregation and rollout experiments.")
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common], help="solve the aggregate MDP and write the bundle")
    ev = sub.add_parser("evaluate", parents=[common], help="Monte Carlo cost of base and rollout policies")
    ev.add_argument("--bundle", help="solved bundle to evaluate instead of solving in-process")
    sub.add_parser("bound-experiment", parents=[common], help="error bound versus observed error over rho")
    sub.add_parser("adaptation", parents=[common], help="cost after a scenario switch versus online compute")
    cr = sub.add_parser("count-representatives", parents=[common], help="number of representative beliefs")
    cr.add_argument("--m-f", type=_int_list, help="comma-separated feature-space sizes")
    cr.add_argument("--rho", type=_int_list, help="comma-separated resolutions")
    sub.add_parser("oracle", parents=[common], help="fine identity aggregation used as reference cost")
    return parser


def run(args: argparse.Namespace) -> int:
    if args.threads < 1:
        raise ConfigError("--threads must be >= 1")
    if args.seed is not None and args.seed < 0:
        raise ConfigError("--seed must be non-negative")
    cfg = ExperimentConfig.from_file(args.config, args.seed)
    out = Path(args.out if args.out is not None else cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    timing = not args.no_timing
    cmd = args.command
    if cmd == "solve":
        bundle, summary = run_solve(cfg, timing)
        bundle.save(out / "bundle.npz")
        write_json(out / "solve.json", summary, cfg, cmd)
        log.info("%d representatives, %d iterations", summary["representatives"], summary["iterations"])
    elif cmd == "evaluate":
        if args.bundle is not None:
            cfg.data["evaluation"]["bundle"] = args.bundle
        rows = run_evaluate(cfg, timing=timing)
        write_csv(out / "evaluate.csv", EVAL_COLUMNS, rows, cfg, cmd)
    elif cmd == "bound-experiment":
        rows = run_bound_experiment(cfg, timing)
        write_csv(out / "bound.csv", BOUND_COLUMNS, rows, cfg, cmd)
    elif cmd == "adaptation":
        record = run_adaptation(cfg, timing)
        write_json(out / "adaptation.json", record.to_json(), cfg, cmd)
    elif cmd == "count-representatives":
        m_f = args.m_f or cfg["counts"]["m_f"]
        rho = args.rho or cfg["counts"]["rho"]
        write_csv(out / "counts.csv", COUNT_COLUMNS, count_representatives(m_f, rho), cfg, cmd)
    elif cmd == "oracle":
        bundle, columns, rows = run_oracle(cfg)
        bundle.save(out / "oracle.npz")
        write_csv(out / "oracle.csv", columns, rows, cfg, cmd)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return run(args)
    except (ConfigError, MetricUndefined) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CapacityExceeded, NonConvergence, BudgetExceeded) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CAPACITY
    except AggRolloutError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
