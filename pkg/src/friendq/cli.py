"""Command-line entry point: ``friendq run|complexity|plot|validate``.

Exit codes: 0 success, 1 invalid spec or input, 2 some cells failed.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness

EXIT_OK, EXIT_INVALID, EXIT_PARTIAL = 0, 1, 2

log = logging.getLogger("friendq")


def _csv_list(cast):
    def parse(text):
        try:
            return [cast(x) for x in text.replace(",", " ").split() if x]
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad list {text!r}") from None
    return parse


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="friendq", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train every (kind, junctions, seed) cell")
    run.add_argument("--kinds", type=_csv_list(str),
                     help="comma list of fixed, centralized, independent, friend")
    run.add_argument("--junctions", type=_csv_list(int), help="comma list of junction counts")
    run.add_argument("--episodes", type=int)
    run.add_argument("--seeds", type=_csv_list(int))
    run.add_argument("--config", type=Path,
                     help="experiment config (.ini) or a previous run's manifest.json")
    run.add_argument("--out", type=Path,
                     help=f"result directory (default ${harness.OUT_ENV}/run or results/run)")
    run.add_argument("--parallel", type=int, help="worker processes")
    run.add_argument("--full-scale", action="store_true",
                     help="5.5 h episodes with uniform demand instead of the desk profile")

    cx = sub.add_parser("complexity", help="print action counts per junction count")
    cx.add_argument("--max-n", type=int, default=4)

    pl = sub.add_parser("plot", help="write SVG plots and tidy CSVs for a result directory")
    pl.add_argument("--dir", type=Path, required=True)

    va = sub.add_parser("validate", help="check a config file")
    va.add_argument("--config", type=Path, required=True)
    return p


def _spec_from_args(args) -> harness.ExperimentSpec:
    spec = harness.load_spec(args.config) if args.config else harness.ExperimentSpec()
    if args.full_scale:
        spec.network.update(harness.FULL_NETWORK)
    for name in ("kinds", "junctions", "episodes", "seeds", "parallel"):
        value = getattr(args, name)
        if value is not None:
            setattr(spec, name, value)
    spec.out = args.out if args.out is not None else harness.default_out_root() / "run"
    return spec.validate()


def cmd_run(args) -> int:
    try:
        spec = _spec_from_args(args)
    except harness.SpecError as e:
        print(f"invalid spec: {e}", file=sys.stderr)
        return EXIT_INVALID

    def progress(row):
        log.info("%s: %s conv=%s wait=%s", row["cell"], row["status"],
                 row["episodes_to_convergence"], row["final_mean_wait_s"])

    result = harness.run_experiment(spec, progress=progress)
    for line in (result.out / "summary.csv").read_text().splitlines():
        print(line)
    if result.failed:
        print(f"{len(result.failed)} of {len(result.rows)} cells failed; see manifest.json",
              file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_complexity(args) -> int:
    try:
        rows = harness.complexity_table(args.max_n)
    except ValueError as e:
        print(e, file=sys.stderr)
        return EXIT_INVALID
    print("junction_count,centralized_actions,friend_actions")
    for r in rows:
        print(f"{r.junction_count},{r.centralized_actions},{r.friend_actions}")
    return EXIT_OK


def cmd_plot(args) -> int:
    try:
        files = harness.emit_plots(args.dir)
    except (FileNotFoundError, ValueError) as e:
        print(e, file=sys.stderr)
        return EXIT_INVALID
    for f in files:
        print(f)
    return EXIT_OK


def cmd_validate(args) -> int:
    problems = harness.validate_config(args.config)
    for p in problems:
        print(f"invalid: {p}", file=sys.stderr)
    if problems:
        return EXIT_INVALID
    print(f"{args.config}: ok")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s")
    return {"run": cmd_run, "complexity": cmd_complexity, "plot": cmd_plot,
            "validate": cmd_validate}[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
