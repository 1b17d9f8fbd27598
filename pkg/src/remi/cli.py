"""Command-line entry point: ``remi <stage> experiment.toml [--set key=value ...]``.

Exit codes: 0 success, 2 configuration error, 3 stage failure.  The worker
count for multi-seed runs comes from the REMI_WORKERS environment variable.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from remi.errors import ConfigError, StageError
from remi.evaluation.config import load_config
from remi.evaluation.experiment import STAGES, collect_report, run_experiment, run_stage, worker_count

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3

HELP = {
    "train": "train the target and shadow models",
    "attack-train": "train MF and MIA attack models (white- and black-box)",
    "select-forget": "pick forget sets by guide membership probability",
    "unlearn": "run privacy-guided unlearning for every ratio",
    "retrain": "train the naive-retraining baselines",
    "evaluate": "compute metrics from saved artifacts and write the report",
    "report": "rebuild report.csv / report.md from saved metrics",
    "run": "all stages in order",
}


class _ArgParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def build_parser():
    parser = _ArgParser(prog="remi", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_ArgParser)
    for name, text in HELP.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("experiment", type=Path, help="experiment TOML file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a field, e.g. --set unlearn.lr=0.1 (repeatable)")
        p.add_argument("--output-dir", help="override output_dir")
        p.add_argument("--seed", type=int, action="append", dest="seeds", help="restrict to these seeds")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _config(args):
    overrides = list(args.overrides)
    if args.output_dir:
        overrides.append("output_dir=" + json.dumps(str(Path(args.output_dir).resolve())))
    cfg = load_config(args.experiment, overrides)
    if args.seeds:
        cfg.seeds = list(dict.fromkeys(args.seeds))
        cfg.validate()
    return cfg


def _finish(report, out):
    print(f"report: {Path(out) / 'report.csv'} ({len(report.rows)} rows)")
    if report.incomplete:
        bad = sorted({r["status"] for r in report.rows if r["status"] != "complete"})
        print(f"incomplete rows: {', '.join(bad)}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = _config(args)
        out = Path(cfg.output_dir)
        if args.command == "run":
            return _finish(run_experiment(cfg, STAGES, worker_count()), out)
        if args.command == "report":
            report = collect_report(cfg)
            out.mkdir(parents=True, exist_ok=True)
            report.to_csv(out / "report.csv")
            (out / "report.md").write_text(report.to_markdown())
            return _finish(report, out)
        if args.command == "evaluate":
            report = run_experiment(cfg, ("evaluate",), worker_count())
            return _finish(report, out)
        for seed in cfg.seeds:
            run_stage(cfg, args.command, seed)
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
