"""Command-line entry point: ``prophet-lt {run,table,ablate-placement,compare-methods,validate}``.

Exit codes: 0 success, 1 a run or stage failed, 2 invalid config or arguments.
Failures print a JSON object with an ``errors`` list on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..errors import ConfigError, ValidationError
from .config import validate_config
from .report import FORMATS, emit_comparison_table, emit_method_table, emit_placement_table
from .runner import (
    OUT_ENV,
    RunSummary,
    ablation_gn_placement,
    resolve_out_dir,
    run_experiment,
    run_method_comparison,
)


def _seeds(text: str):
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None


def _fail(kind: str, errors, code: int) -> int:
    print(json.dumps({"status": "error", "kind": kind, "errors": list(errors)}), file=sys.stderr)
    return code


def _load(args):
    cfg = validate_config(args.config)
    if getattr(args, "seeds", None):
        cfg = cfg.with_seeds(args.seeds)
    return cfg


def _out(cfg, args):
    return resolve_out_dir(cfg, args.out)


def cmd_validate(args) -> int:
    cfg = validate_config(args.config)
    sys.stdout.write(cfg.to_yaml())
    return 0


def cmd_run(args) -> int:
    cfg = _load(args)
    summary = run_experiment(cfg, _out(cfg, args), overwrite=args.overwrite, jobs=args.jobs)
    if summary.delta is not None:
        sys.stdout.write(emit_comparison_table([summary], args.format))
    if summary.failures:
        return _fail("run", [f"seed {f['seed']} stage {f['stage']}: {f['error']}" for f in summary.failures], 1)
    return 0


def cmd_compare(args) -> int:
    cfg = _load(args)
    rows = run_method_comparison(cfg, _out(cfg, args), overwrite=args.overwrite, jobs=args.jobs)
    sys.stdout.write(emit_method_table(rows, args.format))
    missing = [r.label for r in rows if r.mean is None]
    return _fail("run", [f"no results for {m}" for m in missing], 1) if missing else 0


def cmd_ablate(args) -> int:
    cfg = _load(args)
    placements = [[p for p in spec.split(",") if p] for spec in args.placements]
    report = ablation_gn_placement(cfg, placements, _out(cfg, args), overwrite=args.overwrite, jobs=args.jobs)
    sys.stdout.write(emit_placement_table(report, args.format))
    return 0


def cmd_table(args) -> int:
    summaries = []
    for d in args.runs:
        path = Path(d) / "summary.json"
        if not path.exists():
            return _fail("table", [f"{path}: no summary (run not finished?)"], 1)
        summaries.append(RunSummary.from_dict(json.loads(path.read_text())))
    sys.stdout.write(emit_comparison_table(summaries, args.format))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="prophet-lt", description="Long-tailed teacher/student experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="YAML experiment config")
        sp.add_argument("--seeds", type=_seeds, help="comma-separated seeds, overrides the config")
        sp.add_argument("--out", help=f"output directory (default: config output_dir or ${OUT_ENV}/<name>)")
        sp.add_argument("--overwrite", action="store_true", help="replace an existing output directory")
        sp.add_argument("--jobs", type=int, default=1, help="seeds to run in parallel")
        sp.add_argument("--format", choices=FORMATS, default="plain")

    sp = sub.add_parser("run", help="baseline + teacher + student for every seed")
    common(sp)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("compare-methods", help="baseline and all three transfer methods")
    common(sp)
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("ablate-placement", help="accuracy per set of residual-layer positions")
    common(sp)
    sp.add_argument("--placements", nargs="+", required=True,
                    help="one set per argument, e.g. 3  2,3  1,2,3 (use '' for none)")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("table", help="render summaries of finished runs")
    sp.add_argument("--runs", nargs="+", required=True)
    sp.add_argument("--format", choices=FORMATS, default="plain")
    sp.set_defaults(func=cmd_table)

    sp = sub.add_parser("validate", help="check a config and print it with defaults filled in")
    sp.add_argument("--config", required=True)
    sp.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail("config", exc.errors, 2)
    except (ValidationError, FileExistsError) as exc:
        return _fail(type(exc).__name__, [str(exc)], 2)


if __name__ == "__main__":
    sys.exit(main())
