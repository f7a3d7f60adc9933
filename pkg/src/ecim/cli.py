"""Command-line entry point: ``ecim train|ablate|report|fixtures``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from .config import VARIANTS, TrainConfig, apply_variant, load_config
from .errors import EcimError

OUTPUT_ROOT_ENV = "ECIM_OUTPUT_ROOT"


def output_root(cfg: TrainConfig) -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV) or cfg.output_dir)


def _parse_seeds(text: str) -> tuple[int, ...]:
    try:
        seeds = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}")
    if not seeds:
        raise argparse.ArgumentTypeError("at least one seed is required")
    return seeds


def _load(path) -> TrainConfig:
    return load_config(path) if path else TrainConfig()


def cmd_train(args) -> dict:
    from .experiment import run_experiment

    cfg = _load(args.config)
    cfg = apply_variant(cfg, args.variant)
    seed = cfg.seeds[0] if args.seed is None else args.seed
    run_dir = output_root(cfg) / f"{cfg.variant}_{cfg.terrain}_seed{seed}"
    art = run_experiment(cfg, seed, run_dir)
    return {"run_dir": str(run_dir), "final": art.final_metrics}


def cmd_ablate(args) -> dict:
    from .ablation import ABLATION_TERRAINS, run_ablation_suite

    cfg = _load(args.config)
    variants = args.variants.split(",") if args.variants else VARIANTS
    terrains = ABLATION_TERRAINS
    if args.terrains:
        terrains = {t: ABLATION_TERRAINS.get(t, t) for t in args.terrains.split(",")}
    root = output_root(cfg) / "ablation"
    res = run_ablation_suite(replace(cfg, seeds=args.seeds), args.seeds, variants,
                             terrains, out_dir=root, workers=args.workers)
    return {"out_dir": str(root), "runs": len(res.runs), "failures": res.failures,
            "ag": res.ag, "std": res.std}


def cmd_report(args) -> dict:
    from .report import emit_report

    return emit_report(args.runs, args.out)


def cmd_fixtures(args) -> dict:
    from .metrics import check_reference_tables

    rows = check_reference_tables(args.tol)
    checked = [r for r in rows if r[3] is not None]
    bad = [r for r in checked if not r[5]]
    for table, row, metric, got, want, ok in rows:
        status = "ok" if ok else ("no-data" if got is None else "MISMATCH")
        g = "NA" if got is None else f"{got:.4f}"
        print(f"{table:4s} {row:18s} {metric:11s} got={g:>11s} want={want:.4f} {status}")
    result = {"checked": len(checked), "mismatches": len(bad),
              "not_derivable": len(rows) - len(checked)}
    if args.check and bad:
        raise EcimError(f"{len(bad)} reference cell(s) outside tolerance {args.tol}")
    return result


def _error_line(kind: str, message: str) -> str:
    return json.dumps({"status": "error", "error": kind, "message": message})


class _Parser(argparse.ArgumentParser):
    """Usage errors become the same JSON error line as runtime failures."""

    def error(self, message):
        print(_error_line("UsageError", message), file=sys.stderr)
        sys.exit(2)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ecim", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one variant on one seed")
    t.add_argument("--config", help="JSON config file (defaults when omitted)")
    t.add_argument("--variant", choices=VARIANTS)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("ablate", help="run the variant x terrain x seed sweep")
    a.add_argument("--config")
    a.add_argument("--seeds", type=_parse_seeds, required=True)
    a.add_argument("--variants", help="comma-separated subset of variants")
    a.add_argument("--terrains", help="comma-separated subset of terrain labels or kinds")
    a.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("report", help="plots and CSVs from run directories")
    r.add_argument("--runs", nargs="*", default=[])
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)

    f = sub.add_parser("fixtures", help="recompute the bundled reference ablation tables")
    f.add_argument("--check", action="store_true", help="exit nonzero on any mismatch")
    f.add_argument("--tol", type=float, default=1e-4)
    f.set_defaults(func=cmd_fixtures)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.func(args)
    except (EcimError, ValueError, OSError) as exc:
        print(_error_line(type(exc).__name__, str(exc)), file=sys.stderr)
        return 1
    print(json.dumps({"status": "ok", "command": args.command, **result}, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
