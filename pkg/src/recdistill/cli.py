"""Command-line entry point.

Exit codes: 0 success, 1 I/O error, 2 configuration or usage error,
3 numeric divergence during training, 4 a validation check failed.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from .config import apply_overrides, load_config, to_text
from .errors import ConfigError, NumericError
from .metrics import summary_table
from .pipeline import ExperimentSpec, run_experiment
from .presets import PRESET_NAMES, preset
from .signal_store import _atomic_write
from .validation import CALIBRATION_MIN_SAMPLES, calibration_threshold, run_calibration, run_gradcheck

OUT_ENV = "RECDISTILL_OUT"

EXIT_OK = 0
EXIT_IO = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_CHECK = 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _default_out() -> Path:
    return Path(os.environ.get(OUT_ENV, "recdistill_out"))


def _seed_list(text: str) -> tuple:
    """``"3"`` means seeds 0..2; ``"4,7"`` is an explicit list."""
    try:
        if "," in text:
            seeds = tuple(int(s) for s in text.split(",") if s.strip())
        else:
            seeds = tuple(range(int(text)))
    except ValueError:
        raise ConfigError(f"--seeds: cannot parse {text!r}", "--seeds") from None
    if not seeds:
        raise ConfigError("--seeds must name at least one seed", "--seeds")
    return seeds


def _overrides(pairs: Sequence[str]) -> dict:
    out = {}
    for pair in pairs or ():
        key, sep, value = pair.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {pair!r}", pair)
        out[key.strip()] = value.strip()
    return out


def _filter_arms(spec: ExperimentSpec, arms: Optional[str]) -> ExperimentSpec:
    if not arms:
        return spec
    wanted = [a.strip() for a in arms.split(",") if a.strip()]
    known = {a.name for a in spec.arms}
    for a in wanted:
        if a not in known:
            raise ConfigError(f"--arms: unknown arm {a!r}", "--arms")
    return replace(spec, arms=tuple(a for a in spec.arms if a.name in wanted))


def _write_outputs(spec: ExperimentSpec, report, out: Path, summary: bool) -> None:
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "metrics.csv")
    _atomic_write(out / "resolved_config.txt", [to_text(spec)])
    if summary:
        _atomic_write(out / "summary.csv", [summary_table(report)])


def _execute(spec: ExperimentSpec, out: Path, workers: int, summary: bool) -> int:
    try:
        report = run_experiment(spec, workers=workers)
    except NumericError as exc:
        print(f"pipeline: numeric divergence: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    _write_outputs(spec, report, out, summary)
    if summary:
        sys.stdout.write(summary_table(report))
    print(f"wrote {out / 'metrics.csv'}", file=sys.stderr)
    return EXIT_OK


def cmd_run(args) -> int:
    if args.config:
        base = preset(args.preset) if args.preset else None
        spec = load_config(args.config, base)
    else:
        spec = preset(args.preset or "main")
    spec = apply_overrides(spec, _overrides(args.set))
    if args.seed is not None:
        spec = replace(spec, seeds=(args.seed,))
    spec = _filter_arms(spec, args.arms)
    out = Path(args.out) if args.out else _default_out() / spec.name
    return _execute(spec, out, args.workers, summary=False)


def cmd_ablate(args) -> int:
    spec = apply_overrides(preset(args.preset), _overrides(args.set))
    if args.seeds:
        spec = replace(spec, seeds=_seed_list(args.seeds))
    spec = _filter_arms(spec, args.arms)
    out = Path(args.out) if args.out else _default_out() / spec.name
    return _execute(spec, out, args.workers, summary=True)


def cmd_gradcheck(args) -> int:
    if args.probes < 1:
        raise ConfigError("--probes must be >= 1", "--probes")
    if not args.tolerance > 0:
        raise ConfigError("--tolerance must be > 0", "--tolerance")
    results = run_gradcheck(args.probes, args.tolerance, args.seed)
    for r in results:
        print(f"{r.name:32s} worst_rel_err={r.worst:.3e} {'ok' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradcheck: {len(failed)} loss(es) above tolerance {args.tolerance:g}: {', '.join(failed)}",
              file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_calibrate(args) -> int:
    try:
        rs_list = [float(r) for r in args.rs_list.split(",") if r.strip()]
    except ValueError:
        raise ConfigError(f"--rs-list: cannot parse {args.rs_list!r}", "--rs-list") from None
    if not rs_list or any(r < 1 for r in rs_list):
        raise ConfigError("--rs-list needs values >= 1", "--rs-list")
    if args.samples < 1:
        raise ConfigError("--samples must be >= 1", "--samples")
    limit = calibration_threshold(args.samples)
    if args.samples < CALIBRATION_MIN_SAMPLES:
        print(
            f"calibrate: warning: {args.samples} samples gives little statistical power; "
            f"threshold relaxed to 0.01*sqrt(1e6/samples) = {limit:.4g}",
            file=sys.stderr,
        )
    results = run_calibration(rs_list, args.samples, args.seed)
    for r in results:
        print(f"{r.name:10s} calibration_mae={r.worst:.5f} {'ok' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"calibrate: MAE above {limit:.4g} for {', '.join(failed)}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_presets(args) -> int:
    if args.show:
        sys.stdout.write(to_text(preset(args.show)))
        return EXIT_OK
    for name in PRESET_NAMES:
        spec = preset(name)
        print(f"{name:16s} arms: {', '.join(a.name for a in spec.arms)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="recdistill", description="Teacher-student distillation experiments on a synthetic stream.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run a config file or preset")
    run.add_argument("config", nargs="?", help="flat key = value config file")
    run.add_argument("--preset", help="start from this preset (config keys override it)")
    run.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    run.add_argument("--seed", type=int, help="run only this seed")
    run.add_argument("--arms", help="comma-separated arm names to keep")
    run.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<experiment>)")
    run.add_argument("--workers", type=int, default=1, help="parallel seed/variant runs")
    run.set_defaults(func=cmd_run)

    ab = sub.add_parser("ablate", help="run every arm of a preset and print a summary")
    ab.add_argument("preset")
    ab.add_argument("--seeds", help="seed count (e.g. 5) or explicit list (e.g. 0,3)")
    ab.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    ab.add_argument("--arms", help="comma-separated arm names to keep")
    ab.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<preset>)")
    ab.add_argument("--workers", type=int, default=1, help="parallel seed/variant runs")
    ab.set_defaults(func=cmd_ablate)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    gc.add_argument("--probes", type=int, default=20)
    gc.add_argument("--tolerance", type=float, default=1e-5)
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(func=cmd_gradcheck)

    cal = sub.add_parser("calibrate", help="Monte Carlo check of the debias correction")
    cal.add_argument("--rs-list", default="2,5,10")
    cal.add_argument("--samples", type=int, default=1_000_000)
    cal.add_argument("--seed", type=int, default=0)
    cal.set_defaults(func=cmd_calibrate)

    pr = sub.add_parser("presets", help="list presets or print one as a config file")
    pr.add_argument("--show", metavar="NAME")
    pr.set_defaults(func=cmd_presets)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        where = f" (key: {exc.key})" if exc.key else ""
        print(f"config: {exc}{where}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"io: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
