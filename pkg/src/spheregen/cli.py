"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 stage failure, 3 I/O or
file-format error.
"""

import argparse
from dataclasses import replace
import logging
from pathlib import Path
import sys

from . import __version__
from .config import MODEL_NAMES, ConfigError, load_config, load_study_grid
from .io import SchemaError
from .pipeline import (
    SUMMARY_ORDER,
    StageError,
    cmd_evaluate,
    cmd_fit,
    cmd_generate,
    cmd_simulate,
    cmd_study,
    evaluate_stage,
    generate_stage,
    run_pipeline,
    validate_file,
)

EXIT_OK, EXIT_CONFIG, EXIT_STAGE, EXIT_IO = 0, 1, 2, 3

logger = logging.getLogger("spheregen")


def _models(text):
    names = tuple(m.strip() for m in text.split(",") if m.strip())
    for m in names:
        if m not in MODEL_NAMES:
            raise argparse.ArgumentTypeError(f"unknown model {m!r}; choose from {', '.join(MODEL_NAMES)}")
    if not names:
        raise argparse.ArgumentTypeError("empty model list")
    return names


def _seed(text):
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _add_common(p, config_required=True):
    p.add_argument("--config", required=config_required, metavar="PATH", help="experiment config (INI)")
    p.add_argument("--seed", type=_seed, metavar="U64", help="override the master seed")
    p.add_argument("--out", metavar="DIR", help="override the output directory")
    p.add_argument("--models", type=_models, metavar="LIST", help="comma-separated subset of models")
    p.add_argument("--baseline", choices=MODEL_NAMES, help="skill-ratio baseline model")


def build_parser():
    parser = argparse.ArgumentParser(prog="spheregen", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write training data and the truth sample")
    _add_common(p)

    p = sub.add_parser("fit", help="fit models on the simulated training data")
    _add_common(p)

    p = sub.add_parser("generate", help="sample from fitted models")
    _add_common(p, config_required=False)
    p.add_argument("--model", metavar="FILE", help="single model JSON (instead of --config)")
    p.add_argument("--n", type=int, help="number of rows (with --model)")
    p.add_argument("--name", help="output file stem (default: model file stem)")

    p = sub.add_parser("evaluate", help="score model samples against the truth sample")
    _add_common(p, config_required=False)
    p.add_argument("--truth", metavar="FILE", help="truth unit-sphere CSV (instead of --config)")
    p.add_argument("--samples", nargs="+", metavar="NAME=FILE", help="model unit-sphere CSVs")

    p = sub.add_parser("run", help="simulate, fit, generate and evaluate in one go")
    _add_common(p)

    p = sub.add_parser("study", help="run every cell of a study grid")
    _add_common(p)
    p.add_argument("--jobs", type=int, default=1, metavar="N", help="cells run in parallel")

    p = sub.add_parser("validate", help="check a config, output files or a run directory")
    p.add_argument("--config", metavar="PATH")
    p.add_argument("paths", nargs="*", metavar="PATH", help="CSV, model JSON or run directory")
    return parser


def _experiment(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out:
        cfg = replace(cfg, output_dir=args.out)
    if args.models:
        cfg = replace(cfg, models=args.models)
    if args.baseline:
        cfg = replace(cfg, eval=replace(cfg.eval, baseline=args.baseline))
    return cfg.validate()


def _print_summary(report):
    print(f"{'model':<15} {'expected_ccrps':>16} {'skill':>10}")
    rank = {n: i for i, n in enumerate(SUMMARY_ORDER)}
    for m in sorted(report["models"], key=lambda s: rank.get(s["name"], len(rank))):
        print(f"{m['name']:<15} {m['expected_ccrps']:>16.6f} {m['skill']:>10.4f}")


def _cmd_generate(args):
    if args.model:
        if args.n is None or args.seed is None or not args.out:
            raise ConfigError("generate --model needs --n, --seed and --out")
        for p in cmd_generate(args.model, args.n, args.seed, args.out, args.name):
            print(p)
        return EXIT_OK
    if not args.config:
        raise ConfigError("generate needs --config or --model")
    return EXIT_STAGE if generate_stage(_experiment(args)) else EXIT_OK


def _cmd_evaluate(args):
    if args.truth:
        if not args.samples or not args.out:
            raise ConfigError("evaluate --truth needs --samples and --out")
        files = {}
        for item in args.samples:
            name, sep, path = item.partition("=")
            if not sep:
                name, path = Path(item).stem.removesuffix("_unit_sphere"), item
            files[name] = path
        eval_cfg = load_config(args.config).eval if args.config else None
        cmd_evaluate(args.truth, files, args.baseline or "vmf", eval_cfg, args.out)
        print(Path(args.out) / "summary.csv")
        return EXIT_OK
    if not args.config:
        raise ConfigError("evaluate needs --config or --truth")
    _print_summary(evaluate_stage(_experiment(args)))
    return EXIT_OK


def _cmd_study(args):
    grid = load_study_grid(args.config)
    base = grid.base
    if args.seed is not None:
        base = replace(base, seed=args.seed)
    if args.models:
        base = replace(base, models=args.models)
    if args.baseline:
        base = replace(base, eval=replace(base.eval, baseline=args.baseline))
    grid = replace(grid, base=base)
    if args.jobs < 1:
        raise ConfigError("--jobs must be at least 1")
    failed = cmd_study(grid, args.out, args.jobs)
    for name in failed:
        print(f"cell failed: {name}", file=sys.stderr)
    return EXIT_STAGE if failed else EXIT_OK


def _cmd_validate(args):
    if not args.config and not args.paths:
        raise ConfigError("validate needs --config and/or paths")
    if args.config:
        text = Path(args.config).read_text()
        if "[study]" in text:
            load_study_grid(args.config)
        else:
            load_config(args.config)
        print(f"{args.config}: ok (config)")
    status = EXIT_OK
    for path in args.paths:
        try:
            kind = validate_file(path)
        except (SchemaError, ValueError) as exc:
            print(f"{path}: INVALID: {exc}")
            status = EXIT_STAGE
        else:
            print(f"{path}: ok ({kind})")
    return status


def dispatch(args):
    cmd = args.command
    if cmd == "simulate":
        cmd_simulate(_experiment(args))
        return EXIT_OK
    if cmd == "fit":
        cfg = _experiment(args)
        return EXIT_STAGE if cmd_fit(cfg) else EXIT_OK
    if cmd == "generate":
        return _cmd_generate(args)
    if cmd == "evaluate":
        return _cmd_evaluate(args)
    if cmd == "run":
        report, failed = run_pipeline(_experiment(args))
        _print_summary(report)
        return EXIT_STAGE if failed else EXIT_OK
    if cmd == "study":
        return _cmd_study(args)
    if cmd == "validate":
        return _cmd_validate(args)
    raise AssertionError(cmd)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on usage errors; report those as config errors
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SchemaError as exc:
        print(f"file error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        where = f" ({exc.filename})" if getattr(exc, "filename", None) else ""
        print(f"io error{where}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_IO
    except (StageError, ValueError, ArithmeticError, RuntimeError) as exc:
        print(f"stage failed: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
