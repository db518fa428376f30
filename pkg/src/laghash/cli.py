"""Command-line entry point.

Exit codes: 0 success, 1 invalid input (config, arguments, paths), 2
failure while running (corrupt checkpoint, failed gradient check,
non-finite training state).  Every error is one line prefixed ``error:``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from laghash.checkpoint import load_checkpoint, save_checkpoint
from laghash.config import RunConfig, apply_overrides, from_dict, load_config
from laghash.errors import CheckpointError, ConfigError, ContractError, DomainError
from laghash.flatland import export_images_csv
from laghash.image_task import export_points, save_image
from laghash.optim import level_sigmas
from laghash import runner

VALIDATION_ERRORS = (ConfigError, ContractError, DomainError)


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise ConfigError(message)


def _common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
    p.add_argument("--config", required=config_required, help="JSON run configuration")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a dotted config key")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="laghash", description="Hybrid Eulerian/Lagrangian hash-encoded neural fields")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit-image", help="fit a field to an image")
    _common(p)
    p = sub.add_parser("fit-flatland", help="fit density and colour to a 2D scene seen by 1D cameras")
    _common(p)

    p = sub.add_parser("eval", help="print PSNR and parameter count of a checkpoint as one JSON line")
    _common(p, config_required=False)
    p.add_argument("--checkpoint", help="checkpoint path (default: io.checkpoint)")

    p = sub.add_parser("export-points", help="write every Gaussian mean of a checkpoint as CSV")
    _common(p, config_required=False)
    p.add_argument("--checkpoint", help="checkpoint path (default: io.checkpoint)")
    p.add_argument("--out", required=True, help="output CSV")

    p = sub.add_parser("sweep", help="train one run per value of an axis and write a pareto CSV")
    _common(p)
    p.add_argument("--axis", required=True, choices=runner.SWEEP_AXES)
    p.add_argument("--values", required=True, help="comma-separated integers")
    p.add_argument("--baseline", choices=["eulerian"], default=None)
    p.add_argument("--out", required=True, help="output CSV")
    p.add_argument("--checkpoints", default=None, help="directory to save one checkpoint per run")

    p = sub.add_parser("fd-check", help="finite-difference check of a gradient fixture")
    _common(p)
    return ap


def _config(args) -> tuple[RunConfig, Path]:
    cfg = load_config(args.config, args.set)
    return cfg, Path(args.config).resolve().parent


def _checkpoint(args):
    """(config, params, state, base dir) from --checkpoint or the config's io.checkpoint."""
    base = None
    path = args.checkpoint
    if args.config:
        cfg, base = _config(args)
        path = path or cfg.io.checkpoint
    if not path:
        raise ConfigError("no checkpoint given: pass --checkpoint or set io.checkpoint")
    if not Path(path).is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    cfg, params, state = load_checkpoint(path)
    if args.set:
        cfg = from_dict(apply_overrides(cfg.to_dict(), args.set))
    return cfg, params, state, base


def _fit(args, task: str) -> int:
    cfg, base = _config(args)
    if cfg.task != task:
        raise ConfigError(f"config task is {cfg.task!r}; use the fit-{cfg.task} command")
    cfg.check_paths(base)
    out = runner.run_task(cfg, base)
    out_dir = Path(cfg.io.out_dir)
    if not out_dir.is_absolute():
        out_dir = base / out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    runner.write_metrics(out_dir / "metrics.csv", out.fit.metrics)
    save_checkpoint(out_dir / "checkpoint.lagh", cfg, out.fit.params, out.fit.state)
    sig = level_sigmas(cfg.field, out.fit.state.step)
    if cfg.field.lagrangian_levels:
        runner.write_points(out_dir / "points.csv", export_points(cfg.field, out.fit.params, sig))
    if task == "image":
        save_image(out_dir / "reconstruction.png", out.extras["image"])
    else:
        export_images_csv(out_dir / "holdout_views.csv", out.extras["holdout_images"])
    last = out.fit.metrics[-1] if out.fit.metrics else {}
    summary = {"psnr": out.psnr, "val_psnr": last.get("psnr"), "params": out.params, "seconds": out.fit.seconds}
    print(json.dumps({"out_dir": str(out_dir), **summary}))
    return 0


def _eval(args) -> int:
    cfg, params, state, base = _checkpoint(args)
    print(json.dumps(runner.evaluate(cfg, params, state, base)))
    return 0


def _export(args) -> int:
    cfg, params, state, _ = _checkpoint(args)
    pts = export_points(cfg.field, params, level_sigmas(cfg.field, state.step))
    runner.write_points(args.out, pts)
    print(json.dumps({"points": len(pts), "out": args.out}))
    return 0


def _sweep(args) -> int:
    cfg, base = _config(args)
    cfg.check_paths(base)
    try:
        values = [int(v) for v in args.values.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"--values must be comma-separated integers: {args.values}") from exc
    rows = runner.sweep(cfg, args.axis, values, args.baseline, base)
    runner.write_sweep(args.out, rows)
    if args.checkpoints:
        ck = Path(args.checkpoints)
        for i, r in enumerate(rows):
            save_checkpoint(ck / f"run{i:02d}.lagh", r.config, r.outcome.fit.params, r.outcome.fit.state)
    for r in rows:
        print(json.dumps({"variant": r.variant, "params": r.params, "psnr": r.psnr, "seconds": r.seconds}))
    return 0


def _fd(args) -> int:
    cfg, base = _config(args)
    reports = runner.run_fd(cfg, base)
    ok = all(r.passed for r in reports.values())
    line = {"passed": ok}
    for name, r in reports.items():
        line[name] = {"max_rel_error": r.max_error, "tolerance": r.tolerance, "worst_slice": r.worst_slice}
    print(json.dumps(line))
    if not ok:
        bad = [f"{n}: {r.max_error:.3g} >= {r.tolerance:g} in {r.worst_slice}" for n, r in reports.items() if not r.passed]
        print("error: gradient check failed (" + "; ".join(bad) + ")", file=sys.stderr)
        return 2
    return 0


COMMANDS = {
    "fit-image": lambda a: _fit(a, "image"),
    "fit-flatland": lambda a: _fit(a, "flatland"),
    "eval": _eval,
    "export-points": _export,
    "sweep": _sweep,
    "fd-check": _fd,
}


def cli_main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {_one_line(exc)}", file=sys.stderr)
        return 1
    except CheckpointError as exc:
        print(f"error: {_one_line(exc)}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every failure maps to an exit code
        print(f"error: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return 2


def _one_line(exc: BaseException) -> str:
    return " ".join(str(exc).split())


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
