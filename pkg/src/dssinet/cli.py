"""Command-line entry point.

Every subcommand prints one JSON document on stdout; diagnostics go to
stderr. Exit codes: 0 ok, 1 usage error, 2 data or format error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import FormatError, NumericalError
from .tensor import ShapeError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
CONFIG_DIR_ENV = "DSSINET_CONFIG_DIR"

log = logging.getLogger("dssinet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _resolve_config(path: str | None, default_name: str) -> Path | None:
    """Explicit path first, then a bare name or the default inside $DSSINET_CONFIG_DIR."""
    base = os.environ.get(CONFIG_DIR_ENV)
    if path is not None:
        p = Path(path)
        if not p.exists() and base and not p.is_absolute():
            alt = Path(base) / p
            if alt.exists():
                return alt
        return p
    if base and (Path(base) / default_name).exists():
        return Path(base) / default_name
    return None


def _read_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FileNotFoundError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc.msg}", exc.pos, path) from None


def cmd_gen_gt(args) -> dict:
    from .density import adaptive_sigma, export_pgm, read_annotations, render_density, write_density

    ann = read_annotations(args.annotations)
    res = render_density(ann, adaptive_sigma(ann.points, args.k, args.beta))
    write_density(args.out, res.density)
    if args.pgm:
        export_pgm(args.pgm, res.density)
    if res.skipped:
        log.warning("skipped %d points outside the %dx%d canvas", res.skipped, ann.width, ann.height)
    return {"count": len(ann.points), "integral": float(res.density.sum()), "skipped_points": res.skipped}


def cmd_ssim(args) -> dict:
    from .density import read_density
    from .ssim import DmsSsimConfig, dms_ssim

    a = read_density(args.a)
    b = read_density(args.b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {args.a} is {a.shape[0]}x{a.shape[1]}, {args.b} is {b.shape[0]}x{b.shape[1]}")
    cfg_path = _resolve_config(args.config, "dms_ssim.json")
    cfg = DmsSsimConfig.from_dict(_read_json(cfg_path)) if cfg_path else DmsSsimConfig()
    res = dms_ssim(a, b, cfg)
    if any(res.clamped):
        log.warning("per-scale SSIM clamped to the floor at scales %s", [i for i, c in enumerate(res.clamped) if c])
    return {"dms_ssim": 1.0 - res.value, "loss": res.value, "per_scale": res.per_scale_values()}


def cmd_train(args) -> dict:
    from .train import TrainConfig, train

    cfg_path = _resolve_config(args.config, "train.json")
    if cfg_path is None:
        raise UsageError("train needs --config")
    cfg = TrainConfig.from_dict(_read_json(cfg_path))
    if args.checkpoint_dir:
        cfg.checkpoint_dir = args.checkpoint_dir
    if not cfg.checkpoint_dir:
        raise UsageError("training config has no checkpoint_dir")
    result = train(cfg)
    losses = [r["loss"] for r in result.log if "loss" in r]
    return {
        "checkpoint": str(Path(cfg.checkpoint_dir) / "model.ntb"),
        "log": str(Path(cfg.checkpoint_dir) / "train_log.jsonl"),
        "steps": cfg.steps,
        "final_loss": losses[-1] if losses else None,
        "best_val_mae": result.best_val_mae,
    }


def cmd_eval(args) -> dict:
    from .model import load_checkpoint
    from .train import evaluate, load_dataset

    params, _ = load_checkpoint(args.checkpoint)
    data = load_dataset(args.data)
    if not data:
        raise FormatError(f"no annotation files in {args.data}")
    return evaluate(params, data).to_dict()


def cmd_inspect(args) -> dict:
    from .model import config_hash, load_checkpoint

    params, loss_cfg = load_checkpoint(args.checkpoint)
    tensors = [
        {"name": k, "shape": list(v.shape), "norm": float(np.linalg.norm(v.data))} for k, v in params.tensors.items()
    ]
    return {
        "config_hash": config_hash(params.config, loss_cfg),
        "n_tensors": len(tensors),
        "n_params": int(sum(v.data.size for v in params.tensors.values())),
        "tensors": tensors,
    }


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dssinet", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="BLAS thread count; 1 gives the deterministic mode")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-gt", help="render a ground-truth density map from annotations")
    g.add_argument("--annotations", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--k", type=int, default=3)
    g.add_argument("--beta", type=float, default=0.3)
    g.add_argument("--pgm", help="also write a 16-bit PGM preview")
    g.set_defaults(fn=cmd_gen_gt)

    s = sub.add_parser("ssim", help="DMS-SSIM between two density maps")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.add_argument("--config")
    s.set_defaults(fn=cmd_ssim)

    t = sub.add_parser("train", help="train the mini network")
    t.add_argument("--config")
    t.add_argument("--checkpoint-dir")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="MAE/MSE of a checkpoint on a dataset directory")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.set_defaults(fn=cmd_eval)

    i = sub.add_parser("inspect", help="list checkpoint tensors")
    i.add_argument("--checkpoint", required=True)
    i.set_defaults(fn=cmd_inspect)
    return p


def _thread_limit(n: int | None):
    if n is None:
        return contextlib.nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        log.warning("threadpoolctl unavailable; --threads ignored")
        return contextlib.nullcontext()
    return threadpool_limits(limits=n)


def main(argv=None, stdout=None) -> int:
    stdout = stdout or sys.stdout
    logging.basicConfig(stream=sys.stderr, level=logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.verbose:
        log.setLevel(logging.INFO)
    try:
        with _thread_limit(args.threads):
            out = args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, ShapeError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    json.dump(out, stdout)
    stdout.write("\n")
    return EXIT_OK


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
