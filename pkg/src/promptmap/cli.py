"""``promptmap`` command line: pretrain, tune, eval, analyze, census.

Exit codes: 0 success, 1 validation error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import runner
from .checkpoint import load_checkpoint
from .config import METHODS, apply_overrides, from_dict, load_config
from .errors import ContractError, NumericError, ValidationError

log = logging.getLogger("promptmap")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config")
    common.add_argument("--checkpoint", help="checkpoint to start from or inspect")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--method", choices=METHODS)
    common.add_argument("--c", type=int, help="window width (odd)")
    common.add_argument("--gamma", type=float)
    common.add_argument("--lambda", dest="lam", type=float, help="weight of the base-pathway loss")
    common.add_argument("--t", type=int, help="adapter bottleneck width")
    common.add_argument("--scale", type=int)
    depth = common.add_mutually_exclusive_group()
    depth.add_argument("--deep", dest="mode", action="store_const", const="deep")
    depth.add_argument("--shallow", dest="mode", action="store_const", const="shallow")
    common.add_argument("--global-attention", dest="global_attention", action="store_true", default=None)
    common.add_argument("--no-adapter", dest="adapter", action="store_false", default=None)
    common.add_argument("--epochs", type=int)
    common.add_argument("--lr", type=float)
    common.add_argument("--dtype", choices=("float64", "float32"))
    common.add_argument("--data-folder", dest="folder", help="class-per-directory image folder")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="promptmap", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", parents=[common], help="train a backbone from scratch")
    sub.add_parser("tune", parents=[common], help="prompt-tune a pretrained backbone")
    sub.add_parser("eval", parents=[common], help="evaluate a tuned checkpoint")
    p = sub.add_parser("analyze", parents=[common], help="salient-token similarity map")
    p.add_argument("--image", help="image file to analyse (default: first test image)")
    p = sub.add_parser("census", parents=[common], help="parameter counts and tuned/total ratio")
    p.add_argument("--num-classes", type=int)
    p.add_argument("--json", action="store_true", help="print the report as JSON")
    return parser


def _overrides(args) -> dict:
    return {
        "seed": args.seed, "method": args.method, "out": args.out,
        "prompt.c": args.c, "prompt.gamma": args.gamma, "prompt.t": args.t, "prompt.scale": args.scale,
        "prompt.mode": args.mode, "prompt.global_attention": args.global_attention,
        "prompt.adapter": args.adapter, "train.lam": args.lam, "train.epochs": args.epochs,
        "train.learning_rate": args.lr, "train.dtype": args.dtype, "data.folder": args.folder,
    }


def _need_checkpoint(args):
    if not args.checkpoint:
        raise ValidationError(f"{args.command} needs --checkpoint")
    return load_checkpoint(args.checkpoint)


def _run(args) -> dict:
    raw = load_config(args.config)
    over = _overrides(args)
    if args.command == "pretrain":
        data = dict(raw.get("data") or {})
        data.setdefault("variant", "task_A_pretrain")
        if data["variant"] == "task_A_pretrain" and "num_classes" not in data:
            data["num_classes"] = (raw.get("backbone") or {}).get("num_pretrain_classes", 6)
        raw = {**raw, "data": data}
        return runner.run_pretrain(from_dict(apply_overrides(raw, over)))
    if args.command == "tune":
        ckpt = _need_checkpoint(args)
        raw = runner.backbone_config_for(raw, ckpt)
        return runner.run_tune(from_dict(apply_overrides(raw, over)), ckpt)
    if args.command == "census" and not args.checkpoint:
        report = runner.run_census(from_dict(apply_overrides(raw, over)), num_classes=args.num_classes)
        return report
    ckpt = _need_checkpoint(args)
    # later layers win: checkpoint config, then the file, then flags
    merged = dict(ckpt.config)
    for key, value in raw.items():
        merged[key] = {**merged.get(key, {}), **value} if isinstance(value, dict) else value
    merged.setdefault("out", str(getattr(args, "checkpoint")) + ".d")
    cfg = from_dict(apply_overrides(merged, over))
    if args.command == "eval":
        return runner.run_eval(cfg, ckpt)
    if args.command == "analyze":
        return runner.run_analyze(cfg, ckpt, args.image)
    return runner.run_census(cfg, ckpt, args.num_classes)


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = _run(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        if exc.state:
            print(json.dumps(exc.state, default=str), file=sys.stderr)
        return 2
    except (ValidationError, FileNotFoundError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.command == "census" and not args.json:
        print(result["text"])
    else:
        print(json.dumps({k: v for k, v in result.items() if k != "text"}, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
