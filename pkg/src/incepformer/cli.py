"""Command-line interface: analyze, gradcheck, train, eval, infer.

Exit codes are stable per error class: 0 success, 1 operation failure
(including gradient-check failures and runtime errors), 2 usage errors,
3 invalid configuration or input files.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import tensor as T
from .analysis import count_params, emit_report, estimate_flops
from .config import PRESETS, load_model_config
from .data import SyntheticSource, class_colors
from .errors import CheckpointError, ConfigError, ContractError, IncepFormerError
from .gradcheck import check_model_gradients, check_op_gradients
from .metrics import eval_miou
from .model import build_model, freeze_batchnorm_stats
from .netpbm import read_image, write_pgm, write_ppm
from .tensor import Tensor


def _parse_size(text: str) -> tuple[int, int]:
    """Parse 'WxH' into (height, width)."""
    try:
        w, h = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise ConfigError(f"expected a WxH size, got {text!r}") from None


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="incepformer", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, model_default=None):
        p.add_argument("--model", default=model_default,
                       help=f"preset name ({', '.join(sorted(PRESETS))}) or JSON config path")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--dtype", choices=("f32", "f64"), default="f32")
        p.add_argument("--patch-mode", choices=("nonoverlap", "overlap"), default=None)

    p = sub.add_parser("analyze", help="parameter counts and FLOP estimates")
    common(p, model_default="ipt-t")
    p.add_argument("--input", default=None, help="input size WxH for FLOP estimation")
    p.add_argument("--format", choices=("json", "csv", "table"), default="table")
    p.add_argument("--out", default=None, help="write the report here instead of stdout")

    p = sub.add_parser("gradcheck", help="autodiff vs finite-difference comparison")
    common(p, model_default="micro")
    p.add_argument("--input", default="32x32")

    p = sub.add_parser("train", help="train on the synthetic dataset")
    common(p, model_default="micro")
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--lr", type=float, default=6e-5)
    p.add_argument("--crop", default="64x64")
    p.add_argument("--checkpoint", default=None, help="write the final checkpoint here")
    p.add_argument("--resume", default=None, help="resume from this checkpoint")
    p.add_argument("--out", default=None, help="also write the loss log to this file")

    p = sub.add_parser("eval", help="mIoU on the synthetic dataset")
    common(p, model_default="micro")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--crop", default="64x64", help="synthetic image size WxH")
    p.add_argument("--format", choices=("json", "csv", "table"), default="csv")

    p = sub.add_parser("infer", help="segment a P5/P6 netpbm image")
    p.add_argument("image", help="input image (binary PGM or PPM)")
    common(p, model_default="micro")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--out", required=True, help="class-index mask path (PGM, P5)")
    p.add_argument("--color-out", default=None, help="optional color mask path (PPM, P6)")
    return parser


def _load_cfg(args):
    if args.model is None:
        raise ConfigError("--model is required")
    cfg = load_model_config(args.model)
    if args.patch_mode is not None:
        from dataclasses import replace

        cfg = replace(cfg, patch_mode=args.patch_mode)
        cfg.validate()
    return cfg


def _cmd_analyze(args) -> int:
    cfg = _load_cfg(args)
    if args.input is None:
        report = count_params(cfg)
    else:
        h, w = _parse_size(args.input)
        report = estimate_flops(cfg, h, w)
    payload = emit_report(report, args.format)
    if args.out:
        with open(args.out, "wb") as fh:
            fh.write(payload)
    else:
        sys.stdout.buffer.write(payload)
        sys.stdout.flush()
    return 0


def _cmd_gradcheck(args) -> int:
    from .train import cross_entropy

    h, w = _parse_size(args.input)
    cfg = _load_cfg(args)
    rows = check_op_gradients(seed=args.seed)
    model = build_model(cfg, seed=args.seed, dtype=args.dtype)
    model.train()
    freeze_batchnorm_stats(model)
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 42]))
    image = Tensor(rng.uniform(0.0, 1.0, (2, 3, h, w)), dtype=args.dtype)
    labels = rng.integers(0, cfg.num_classes, (2, h, w))

    def loss_fn():
        logits = model(image)
        up = T.bilinear_upsample(logits, h, w, align_corners=False)
        return cross_entropy(up, labels)

    rows += check_model_gradients(model, loss_fn)
    width = max(len(r.name) for r in rows)
    print(f"{'check':<{width}}  {'rel_err':>12}  {'tol':>8}  status")
    failures = 0
    for r in rows:
        status = "ok" if r.ok else "FAIL"
        failures += 0 if r.ok else 1
        print(f"{r.name:<{width}}  {r.rel_err:>12.3e}  {r.tol:>8.0e}  {status}")
    print(f"# {len(rows) - failures}/{len(rows)} gradient checks passed")
    return 0 if failures == 0 else 1


def _cmd_train(args) -> int:
    from .train import TrainConfig, train

    cfg = _load_cfg(args)
    ch, cw = _parse_size(args.crop)
    tcfg = TrainConfig(base_lr=args.lr, max_iters=args.iters, batch_size=args.batch,
                       crop=(ch, cw), seed=args.seed)
    dataset = SyntheticSource(16, ch, cw, cfg.num_classes, args.seed).load()
    lines: list[str] = []

    def log(it, lr, loss):
        line = f"{it},{lr:.8g},{loss:.8g}"
        lines.append(line)
        print(line)

    train(cfg, tcfg, dataset, dtype=args.dtype,
          checkpoint_path=args.checkpoint, resume_from=args.resume, log=log)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("iter,lr,loss\n")
            fh.write("\n".join(lines) + "\n")
    return 0


def _cmd_eval(args) -> int:
    import json as _json

    from .train import TrainConfig, load_training_checkpoint

    cfg = _load_cfg(args)
    ch, cw = _parse_size(args.crop)
    model = build_model(cfg, seed=args.seed, dtype=args.dtype)
    if args.checkpoint:
        load_training_checkpoint(args.checkpoint, model)
    dataset = SyntheticSource(8, ch, cw, cfg.num_classes, args.seed + 1).load()
    result = eval_miou(model, dataset, TrainConfig(seed=args.seed))
    if args.format == "json":
        doc = {
            "miou": result.miou,
            "per_class": [None if np.isnan(v) else float(v) for v in result.per_class],
        }
        print(_json.dumps(doc, indent=2))
    else:
        print("class,iou")
        for i, v in enumerate(result.per_class):
            print(f"{i},{'' if np.isnan(v) else f'{v:.6f}'}")
        print(f"miou,{result.miou:.6f}")
    return 0


def _cmd_infer(args) -> int:
    from .train import load_training_checkpoint

    cfg = _load_cfg(args)
    image = read_image(args.image)
    _, h, w = image.shape
    if h % 32 or w % 32:
        raise ConfigError(f"input image dims must be divisible by 32, got {w}x{h}")
    model = build_model(cfg, seed=args.seed, dtype=args.dtype)
    if args.checkpoint:
        load_training_checkpoint(args.checkpoint, model)
    model.eval()
    logits = model(Tensor(image[None], dtype=args.dtype))
    up = T.bilinear_upsample(logits, h, w, align_corners=False)
    mask = np.argmax(up.data[0], axis=0)
    if mask.max() > 255:
        raise ContractError("more than 256 classes cannot be written as 8-bit PGM")
    write_pgm(args.out, mask.astype(np.uint8))
    if args.color_out:
        palette = (class_colors(cfg.num_classes) * 255).astype(np.uint8)
        write_ppm(args.color_out, palette[mask])
    return 0


_COMMANDS = {
    "analyze": _cmd_analyze,
    "gradcheck": _cmd_gradcheck,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "infer": _cmd_infer,
}


def run_cli(argv: list[str]) -> int:
    """Run one invocation; returns the exit code instead of exiting."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (ContractError, CheckpointError, IncepFormerError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main():
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
