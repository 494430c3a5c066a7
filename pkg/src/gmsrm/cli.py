"""Command-line entry point wiring datasets, configs, training, inference,
mask generation and evaluation into reproducible runs.

Every run resolves its arguments (JSON config file merged with flag
overrides) into ``config.resolved.json`` inside the output directory before
any work starts. Exit codes: 0 success, 2 invalid arguments, 1 runtime
failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import imaging, metrics
from .exceptions import ConfigurationError, InvalidInputError, MaskGenerationError
from .model import ModelConfig, VARIANTS
from .training import TrainConfig, load_model, pretrain_memory, train_inpainting


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--size", type=int, default=None, help="square image side")
    p.add_argument("--n-scales", type=int, default=None)
    p.add_argument("--base-channels", type=int, default=None)
    p.add_argument("--d-c", type=int, default=None, help="latent embedding length")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--no-augment", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gmsrm")
    parser.add_argument("--config", type=str, default=None,
                        help="JSON file with defaults; flags override")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain-memory", help="pre-train the generative memory")
    p.add_argument("--data", type=str, default=None)
    p.add_argument("--out", type=str, default=None)
    _add_model_flags(p)
    _add_train_flags(p)

    p = sub.add_parser("train", help="train the inpainting model")
    p.add_argument("--data", type=str, default=None)
    p.add_argument("--memory", type=str, default=None,
                   help="memory checkpoint (omit for the base variant)")
    p.add_argument("--variant", type=str, default=None, choices=VARIANTS)
    p.add_argument("--out", type=str, default=None)
    _add_model_flags(p)
    _add_train_flags(p)

    p = sub.add_parser("infer", help="inpaint one image")
    p.add_argument("--ckpt", type=str, default=None)
    p.add_argument("--image", type=str, default=None)
    p.add_argument("--mask", type=str, default=None)
    p.add_argument("--out", type=str, default=None)
    p.add_argument("--composite", choices=("on", "off"), default=None,
                   help="paste known pixels over the output (default on)")
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("make-masks", help="generate a folder of masks")
    p.add_argument("--kind", choices=("center", "irregular"), default=None)
    p.add_argument("--ratio-lo", type=float, default=None)
    p.add_argument("--ratio-hi", type=float, default=None)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--out", type=str, default=None)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", type=str, default=None)
    p.add_argument("--gt", type=str, default=None)
    p.add_argument("--masks", type=str, default=None)
    p.add_argument("--report", type=str, default=None)
    p.add_argument("--region", choices=("full", "hole"), default=None)

    return parser


_DEFAULTS = {
    "size": 64, "n_scales": 4, "base_channels": 32, "d_c": 512,
    "steps": 2000, "batch": 4, "lr": 2e-4, "seed": 0,
    "variant": "gm-srm", "composite": "on", "region": "full", "count": 10,
}


def _resolve(args: argparse.Namespace, parser: argparse.ArgumentParser) -> dict:
    """Merge flag values over JSON-config values over built-in defaults."""
    file_cfg = {}
    if args.config:
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read --config {args.config}: {exc}")
        if not isinstance(file_cfg, dict):
            parser.error(f"--config {args.config} must hold a JSON object")
    resolved = {"command": args.command}
    for key, flag_value in vars(args).items():
        if key in ("command", "config"):
            continue
        value = flag_value
        if value in (None, False):
            value = file_cfg.get(key, value)
        if value is None:
            value = _DEFAULTS.get(key)
        resolved[key] = value
    return resolved


def _require(resolved: dict, parser: argparse.ArgumentParser, *keys: str) -> None:
    missing = [k for k in keys if resolved.get(k) is None]
    if missing:
        parser.error(f"missing required argument(s): "
                     + ", ".join(f"--{k.replace('_', '-')}" for k in missing))


def _write_resolved(resolved: dict, run_dir: Path) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / "config.resolved.json"
    path.write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")


def _model_config(resolved: dict, variant: str) -> ModelConfig:
    return ModelConfig(
        image_side=resolved["size"], n_scales=resolved["n_scales"],
        base_channels=resolved["base_channels"], d_c=resolved["d_c"],
        variant=variant,
    )


def _train_config(resolved: dict) -> TrainConfig:
    return TrainConfig(
        learning_rate=resolved["lr"], batch_size=resolved["batch"],
        max_steps=resolved["steps"], seed=resolved["seed"],
        augment=not resolved.get("no_augment", False),
    )


def _cmd_pretrain(resolved: dict, parser) -> int:
    _require(resolved, parser, "data", "out")
    out_dir = Path(resolved["out"])
    _write_resolved(resolved, out_dir)
    path = pretrain_memory(resolved["data"], out_dir,
                           _model_config(resolved, "gm-bm"),
                           _train_config(resolved))
    print(f"memory checkpoint: {path}")
    return 0


def _cmd_train(resolved: dict, parser) -> int:
    _require(resolved, parser, "data", "out", "variant")
    out_dir = Path(resolved["out"])
    _write_resolved(resolved, out_dir)
    path = train_inpainting(resolved["data"], resolved.get("memory"), out_dir,
                            _model_config(resolved, resolved["variant"]),
                            _train_config(resolved))
    print(f"model checkpoint: {path}")
    return 0


def _cmd_infer(resolved: dict, parser) -> int:
    _require(resolved, parser, "ckpt", "image", "mask", "out")
    out_path = Path(resolved["out"])
    _write_resolved(resolved, out_path.parent if out_path.parent != Path() else Path("."))
    model = load_model(resolved["ckpt"])
    img = imaging.load_image(resolved["image"], model.cfg.image_side)
    mask = imaging.load_mask(resolved["mask"])
    if mask.shape != img.shape[1:]:
        raise InvalidInputError(
            f"mask {mask.shape} does not match the model input size "
            f"{img.shape[1:]}"
        )
    pred = model.infer(img, mask, seed=resolved["seed"])
    if resolved["composite"] == "on":
        pred = imaging.composite(pred, img, mask)
    imaging.save_image(pred.astype(np.float32), out_path)
    print(f"wrote {out_path}")
    return 0


def _cmd_make_masks(resolved: dict, parser) -> int:
    _require(resolved, parser, "kind", "ratio_lo", "ratio_hi", "out", "size")
    out_dir = Path(resolved["out"])
    _write_resolved(resolved, out_dir)
    side = resolved["size"]
    for i in range(resolved["count"]):
        spec = imaging.MaskSpec(resolved["kind"], resolved["ratio_lo"],
                                resolved["ratio_hi"], resolved["seed"] + i)
        mask = imaging.generate_mask(side, side, spec)
        imaging.save_mask(mask, out_dir / f"mask_{i:04d}.png")
    print(f"wrote {resolved['count']} masks to {out_dir}")
    return 0


def _cmd_eval(resolved: dict, parser) -> int:
    _require(resolved, parser, "pred", "gt", "masks", "report")
    report_path = Path(resolved["report"])
    _write_resolved(resolved, report_path.parent if report_path.parent != Path() else Path("."))
    overall, buckets, rows = metrics.evaluate_dirs(
        resolved["pred"], resolved["gt"], resolved["masks"],
        region=resolved["region"],
    )
    metrics.write_report_json(report_path, overall, buckets, resolved["region"])
    metrics.write_per_image_csv(report_path.with_suffix(".csv"), rows)
    print(f"n_images={overall.n_images} psnr={overall.psnr:.4f} "
          f"ssim={overall.ssim:.4f} ncc={overall.ncc:.4f} lmse={overall.lmse:.6f}")
    for bucket, rep in buckets.items():
        print(f"  {bucket}: n={rep.n_images} psnr={rep.psnr:.4f} "
              f"ssim={rep.ssim:.4f} ncc={rep.ncc:.4f} lmse={rep.lmse:.6f}")
    print(f"report: {report_path}")
    return 0


_COMMANDS = {
    "pretrain-memory": _cmd_pretrain,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "make-masks": _cmd_make_masks,
    "eval": _cmd_eval,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    resolved = _resolve(args, parser)
    try:
        return _COMMANDS[args.command](resolved, parser)
    except SystemExit as exc:  # parser.error inside a command
        return int(exc.code or 0)
    except (InvalidInputError, ConfigurationError, MaskGenerationError,
            FileNotFoundError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
