"""``barlow-swin`` command line: synth, pretrain, finetune, evaluate, predict, gradcheck."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ENCODER_KEYS, KEYS, RunConfig, load_config
from .data import DatasetManifest, load_image, load_split, read_raster, resize_bilinear, synth_dataset, write_dataset, write_png
from .decoder import BarlowSwin
from .encoder import SwinEncoder
from .exceptions import CheckpointError, ConfigError, DataError
from .gradcheck import format_table, run_suite
from .losses import Projector
from .metrics import export_report
from .training import evaluate, finetune, predict_batches, pretrain

log = logging.getLogger("barlow_swin")

MODEL_KEYS = tuple(k for k, (section, _) in KEYS.items() if section in ("encoder", "decoder"))


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def model_rng(cfg: RunConfig) -> np.random.Generator:
    return np.random.default_rng([cfg.train.seed, 0])


def build_model(cfg: RunConfig) -> BarlowSwin:
    return BarlowSwin(cfg.encoder, cfg.decoder, model_rng(cfg))


def _manifest(data_dir) -> DatasetManifest:
    return DatasetManifest.load(Path(data_dir) / "manifest.tsv")


def _check_compatible(ckpt: Checkpoint, cfg: RunConfig, keys) -> None:
    if not ckpt.config:
        return
    ours = cfg.snapshot()
    diff = [k for k in keys if k in ckpt.config and ckpt.config[k] != ours[k]]
    if diff:
        k = diff[0]
        raise CheckpointError(
            f"config/checkpoint mismatch on {k}: checkpoint has {ckpt.config[k]}, config has {ours[k]}"
            + (f" (+{len(diff) - 1} more)" if len(diff) > 1 else "")
        )


def load_model(ckpt_path, cfg: RunConfig) -> BarlowSwin:
    ckpt = load_checkpoint(ckpt_path)
    if ckpt.mode != "full_model":
        raise CheckpointError(f"{ckpt_path}: expected a full_model checkpoint, got {ckpt.mode}")
    _check_compatible(ckpt, cfg, MODEL_KEYS)
    model = build_model(cfg)
    try:
        model.load_state_dict(ckpt.tensors, strict=True)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{ckpt_path}: {exc}") from None
    return model.eval()


def _write_history(path: Path, rows: List[dict]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})


def _history_path(out: Path, given: Optional[str]) -> Path:
    return Path(given) if given else out.with_name(out.name + ".history.csv")


# --- commands ---------------------------------------------------------------


def cmd_synth(args) -> None:
    pairs = synth_dataset(args.n, args.size, args.kind, args.seed)
    manifest = write_dataset(pairs, args.out, seed=args.seed)
    print(f"wrote {len(pairs)} {args.kind} samples to {args.out} ({manifest.counts()})")


def cmd_pretrain(args) -> None:
    cfg = load_config(args.config, args.set)
    manifest = _manifest(args.data)
    size = cfg.encoder.image_size
    # images only: pretraining never reads masks
    images = [load_image(manifest.resolve(img), size) for img, _ in manifest.subset("train")]
    encoder = SwinEncoder(cfg.encoder, model_rng(cfg))
    projector = Projector(cfg.encoder.stage_channels[-1], cfg.projector, np.random.default_rng([cfg.train.seed, 5]))
    result = pretrain(encoder, projector, images, cfg.train, cfg.bt, cfg.augment, config_snapshot=cfg.snapshot())
    out = Path(args.out)
    save_checkpoint(result.checkpoint, out)
    _write_history(_history_path(out, args.history),
                   [{"epoch": i + 1, "bt_loss": v} for i, v in enumerate(result.history)])
    print(f"pretrained {len(result.history)} epochs ({result.steps} steps); best loss {result.best_loss:.6f} "
          f"at epoch {result.best_epoch}; wrote {out}")


def cmd_finetune(args) -> None:
    cfg = load_config(args.config, args.set)
    manifest = _manifest(args.data)
    size = cfg.encoder.image_size
    train_x, train_y, _ = load_split(manifest, "train", size)
    val_x, val_y, _ = load_split(manifest, "val", size)
    init = None
    if args.init:
        init = load_checkpoint(args.init)
        _check_compatible(init, cfg, ENCODER_KEYS)
    model = build_model(cfg)
    result = finetune(model, (train_x, train_y), (val_x, val_y), cfg.train, cfg.seg, cfg.augment, init=init,
                      config_snapshot=cfg.snapshot())
    out = Path(args.out)
    save_checkpoint(result.checkpoint, out)
    _write_history(_history_path(out, args.history), result.history)
    print(f"fine-tuned {result.epochs_run} epochs; best val loss {result.best_val_loss:.6f} at epoch "
          f"{result.best_epoch}; wrote {out}")


def cmd_evaluate(args) -> None:
    cfg = load_config(args.config, args.set)
    model = load_model(args.ckpt, cfg)
    images, masks, names = load_split(_manifest(args.data), args.split, cfg.encoder.image_size)
    if not images:
        raise DataError(f"split {args.split!r} is empty")
    report = evaluate(model, images, masks, names, threshold=args.threshold, batch_size=cfg.train.batch_size)
    export_report(report, args.report)
    mean = report.mean()
    print("  ".join(f"{k}={v:.4f}" for k, v in mean.items()) + f"  (n={len(report)}) -> {args.report}")


def cmd_predict(args) -> None:
    cfg = load_config(args.config, args.set)
    model = load_model(args.ckpt, cfg)
    src = Path(args.image)
    h, w = read_raster(src).shape[:2]
    prob = predict_batches(model, [load_image(src, cfg.encoder.image_size)], 1)[0]
    prob = np.clip(resize_bilinear(prob, (h, w)), 0.0, 1.0)
    out = Path(args.out)
    write_png(out, np.round(prob * 255.0).astype(np.uint8))
    binary = out.with_name(out.stem + "_binary" + (out.suffix or ".png"))
    write_png(binary, (prob >= args.threshold).astype(np.uint8) * 255)
    print(f"wrote {out} and {binary} ({h}x{w})")


def cmd_gradcheck(args) -> int:
    if args.config or args.set:
        load_config(args.config, args.set)  # validated for consistency; the suite has fixed small shapes
    try:
        reports = run_suite(args.module)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    print(format_table(reports))
    failed = [r.name for r in reports if not r.passed]
    if failed:
        print(f"gradcheck failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="barlow-swin", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(p, required_config=False):
        p.add_argument("--config", required=required_config, help="key = value run configuration file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
        return p

    p = sub.add_parser("synth", help="write a synthetic image/mask dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--kind", choices=("disks", "vessels"), default="disks")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = with_config(sub.add_parser("pretrain", help="self-supervised encoder pretraining"))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--history", help="loss-history CSV (default: <out>.history.csv)")
    p.set_defaults(func=cmd_pretrain)

    p = with_config(sub.add_parser("finetune", help="supervised segmentation training"))
    p.add_argument("--data", required=True)
    p.add_argument("--init", help="encoder checkpoint from pretrain")
    p.add_argument("--out", required=True)
    p.add_argument("--history", help="history CSV (default: <out>.history.csv)")
    p.set_defaults(func=cmd_finetune)

    p = with_config(sub.add_parser("evaluate", help="metrics report on a dataset split"))
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_evaluate)

    p = with_config(sub.add_parser("predict", help="segment one image"))
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_predict)

    p = with_config(sub.add_parser("gradcheck", help="finite-difference gradient suite"))
    p.add_argument("--module", help="restrict to one check or group (primitives, swin_block, double_conv, losses)")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except CliError as exc:
        print(f"barlow-swin: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        status = args.func(args)
    except (ConfigError, CheckpointError, DataError, OSError, ValueError) as exc:
        msg = " ".join(str(exc).split())
        print(f"barlow-swin: error: {msg}", file=sys.stderr)
        return 1
    return int(status or 0)


if __name__ == "__main__":
    sys.exit(main())
