"""Command line: ``vitpatch train | eval | predict``."""

from __future__ import annotations

import argparse
import datetime as _dt
import sys
from pathlib import Path
from typing import Optional, Sequence, TextIO

import numpy as np

from .autograd import set_precision, get_precision
from .checkpoint import CheckpointError, from_bytes, load_checkpoint, to_bytes
from .cnn import CNNConfig, CNNModel
from .data import (
    PRESET_RATIOS,
    DatasetError,
    DatasetSplit,
    LabeledPatch,
    generate_synthetic_dataset,
    load_dataset,
    read_class_map,
    read_image,
    split_dataset,
    write_split_manifest,
)
from .training import EpochLog, EvalResult, TrainConfig, TrainingError, evaluate, predict_batch, train
from .vit import CLASS_NAMES, ViTConfig, ViTModel

DX_LEGEND = "- DX code: Anaplastic Large cell Lymphoma->0; Classical Hodgkin lymphoma->1"

# argparse dests replayed from a manifest, in a stable order.
REPLAY_KEYS = (
    "arch", "data", "synthetic", "class_map", "ratios", "seed", "epochs", "batch_size", "lr",
    "precision", "out", "img_size", "patch_size", "channels", "d_model", "num_heads", "num_layers",
    "d_ff", "dropout", "num_classes", "conv_stages", "pool_size", "fc_widths",
)


def _ratios(text: str) -> tuple[float, float, float]:
    if text in PRESET_RATIOS:
        return PRESET_RATIOS[text]
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated ratios or a preset name, got {text!r}")
    try:
        return tuple(float(p) for p in parts)  # type: ignore[return-value]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _stages(text: str) -> tuple[tuple[int, int, int], ...]:
    try:
        return tuple(tuple(int(v) for v in s.split("x")) for s in text.split(","))  # type: ignore[misc]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"conv stages look like 8x3x1,16x4x1; got {text!r}") from exc


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group()
    src.add_argument("--data", help="dataset root laid out as DIR/<class>/*.png|jpg")
    src.add_argument("--synthetic", type=int, metavar="N", help="generate N synthetic patches per class")
    p.add_argument("--class-map", help="file of 'name<TAB>index' lines overriding sorted class order")
    p.add_argument("--ratios", type=_ratios, help="train,val,test fractions or a preset "
                   f"({', '.join(PRESET_RATIOS)}); default 0.9,0,0.1")
    p.add_argument("--seed", type=int, help="run seed (data generation, split, init, shuffling)")
    p.add_argument("--precision", choices=("float32", "float64"), default="float32")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vitpatch", description="Patch classification with a vision transformer or CNN baseline.")
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--arch", choices=("vit", "cnn"), default="vit")
    _add_data_flags(t)
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--lr", type=float, default=0.001)
    t.add_argument("--out", default="model.ckpt", help="checkpoint path")
    t.add_argument("--preset", choices=("default", "small"), default="default",
                   help="'small' is d_model 64, 3 layers, d_ff 256")
    t.add_argument("--from-manifest", help="replay the run recorded in a manifest file")
    vit = t.add_argument_group("model shape")
    vit.add_argument("--img-size", type=int)
    vit.add_argument("--patch-size", type=int)
    vit.add_argument("--channels", type=int)
    vit.add_argument("--d-model", type=int)
    vit.add_argument("--num-heads", type=int)
    vit.add_argument("--num-layers", type=int)
    vit.add_argument("--d-ff", type=int)
    vit.add_argument("--dropout", type=float)
    vit.add_argument("--num-classes", type=int)
    vit.add_argument("--conv-stages", type=_stages, help="CNN stages as FILTERSxKERNELxSTRIDE,...")
    vit.add_argument("--pool-size", type=int)
    vit.add_argument("--fc-widths", type=_ints, help="CNN hidden dense widths, comma separated")

    e = sub.add_parser("eval", help="evaluate a checkpoint and print the per-image report")
    e.add_argument("checkpoint")
    _add_data_flags(e)
    e.add_argument("--split", choices=("train", "validation", "test", "all"), default="test")

    pr = sub.add_parser("predict", help="diagnose unknown images with a trained checkpoint")
    pr.add_argument("checkpoint")
    pr.add_argument("images", nargs="+")
    pr.add_argument("--paper-format", action="store_true", help="omit the confidence column")
    pr.add_argument("--class-names", help="comma-separated names overriding the checkpoint's")
    pr.add_argument("--precision", choices=("float32", "float64"), default="float32")
    return parser


# ----------------------------------------------------------------------
# configs and data


def vit_config_from_args(args) -> ViTConfig:
    base = ViTConfig.small() if args.preset == "small" else ViTConfig()
    overrides = {
        "img_size": args.img_size, "patch_size": args.patch_size, "channels": args.channels,
        "d_model": args.d_model, "num_heads": args.num_heads, "num_layers": args.num_layers,
        "d_ff": args.d_ff, "dropout_rate": args.dropout, "num_classes": args.num_classes,
    }
    values = {**base.__dict__, **{k: v for k, v in overrides.items() if v is not None}}
    return ViTConfig(**values)


def cnn_config_from_args(args) -> CNNConfig:
    base = CNNConfig()
    overrides = {
        "img_size": args.img_size, "channels": args.channels, "conv_stages": args.conv_stages,
        "pool_size": args.pool_size, "fc_widths": args.fc_widths, "num_classes": args.num_classes,
    }
    values = {**base.__dict__, **{k: v for k, v in overrides.items() if v is not None}}
    return CNNConfig(**values)


def load_patches(args, img_size: int, channels: int, seed: int) -> tuple[list[LabeledPatch], list[str]]:
    if args.synthetic is not None:
        return generate_synthetic_dataset(args.synthetic, img_size, seed, channels), []
    if args.data is None:
        raise DatasetError("give either --data DIR or --synthetic N")
    class_map = read_class_map(Path(args.class_map)) if args.class_map else None
    return load_dataset(args.data, img_size, channels, class_map)


def resolve_class_names(num_classes: int, names: Sequence[str] = ()) -> list[str]:
    """DX names for the two-class setting, otherwise the given (directory) names."""
    if num_classes == len(CLASS_NAMES):
        return list(CLASS_NAMES)
    if len(names) == num_classes:
        return list(names)
    return [f"class {i}" for i in range(num_classes)]


def manifest_path(checkpoint) -> Path:
    return Path(str(checkpoint) + ".manifest")


def read_manifest(path) -> dict[str, str]:
    entries = {}
    for line in Path(path).read_text().splitlines():
        if " = " in line and not line.startswith("#"):
            key, value = line.split(" = ", 1)
            entries[key.strip()] = value
    return entries


def _fmt(value) -> str:
    if isinstance(value, tuple) and value and isinstance(value[0], tuple):
        return ",".join("x".join(str(v) for v in s) for s in value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def write_manifest(path, args, cfg, train_cfg: TrainConfig, class_names: Sequence[str]) -> None:
    lines = [
        "# vitpatch run manifest",
        "command = train",
        f"timestamp = {_dt.datetime.now(_dt.timezone.utc).isoformat(timespec='seconds')}",
        f"class_names = {'|'.join(class_names)}",
        f"model_config = {cfg!r}",
        f"train_config = {train_cfg!r}",
    ]
    for key in REPLAY_KEYS:
        value = getattr(args, key)
        if value is not None:
            lines.append(f"{key} = {_fmt(value)}")
    Path(path).write_text("\n".join(lines) + "\n")


def argv_from_manifest(path) -> list[str]:
    """Rebuild the ``train`` flag list recorded by :func:`write_manifest`."""
    entries = read_manifest(path)
    argv = ["train"]
    for key in REPLAY_KEYS:
        if key in entries:
            argv += ["--" + key.replace("_", "-"), entries[key]]
    return argv


# ----------------------------------------------------------------------
# reports


def banner_lines(model, split: DatasetSplit, train_cfg: TrainConfig) -> list[str]:
    cfg = model.cfg
    if isinstance(model, ViTModel):
        title = "VISION TRANSFORMER MODEL"
        about = "Patch classifier with multi-head attention, sine/cosine position encoding and residual connections"
        shape = [
            f"Size of images: {cfg.img_size}",
            f"Size of image patches: {cfg.patch_size}",
            f"Dimensionality of the model: {cfg.d_model}",
            f"Number of attention heads: {cfg.num_heads}",
            f"Number of transformer layers: {cfg.num_layers}",
            f"learning rate: {train_cfg.lr}",
            f"Feedforward dimension: {cfg.d_ff}",
            f"Dropout rate: {cfg.dropout_rate}",
        ]
    else:
        title = "CONVOLUTIONAL NEURAL NETWORK MODEL"
        about = "Baseline patch classifier with convolution, max pooling and fully connected layers"
        shape = [
            f"Size of images: {cfg.img_size}",
            f"Convolution stages (filters x kernel x stride): {_fmt(cfg.conv_stages)}",
            f"Max pooling side: {cfg.pool_size}",
            f"Fully connected widths: {_fmt(cfg.fc_widths)}",
            f"learning rate: {train_cfg.lr}",
        ]
    counts = [f"Number of images in Training set: {len(split.train)}"]
    if split.validation:
        counts.append(f"Number of images in Validation set: {len(split.validation)}")
    counts.append(f"Number of images in Testing set: {len(split.test)}")
    return [
        "+++++++",
        title,
        about,
        "*****",
        "PARAMETERS OF MODEL:",
        *counts,
        *shape,
        f"Number of epochs: {train_cfg.num_epochs}",
        f"Number of prediction classes: {cfg.num_classes}",
        f"Number of cases in each reading batch for datasets: {train_cfg.batch_size}",
        f"Number of trainable parameters: {model.num_parameters()}",
        "+++++++",
        f"TRAINING THE {title}:",
        "Loss in each epoch:",
    ]


def legend_line(class_names: Sequence[str]) -> str:
    if list(class_names) == list(CLASS_NAMES):
        return DX_LEGEND
    return "- DX code: " + "; ".join(f"{name}->{i}" for i, name in enumerate(class_names))


def report_lines(result: EvalResult, class_names: Sequence[str]) -> list[str]:
    lines = [
        f"- Results: accuracy of the network on {result.total} test images: {result.accuracy} %",
        "+++++",
        legend_line(class_names),
        "+++++",
    ]
    for i, (label, pred) in enumerate(result.records, 1):
        lines += [f"[Image {i}]", f"DX: {label} ; Predicted DX: {pred}", "+++++"]
    return lines


def _emit(lines, out: TextIO) -> None:
    for line in lines:
        print(line, file=out)
    out.flush()


# ----------------------------------------------------------------------
# commands


def _record_resolved(args, cfg) -> None:
    # The manifest stores resolved shapes, so replay never depends on presets.
    if isinstance(cfg, ViTConfig):
        for key in ("img_size", "patch_size", "channels", "d_model", "num_heads", "num_layers", "d_ff", "num_classes"):
            setattr(args, key, getattr(cfg, key))
        args.dropout = cfg.dropout_rate
    else:
        for key in ("img_size", "channels", "conv_stages", "pool_size", "fc_widths", "num_classes"):
            setattr(args, key, getattr(cfg, key))


def cmd_train(args, out: TextIO) -> int:
    if args.from_manifest:
        replay = build_parser().parse_args(argv_from_manifest(args.from_manifest))
        replay.from_manifest = None
        return cmd_train(replay, out)
    set_precision(args.precision)
    seed = 0 if args.seed is None else args.seed
    args.seed = seed
    ratios = args.ratios or PRESET_RATIOS["default"]
    args.ratios = ratios
    train_cfg = TrainConfig(lr=args.lr, num_epochs=args.epochs, batch_size=args.batch_size, seed=seed)
    cfg = vit_config_from_args(args) if args.arch == "vit" else cnn_config_from_args(args)
    _record_resolved(args, cfg)

    patches, dir_names = load_patches(args, cfg.img_size, cfg.channels, seed)
    if dir_names and len(dir_names) != cfg.num_classes:
        raise DatasetError(f"dataset has {len(dir_names)} classes but the model is configured for {cfg.num_classes}")
    class_names = resolve_class_names(cfg.num_classes, dir_names)
    split = split_dataset(patches, ratios, seed)

    rng = np.random.default_rng(seed)
    model = ViTModel.init(cfg, rng) if args.arch == "vit" else CNNModel.init(cfg, rng)
    _emit(banner_lines(model, split, train_cfg), out)

    def on_epoch(log: EpochLog) -> None:
        lines = [log.line()]
        if log.val_accuracy is not None:
            lines.append(f"  validation accuracy: {log.val_accuracy} %")
        _emit(lines, out)

    if train_cfg.num_epochs > 0:
        train(model, split.train, train_cfg, rng, validation=split.validation, on_epoch=on_epoch)

    ckpt = Path(args.out)
    blob = to_bytes(model)
    ckpt.write_bytes(blob)
    write_manifest(manifest_path(ckpt), args, cfg, train_cfg, class_names)
    write_split_manifest(split, str(ckpt) + ".split.tsv")

    lines = ["+++++", "- Training was completed", f"- Checkpoint written to {ckpt}"]
    if split.test:
        # Report from the serialised parameters so it matches a later `eval`.
        lines += report_lines(evaluate(from_bytes(blob), split.test), class_names)
    _emit(lines, out)
    return 0


def cmd_eval(args, out: TextIO) -> int:
    set_precision(args.precision)
    model = load_checkpoint(args.checkpoint)
    recorded = read_manifest(manifest_path(args.checkpoint)) if manifest_path(args.checkpoint).exists() else {}
    seed = args.seed if args.seed is not None else int(recorded.get("seed", 0))
    ratios = args.ratios or (_ratios(recorded["ratios"]) if "ratios" in recorded else PRESET_RATIOS["default"])
    if args.data is None and args.synthetic is None:
        if "data" in recorded:
            args.data = recorded["data"]
        elif "synthetic" in recorded:
            args.synthetic = int(recorded["synthetic"])
        if args.class_map is None and "class_map" in recorded:
            args.class_map = recorded["class_map"]
    cfg = model.cfg
    patches, dir_names = load_patches(args, cfg.img_size, cfg.channels, seed)
    recorded_names = recorded["class_names"].split("|") if "class_names" in recorded else []
    class_names = resolve_class_names(cfg.num_classes, dir_names or recorded_names)
    if args.split == "all":
        chosen = patches
    else:
        chosen = getattr(split_dataset(patches, ratios, seed), args.split)
    if not chosen:
        raise DatasetError(f"the {args.split} split is empty; nothing to evaluate")
    _emit(report_lines(evaluate(model, chosen), class_names), out)
    return 0


def cmd_predict(args, out: TextIO, err: TextIO) -> int:
    set_precision(args.precision)
    model = load_checkpoint(args.checkpoint)
    cfg = model.cfg
    if args.class_names:
        class_names = args.class_names.split(",")
    else:
        mpath = manifest_path(args.checkpoint)
        recorded = read_manifest(mpath).get("class_names", "") if mpath.exists() else ""
        class_names = resolve_class_names(cfg.num_classes, recorded.split("|") if recorded else ())
    failures = 0
    for path in args.images:
        name = Path(path).name
        try:
            pixels = read_image(Path(path), cfg.channels)
            if pixels.shape[1:] != (cfg.img_size, cfg.img_size):
                raise DatasetError(f"found {pixels.shape[1]}x{pixels.shape[2]}, expected {cfg.img_size}x{cfg.img_size}")
        except DatasetError as exc:
            failures += 1
            print(f"{name}: error: {exc}", file=err)
            continue
        preds, probs = predict_batch(model, pixels[None])
        pred = int(preds[0])
        label = class_names[pred] if pred < len(class_names) else f"class {pred}"
        line = f"{name}: Predicted DX: {pred} ({label})"
        if not args.paper_format:
            line += f" confidence: {probs[0, pred]:.4f}"
        print(line, file=out)
    out.flush()
    return 1 if failures else 0


def main(argv: Optional[Sequence[str]] = None, out: TextIO = sys.stdout, err: TextIO = sys.stderr) -> int:
    args = build_parser().parse_args(argv)
    previous = get_precision()
    try:
        if args.command == "train":
            return cmd_train(args, out)
        if args.command == "eval":
            return cmd_eval(args, out)
        return cmd_predict(args, out, err)
    except (DatasetError, CheckpointError, TrainingError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=err)
        return 1
    finally:
        set_precision(previous)


if __name__ == "__main__":
    sys.exit(main())
