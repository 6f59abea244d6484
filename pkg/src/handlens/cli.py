"""Command-line surface: scan | params | lr-find | train | eval | predict.

Every artifact written under --out embeds the merged run configuration and
the tool version, so a run can be reproduced from any of its outputs.
Exit status is nonzero whenever any module contract fires (including a
diverged training fold, which is reported and excluded from aggregation).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig, apply_overrides, config_from_file
from .data import PixelStats, augment, compute_stats, kfold_split, load_image, \
    load_manifest, load_manifest_file, resize_and_crop, save_fold_plan, \
    save_manifest, standardize
from .metrics import confusion, cv_aggregate, format_confusion, format_report, \
    report_from_confusion, sum_confusions
from .nn import build_model, count_parameters, freeze_backbone, parameter_breakdown
from .optim import cross_entropy, lr_range_test, softmax
from .tensor import Tensor, backward
from .train import fit, format_train_log, make_optimizer


def _config_lines(cfg: RunConfig) -> list[str]:
    return [f"tool_version = {__version__}", *cfg.to_lines()]


def _load_dataset(cfg: RunConfig):
    if not cfg.dataset_root:
        raise ValueError("no dataset root configured (set --data or dataset_root)")
    manifest = load_manifest(cfg.dataset_root)
    images = [load_image(s.path) for s in manifest.samples]
    labels = np.array([s.class_index for s in manifest.samples], dtype=np.int64)
    return manifest, images, labels


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------


def cmd_scan(cfg: RunConfig) -> int:
    if not cfg.dataset_root:
        raise ValueError("no dataset root configured (set --data or dataset_root)")
    manifest = load_manifest(cfg.dataset_root)
    counts = manifest.counts
    width = max(len(n) for n in manifest.class_names)
    print(f"{'class':<{width}}\tcount")
    for name, count in zip(manifest.class_names, counts):
        print(f"{name:<{width}}\t{count}")
        if count == 0:
            print(f"warning: class folder {name!r} holds no readable images",
                  file=sys.stderr)
    print(f"{'total':<{width}}\t{sum(counts)}")
    for path, reason in manifest.skipped:
        print(f"warning: skipped {path}: {reason}", file=sys.stderr)
    out = _out_dir(cfg)
    lines = ["# handlens class distribution v1"]
    lines += [f"# config: {raw}" for raw in _config_lines(cfg)]
    lines += [f"{name}\t{count}" for name, count in zip(manifest.class_names, counts)]
    (out / "scan.tsv").write_text("\n".join(lines) + "\n")
    return 0


def cmd_params(cfg: RunConfig) -> int:
    model = build_model(cfg.arch, cfg.num_classes, head=cfg.head, seed=cfg.seed)
    rows = parameter_breakdown(model)
    total = count_parameters(model)
    if sum(n for _, n in rows) != total:
        raise AssertionError("per-layer breakdown does not sum to the total")
    width = max(len(name) for name, _ in rows)
    for name, n in rows:
        print(f"{name:<{width}}\t{n:>12,}")
    print(f"{'total':<{width}}\t{total:>12,}")
    return 0


def cmd_lr_find(cfg: RunConfig) -> int:
    _, images, labels = _load_dataset(cfg)
    stats = compute_stats(images, roles=["train"] * len(images))
    settings = cfg.train_settings()
    model = cfg.model_builder()(cfg.seed)
    optimizer = make_optimizer(cfg.optimizer, model.parameters(),
                               lr=cfg.lr_find_min, weight_decay=cfg.weight_decay,
                               beta2=cfg.beta2, eps=cfg.eps)
    order_rng = np.random.default_rng([cfg.seed, 17])
    order = order_rng.permutation(len(images))
    cursor = {"i": 0, "step": 0}

    def next_batch():
        idx = []
        for _ in range(min(cfg.batch_size, len(images))):
            idx.append(int(order[cursor["i"] % len(order)]))
            cursor["i"] += 1
        batch = []
        for i in idx:
            rng = np.random.default_rng([cfg.seed, 23, cursor["step"], i])
            img = resize_and_crop(images[i], cfg.resize_to, cfg.crop_size,
                                  mode="random", rng=rng)
            batch.append(augment(img, settings.augmentation, rng))
        return standardize(np.stack(batch), stats), labels[idx]

    def step_fn(lr):
        x, y = next_batch()
        optimizer.set_lr(lr)
        drop_rng = np.random.default_rng([cfg.seed, 29, cursor["step"]])
        cursor["step"] += 1
        logits = model(Tensor(x), train=True, rng=drop_rng)
        loss = cross_entropy(logits, y)
        model.zero_grad()
        backward(loss)
        optimizer.step()
        return loss.item()

    result = lr_range_test(step_fn, lr_min=cfg.lr_find_min, lr_max=cfg.lr_find_max,
                           steps=cfg.lr_find_steps, smoothing=cfg.lr_find_smoothing,
                           divergence_factor=cfg.lr_find_divergence)
    out = _out_dir(cfg)
    lines = ["# handlens lr range test v1"]
    lines += [f"# config: {raw}" for raw in _config_lines(cfg)]
    lines += [f"# suggestion {result.suggestion!r}",
              f"# stopped_early {result.stopped_early}"]
    lines += [f"{lr!r}\t{loss!r}"
              for lr, loss in zip(result.lrs, result.smoothed_losses)]
    (out / "lrfind.tsv").write_text("\n".join(lines) + "\n")
    print(f"suggested lr: {result.suggestion:.6g}")
    if result.stopped_early:
        print(f"stopped early at lr {result.stop_lr:.6g} (loss diverging)")
    return 0


def _fold_checkpoint_config(cfg, manifest, stats, fold):
    return {
        "run_config": cfg.to_dict(),
        "class_names": list(manifest.class_names),
        "pixel_mean": stats.mean.tolist(),
        "pixel_std": stats.std.tolist(),
        "fold": fold,
    }


def cmd_train(cfg: RunConfig, mode: str, init_from: str | None = None,
              freeze_body: bool = False) -> int:
    manifest, images, labels = _load_dataset(cfg)
    if len(manifest.class_names) != cfg.num_classes:
        raise ValueError(
            f"dataset has {len(manifest.class_names)} classes but the config "
            f"says num_classes={cfg.num_classes}")
    plan = kfold_split(len(images), cfg.k, cfg.seed,
                       labels=labels, stratified=cfg.stratified)
    out = _out_dir(cfg)
    save_manifest(out / "manifest.tsv", manifest)
    save_fold_plan(out / "folds.tsv", plan)

    if init_from:
        def builder(seed, _path=init_from):
            model, header = load_checkpoint(_path, seed=seed)
            if (model.arch, model.num_classes, model.head_kind) != \
                    (cfg.arch, cfg.num_classes, cfg.head):
                raise CheckpointError(
                    f"checkpoint {_path} holds {model.arch}/{model.num_classes}/"
                    f"{model.head_kind}, config wants "
                    f"{cfg.arch}/{cfg.num_classes}/{cfg.head}")
            if freeze_body:
                freeze_backbone(model)
            return model
    else:
        builder = cfg.model_builder()

    folds = list(range(cfg.k)) if mode == "cv" else [0]
    results = fit(images, labels, plan, folds, builder, cfg.train_settings())

    config_lines = _config_lines(cfg)
    reports = []
    matrices = []
    diverged = []
    for result in results:
        (out / f"fold{result.fold}_log.tsv").write_text(
            format_train_log([result], config_lines))
        if result.diverged:
            diverged.append(result)
            print(result.diagnostic, file=sys.stderr)
            continue
        save_checkpoint(out / f"fold{result.fold}_ckpt.bin", result.model,
                        config=_fold_checkpoint_config(cfg, manifest,
                                                       result.stats, result.fold))
        cm = confusion(result.val_predictions, result.val_labels,
                       cfg.num_classes, class_names=manifest.class_names)
        matrices.append(cm)
        reports.append(report_from_confusion(cm))
        last = result.epochs[-1]
        print(f"fold {result.fold}: train_acc {last.train_accuracy:.4f} "
              f"val_error {last.val_error_rate:.4f}")
    if reports:
        aggregate = cv_aggregate(reports)
        (out / "metrics.txt").write_text(format_report(aggregate, config_lines))
        (out / "confusion.tsv").write_text(
            format_confusion(sum_confusions(matrices), config_lines))
        print(f"aggregate: error_rate {aggregate.error_rate:.4f} "
              f"accuracy {aggregate.accuracy:.4f}")
    return 1 if diverged else 0


def _restore_from_checkpoint(path):
    model, header = load_checkpoint(path)
    stored = header.get("config") or {}
    needed = ("class_names", "pixel_mean", "pixel_std")
    if not all(key in stored for key in needed):
        raise CheckpointError(
            f"{path} lacks inference metadata ({', '.join(needed)}); "
            "it was not written by `handlens train`")
    stats = PixelStats(np.asarray(stored["pixel_mean"]),
                       np.asarray(stored["pixel_std"]))
    run_cfg = stored.get("run_config") or {}
    resize_to = int(run_cfg.get("resize_to", 256))
    crop_size = int(run_cfg.get("crop_size", 224))
    return model, tuple(stored["class_names"]), stats, resize_to, crop_size


def _center_prepared(images, stats, resize_to, crop_size):
    crops = [resize_and_crop(img, resize_to, crop_size, mode="center")
             for img in images]
    return standardize(np.stack(crops), stats)


def cmd_eval(cfg: RunConfig, checkpoint: str,
             manifest_file: str | None = None) -> int:
    model, class_names, stats, resize_to, crop_size = \
        _restore_from_checkpoint(checkpoint)
    if manifest_file:
        manifest = load_manifest_file(manifest_file)
        images = [load_image(s.path) for s in manifest.samples]
        labels = np.array([s.class_index for s in manifest.samples],
                          dtype=np.int64)
    else:
        manifest, images, labels = _load_dataset(cfg)
    if manifest.class_names != class_names:
        raise CheckpointError(
            f"dataset classes {manifest.class_names} do not match the "
            f"checkpoint's {class_names}")
    x = _center_prepared(images, stats, resize_to, crop_size)
    logits = np.concatenate([model.logits(x[i:i + cfg.batch_size])
                             for i in range(0, len(x), cfg.batch_size)])
    preds = logits.argmax(axis=1)
    cm = confusion(preds, labels, model.num_classes, class_names=class_names)
    report = report_from_confusion(cm)
    config_lines = _config_lines(cfg) + [f"checkpoint = {checkpoint}"]
    out = _out_dir(cfg)
    (out / "metrics.txt").write_text(format_report(report, config_lines))
    (out / "confusion.tsv").write_text(format_confusion(cm, config_lines))
    print(format_report(report), end="")
    return 0


def cmd_predict(checkpoint: str, image_path: str) -> int:
    model, class_names, stats, resize_to, crop_size = \
        _restore_from_checkpoint(checkpoint)
    img = load_image(image_path)
    x = _center_prepared([img], stats, resize_to, crop_size)
    probs = softmax(model.logits(x))[0]
    for idx in np.argsort(-probs):
        print(f"{class_names[idx]}\t{probs[idx]:.6f}")
    return 0


# ----------------------------------------------------------------------
# argument parsing
# ----------------------------------------------------------------------

_OVERRIDE_FLAGS = {
    # flag dest -> (config field, parser kwargs)
    "arch": ("arch", dict(type=str)),
    "classes": ("num_classes", dict(type=int)),
    "head": ("head", dict(type=str, choices=("concat_pool", "stock_linear"))),
    "lr_max": ("lr_max", dict(type=float)),
    "epochs": ("epochs", dict(type=int)),
    "batch": ("batch_size", dict(type=int)),
    "k": ("k", dict(type=int)),
    "seed": ("seed", dict(type=int)),
    "optimizer": ("optimizer", dict(type=str)),
    "weight_decay": ("weight_decay", dict(type=float)),
    "out": ("out_dir", dict(type=str)),
    "data": ("dataset_root", dict(type=str)),
}


def _add_common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key = value config file")
    for flag, (_, kwargs) in _OVERRIDE_FLAGS.items():
        parser.add_argument(f"--{flag.replace('_', '-')}", default=None, **kwargs)
    parser.add_argument("--one-cycle", choices=("on", "off"), default=None)
    parser.add_argument("--stratified", choices=("on", "off"), default=None)


def _merged_config(args: argparse.Namespace) -> RunConfig:
    cfg = config_from_file(args.config) if args.config else RunConfig()
    overrides = {}
    for flag, (field_name, _) in _OVERRIDE_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[field_name] = value
    if getattr(args, "one_cycle", None) is not None:
        overrides["one_cycle"] = args.one_cycle == "on"
    if getattr(args, "stratified", None) is not None:
        overrides["stratified"] = args.stratified == "on"
    return apply_overrides(cfg, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="handlens",
        description="From-scratch image-classification training toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (
            ("scan", "report the class distribution of a dataset tree"),
            ("params", "print per-layer and total parameter counts"),
            ("lr-find", "sweep the learning-rate range test"),
            ("train", "train with the one-cycle policy"),
            ("eval", "evaluate a checkpoint on a dataset tree"),
            ("predict", "rank class probabilities for one image")):
        p = sub.add_parser(name, help=help_text)
        _add_common_flags(p)
        if name == "train":
            p.add_argument("--mode", choices=("cv", "single"), default="single")
            p.add_argument("--init-from", default=None,
                           help="checkpoint to start from")
            p.add_argument("--freeze-body", action="store_true",
                           help="train only the head of --init-from")
        if name in ("eval", "predict"):
            p.add_argument("--checkpoint", required=True)
        if name == "eval":
            p.add_argument("--manifest", default=None,
                           help="evaluate a manifest export instead of --data")
        if name == "predict":
            p.add_argument("--image", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _merged_config(args)
        if args.command == "scan":
            return cmd_scan(cfg)
        if args.command == "params":
            return cmd_params(cfg)
        if args.command == "lr-find":
            return cmd_lr_find(cfg)
        if args.command == "train":
            return cmd_train(cfg, mode=args.mode, init_from=args.init_from,
                             freeze_body=args.freeze_body)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, manifest_file=args.manifest)
        if args.command == "predict":
            return cmd_predict(args.checkpoint, args.image)
        raise AssertionError(f"unhandled command {args.command}")
    except Exception as exc:  # contract errors exit nonzero, with the reason
        print(f"handlens: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
