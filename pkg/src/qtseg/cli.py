"""Command line: train, eval, predict, inspect, split-folds."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .blocks import ConfigError
from .checkpoint import CheckpointError, load_model, save_checkpoint
from .complexity import count_flops
from .config import ModelConfig, RunConfig, load_config
from .data import (DataError, group_by_class, kfold_split, list_names, load_dataset, load_image,
                   mask_to_indices, mask_to_png_levels, palette_for_levels, synth_dataset)
from .metrics import evaluate_masks
from .model import QTSeg
from .tensor import NumericError, ShapeError
from .train import evaluate, fit

log = logging.getLogger("qtseg")

EXIT_CONFIG, EXIT_IO, EXIT_SHAPE, EXIT_NUMERIC = 2, 3, 4, 5


def _fold_names(data_dir, folds, fold, pattern):
    names = list_names(data_dir)
    if folds is None:
        return names, names
    spec = kfold_split(group_by_class(names, pattern), folds, fold)
    return spec.train, spec.test


def cmd_train(args) -> int:
    run = load_config(args.config) if args.config else RunConfig()
    cfg, tcfg = run.model, run.train
    if args.steps is not None:
        tcfg.steps = args.steps
    if args.synthetic or not args.data:
        train_set = synth_dataset(tcfg.synthetic_train, cfg.input_size, cfg.num_classes, seed=tcfg.seed + 1)
        test_set = synth_dataset(tcfg.synthetic_test, cfg.input_size, cfg.num_classes, seed=tcfg.seed + 2)
    else:
        train_names, test_names = _fold_names(args.data, args.folds, args.fold, args.class_regex)
        palette = run.palette or palette_for_levels(cfg.num_classes)
        train_set = load_dataset(args.data, cfg.input_size, train_names, palette)
        test_set = load_dataset(args.data, cfg.input_size, test_names, palette) if args.folds else None
    model = QTSeg(cfg)
    hist = fit(model, train_set, tcfg, test_set)
    save_checkpoint(model, args.out)
    print(f"trained {tcfg.steps} steps in {hist.seconds:.1f}s; final loss {np.mean(hist.losses[-10:]):.4f}")
    if test_set:
        print(evaluate(model, test_set).table())
    print(f"checkpoint written to {args.out}")
    return 0


def cmd_eval(args) -> int:
    if args.ckpt is None and args.pred_dir is None:
        raise ConfigError("eval needs --ckpt or --pred-dir")
    _, names = _fold_names(args.data, args.folds, args.fold, args.class_regex)
    if args.ckpt:
        model = load_model(args.ckpt)
        num_classes = model.config.num_classes
        palette = palette_for_levels(num_classes)
        samples = load_dataset(args.data, model.config.input_size, names, palette)
        print(evaluate(model, samples).table())
        return 0
    num_classes = args.num_classes
    palette = palette_for_levels(num_classes)
    preds, gts = [], []
    for name in names:
        gt = mask_to_indices(np.array(Image.open(Path(args.data) / "masks" / f"{name}.png")), palette)
        pred_path = Path(args.pred_dir) / f"{name}.png"
        if not pred_path.exists():
            raise DataError(f"missing prediction {pred_path}")
        pred = mask_to_indices(np.array(Image.open(pred_path)), palette)
        if pred.shape != gt.shape:
            raise ShapeError(f"{name}: prediction {pred.shape} vs mask {gt.shape}")
        preds.append(pred)
        gts.append(gt)
    print(evaluate_masks(preds, gts, num_classes).table())
    return 0


def cmd_predict(args) -> int:
    model = load_model(args.ckpt)
    img, (h, w) = load_image(args.image, model.config.input_size)
    mask = model.predict(img[None])[0]
    if (h, w) != mask.shape:
        rows = np.minimum((np.arange(h) * mask.shape[0]) // h, mask.shape[0] - 1)
        cols = np.minimum((np.arange(w) * mask.shape[1]) // w, mask.shape[1] - 1)
        mask = mask[rows][:, cols]
    Image.fromarray(mask_to_png_levels(mask, model.config.num_classes)).save(args.out)
    print(f"mask {w}x{h} written to {args.out}")
    return 0


def cmd_inspect(args) -> int:
    cfg = load_config(args.config).model if args.config else ModelConfig()
    report = count_flops(cfg, args.input_size, notes=True)
    print(report.table())
    return 0


def cmd_split_folds(args) -> int:
    names = list_names(args.data)
    groups = group_by_class(names, args.class_regex)
    out = Path(args.out) if args.out else Path(args.data) / "folds"
    out.mkdir(parents=True, exist_ok=True)
    for k in range(args.folds):
        spec = kfold_split(groups, args.folds, k)
        (out / f"fold{k}_train.txt").write_text("".join(f"{n}\n" for n in spec.train))
        (out / f"fold{k}_test.txt").write_text("".join(f"{n}\n" for n in spec.test))
        print(f"fold {k}: train {len(spec.train)} test {len(spec.test)}")
    print("classes: " + ", ".join(f"{c or '<none>'}={len(v)}" for c, v in groups.items()))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qtseg", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def fold_args(sp):
        sp.add_argument("--fold", type=int, default=0)
        sp.add_argument("--folds", type=int, default=None)
        sp.add_argument("--class-regex", default=r"^[A-Za-z]+",
                        help="regex matched at the start of a sample name to pick its class for fold slicing")

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--config")
    src = t.add_mutually_exclusive_group()
    src.add_argument("--data")
    src.add_argument("--synthetic", action="store_true")
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int)
    fold_args(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="report MAE/Acc/Dice/IoU on a dataset")
    e.add_argument("--ckpt")
    e.add_argument("--pred-dir", help="evaluate stored prediction masks instead of running a model")
    e.add_argument("--num-classes", type=int, default=1)
    e.add_argument("--data", required=True)
    fold_args(e)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="write a mask PNG for one image")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--image", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_predict)

    i = sub.add_parser("inspect", help="parameter and FLOP report")
    i.add_argument("--config")
    i.add_argument("--input-size", type=int)
    i.set_defaults(func=cmd_inspect)

    s = sub.add_parser("split-folds", help="write K-fold manifests")
    s.add_argument("--data", required=True)
    s.add_argument("--folds", type=int, required=True)
    s.add_argument("--out")
    s.add_argument("--class-regex", default=r"^[A-Za-z]+")
    s.set_defaults(func=cmd_split_folds)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, DataError, OSError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except ShapeError as e:
        print(f"shape error: {e}", file=sys.stderr)
        return EXIT_SHAPE
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"argument error: {e}", file=sys.stderr)
        return EXIT_CONFIG


cli = main

if __name__ == "__main__":
    sys.exit(main())
