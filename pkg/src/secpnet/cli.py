"""Command-line entry point: ``secpnet <command> [flags]``.

Commands: gen-data, train, eval, ablate, predict, overlay.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (
    KIND_IMAGE,
    KIND_MASK,
    LABELS,
    ORGANS,
    generate_phantom,
    load_dataset,
    load_sample,
    read_array,
    save_dataset,
    split_folds,
    write_array,
)
from .errors import SECPError, UsageError
from .experiments import (
    ExperimentConfig,
    evaluate,
    fold_report_json,
    mean_dice,
    run_ablation,
    run_fold,
)
from .metrics import aggregate_folds, emit_comparison, emit_table
from .networks import VariantId, predict_mask
from .training import load_checkpoint

logger = logging.getLogger("secpnet")

TP_COLOR = (0, 255, 0)
PRED_ONLY_COLOR = (255, 0, 0)
GT_ONLY_COLOR = (0, 0, 255)


@dataclass(frozen=True)
class OverlaySpec:
    """Which organ to colour; ``None`` composites all organs in label order."""

    organ: int | None = None
    tp: tuple = TP_COLOR
    pred_only: tuple = PRED_ONLY_COLOR
    gt_only: tuple = GT_ONLY_COLOR


def overlay_render(image, pred, gt, spec: OverlaySpec = OverlaySpec()) -> np.ndarray:
    """RGB (H, W, 3) uint8: grey image underneath, green where prediction and
    ground truth agree on the organ, red for prediction only, blue for
    ground truth only."""
    image = np.asarray(image)
    if image.ndim == 3:
        image = image[0]
    pred, gt = np.asarray(pred), np.asarray(gt)
    if not image.shape == pred.shape == gt.shape:
        raise UsageError(f"overlay shapes differ: image {image.shape}, pred {pred.shape}, gt {gt.shape}")
    grey = np.rint(255 * np.clip(image.astype(np.float64), 0.0, 1.0)).astype(np.uint8)
    rgb = np.repeat(grey[:, :, None], 3, axis=2)
    organs = ORGANS if spec.organ is None else (spec.organ,)
    for organ in organs:
        p, g = pred == organ, gt == organ
        rgb[p & g] = spec.tp
        rgb[p & ~g] = spec.pred_only
        rgb[~p & g] = spec.gt_only
    return rgb


def encode_ppm(rgb: np.ndarray) -> bytes:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise UsageError("PPM payload must be (H, W, 3) uint8")
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(rgb).tobytes()


def write_ppm(path, rgb: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(rgb))


# ---------------------------------------------------------------- commands


def _load_config(path) -> ExperimentConfig:
    return ExperimentConfig.load(path) if path else ExperimentConfig()


def cmd_gen_data(args) -> int:
    samples = generate_phantom(args.seed, args.patients, args.slices, args.size)
    path = save_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples from {args.patients} patients to {path}")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args.config)
    variant = VariantId.parse(args.variant)
    samples = load_dataset(args.data)
    split = split_folds([s.patient_id for s in samples], args.folds, config.train.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "split.json").write_text(json.dumps({**split.to_dict(), "seed": config.train.seed}, indent=2) + "\n")
    folds = [args.fold] if args.fold is not None else list(range(args.folds))
    per_fold = []
    for f in folds:
        r = run_fold(variant, samples, split, f, config, out / f"fold{f}")
        per_fold.append(r.test_scores)
        print(f"{variant.label} fold {f}: test mean Dice {100 * mean_dice(r.test_scores):.2f}")
    if len(per_fold) >= 2:
        report = aggregate_folds(per_fold)
        for fmt in ("csv", "json"):
            (out / f"report.{fmt}").write_bytes(emit_table(report, fmt))
        sys.stdout.write(emit_table(report, "text").decode())
    return 0


def _find_split(checkpoint: Path):
    for d in (checkpoint.parent, checkpoint.parent.parent):
        p = d / "split.json"
        if p.exists():
            return json.loads(p.read_text())
    return None


def cmd_eval(args) -> int:
    net = load_checkpoint(args.checkpoint)
    samples = load_dataset(args.data)
    saved = _find_split(Path(args.checkpoint))
    k = args.folds if args.folds is not None else (saved["k"] if saved else 5)
    seed = args.seed if args.seed is not None else (saved["seed"] if saved else 0)
    split = split_folds([s.patient_id for s in samples], k, seed)
    if saved and args.folds is None and args.seed is None and split.to_dict()["assignment"] != saved["assignment"]:
        raise UsageError("dataset patients do not match the split the checkpoint was trained with")
    _, test = split.train_test(samples, args.fold)
    scores = evaluate(net, test)
    text = fold_report_json(net.variant, args.fold, scores)
    if args.report:
        Path(args.report).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_ablate(args) -> int:
    config = _load_config(args.config)
    samples = load_dataset(args.data)
    result = run_ablation(samples, config, k=args.folds, threads=args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for metric in ("dice", "jac"):
        for fmt, ext in (("csv", "csv"), ("json", "json"), ("text", "txt")):
            (out / f"ablation_{metric}.{ext}").write_bytes(emit_comparison(result.reports, metric, fmt))
    train_dice = {v.label: result.train_mean_dice(v) for v in VariantId}
    (out / "training_dice.json").write_text(json.dumps(train_dice, indent=2) + "\n")
    sys.stdout.write("Dice (%)\n" + emit_comparison(result.reports, "dice", "text").decode())
    sys.stdout.write("Jac (%)\n" + emit_comparison(result.reports, "jac", "text").decode())
    secp, base = train_dice[VariantId.SECPNet.label], train_dice[VariantId.Baseline.label]
    if secp < base:
        logger.warning("SECP-Net training Dice %.4f is below Baseline's %.4f on this data", secp, base)
    return 0


def cmd_predict(args) -> int:
    net = load_checkpoint(args.checkpoint)
    image = read_array(args.image, KIND_IMAGE)
    mask = predict_mask(net, image[None, None].astype(np.float32))[0]
    write_array(args.out, mask, KIND_MASK)
    counts = {LABELS[int(k)]: int(n) for k, n in zip(*np.unique(mask, return_counts=True))}
    print(f"wrote {args.out}: {counts}")
    return 0


def cmd_overlay(args) -> int:
    net = load_checkpoint(args.checkpoint)
    sample = load_sample(args.sample)
    pred = predict_mask(net, sample.image[None])[0]
    rgb = overlay_render(sample.image, pred, sample.mask, OverlaySpec(args.organ))
    write_ppm(args.out, rgb)
    print(f"wrote {args.out} ({rgb.shape[1]}x{rgb.shape[0]})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="secpnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic phantom dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--patients", type=int, default=20)
    p.add_argument("--slices", type=int, default=4)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="staged training of one variant per fold")
    p.add_argument("--variant", required=True, help=", ".join(v.name for v in VariantId))
    p.add_argument("--data", required=True)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--fold", type=int, default=None, help="train only this fold")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on one fold's test patients")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--fold", type=int, required=True)
    p.add_argument("--report", default=None)
    p.add_argument("--folds", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="all six variants over all folds")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("predict", help="segment one image file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("overlay", help="render prediction vs ground truth as a PPM")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sample", required=True, help="sample stem (<stem>.image.bin / <stem>.mask.bin)")
    p.add_argument("--organ", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_overlay)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (SECPError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"secpnet {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
