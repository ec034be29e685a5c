"""Command line entry point: ``kneeplan {synth,train,plan,evaluate}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .dataset_io import (BONES, SPLITS, AnnotationSet, GrayImage, Sample, _read_png, load_dataset, load_sample,
                         save_sample, split_dataset, write_split)
from .errors import KneeplanError
from .evaluation import evaluate, predict, prediction_from_ground_truth, reference_plan
from .metrics import pairwise_rater_table
from .model import load_checkpoint
from .phantom import PhantomSpec, analytic_schoettle, generate_phantom, random_spec
from .planner import Line2D, PlanningResult, boundary_mask, finalize
from .trainer import load_config, train

log = logging.getLogger("kneeplan")

BONE_COLOURS = {"femur": (230, 80, 60), "patella": (240, 200, 40), "tibia": (60, 160, 230), "fibula": (90, 200, 90)}
LINE_COLOUR = (255, 255, 255)
CIRCLE_COLOUR = (255, 0, 255)


class UsageError(Exception):
    pass


def _parse_override(text: str) -> tuple[str, object]:
    key, sep, value = text.partition("=")
    if not sep:
        raise UsageError(f"override must look like key=value, got {text!r}")
    names = {f.name for f in fields(PhantomSpec)}
    if key not in names or key in ("seed", "canvas"):
        raise UsageError(f"unknown phantom parameter {key!r}")
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        raise UsageError(f"could not parse value for {key!r}: {value!r}") from None


def cmd_synth(args) -> int:
    if args.n <= 0:
        raise UsageError("--n must be positive")
    overrides = dict(_parse_override(o) for o in args.set)
    if "offset" in overrides:
        overrides["offset"] = tuple(overrides["offset"])
    out = Path(args.out)
    canvas = (args.canvas, args.canvas)
    samples = []
    for i in range(args.n):
        spec = random_spec(args.seed + i, canvas, **overrides)
        sample = generate_phantom(spec)
        root = save_sample(sample, out / sample.sample_id)
        sp, radius = analytic_schoettle(spec)
        meta = {"spec": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(spec).items()},
                "analytic_schoettle": [float(v) for v in sp], "analytic_radius_px": float(radius)}
        (root / "phantom.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
        samples.append(sample.sample_id)
    train_ids, rest = split_dataset(samples, ratio=args.train_ratio, seed=args.seed) if args.n > 1 else (samples, [])
    half = (len(rest) + 1) // 2
    write_split(out, {"train": train_ids, "val": rest[half:], "test": rest[:half]})
    print(f"wrote {args.n} phantoms to {out} (train {len(train_ids)}, val {len(rest) - half}, test {half})")
    return 0


def _require_dataset(path) -> Path:
    root = Path(path)
    if not (root / "split.json").is_file():
        raise UsageError(f"dataset not found (no split.json): {root}")
    return root


def _require_checkpoint(path) -> Path:
    if path is None or not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return Path(path)


def cmd_train(args) -> int:
    root = _require_dataset(args.dataset)
    config = load_config(args.config)
    tc = config.train
    if args.epochs is not None:
        tc = replace(tc, epochs=args.epochs)
    if args.seed is not None:
        tc = replace(tc, seed=args.seed)
    config = replace(config, train=tc)
    data = load_dataset(root, splits=("train", "val"))
    if not data["train"]:
        raise UsageError(f"training split of {root} is empty")

    def progress(epoch, step, losses, weights):
        if args.verbose:
            print(f"epoch {epoch} step {step} loss(last hg) {np.round(losses[-1].numpy(), 5).tolist()}", flush=True)

    result = train(data["train"], config, val_samples=data["val"] or None, out_dir=args.out, progress=progress)
    print(f"trained {tc.epochs} epochs on {len(data['train'])} samples; best epoch {result.best_epoch}; "
          f"checkpoints in {args.out}")
    return 0


def _load_input(path, mm_per_px):
    """A sample directory (with annotation) or a bare grayscale image."""
    p = Path(path)
    if p.is_dir():
        sample = load_sample(p, split_tag="test")
        if mm_per_px is not None:
            sample = replace(sample, image=replace(sample.image, mm_per_px=mm_per_px))
        return sample, True
    if not p.is_file():
        raise UsageError(f"image not found: {p}")
    pixels = _read_png(p) if p.suffix.lower() == ".png" else np.asarray(Image.open(p).convert("L"), float) / 255.0
    return GrayImage(pixels, mm_per_px, source_id=p.stem), False


def _line_segment(line: Line2D, shape):
    """End points of ``line`` clipped to the image rectangle."""
    h, w = shape
    p0 = line.n * line.c
    d = line.direction
    ts = []
    for axis, lim in ((0, w - 1), (1, h - 1)):
        if abs(d[axis]) > 1e-12:
            for bound in (0.0, lim):
                t = (bound - p0[axis]) / d[axis]
                q = p0 + t * d
                if -1e-6 <= q[0] <= w - 1 + 1e-6 and -1e-6 <= q[1] <= h - 1 + 1e-6:
                    ts.append(t)
    if len(ts) < 2:
        return None
    return tuple(p0 + min(ts) * d), tuple(p0 + max(ts) * d)


def render_overlay(pixels: np.ndarray, masks, result: PlanningResult | None, landmarks=()) -> Image.Image:
    """Segmentation contours, LM1-LM3 and the Schoettle circle drawn over the radiograph."""
    grey = np.round(np.clip(pixels, 0, 1) * 255).astype(np.uint8)
    rgb = np.repeat(grey[..., None], 3, axis=2)
    if masks is not None:
        for bone, m in zip(BONES, masks):
            rgb[boundary_mask(m)] = BONE_COLOURS[bone]
    img = Image.fromarray(rgb, "RGB")
    draw = ImageDraw.Draw(img)
    if result is not None:
        for line in (result.lm1, result.lm2, result.lm3):
            seg = _line_segment(line, pixels.shape)
            if seg is not None:
                draw.line(seg, fill=LINE_COLOUR, width=1)
        x, y = result.p_sp
        r = result.radius_px
        draw.ellipse((x - r, y - r, x + r, y + r), outline=CIRCLE_COLOUR, width=1)
        draw.ellipse((x - 2, y - 2, x + 2, y + 2), fill=CIRCLE_COLOUR)
    for p in landmarks:
        draw.rectangle((p[0] - 1.5, p[1] - 1.5, p[0] + 1.5, p[1] + 1.5), outline=(0, 255, 255))
    return img


def cmd_plan(args) -> int:
    ckpt = _require_checkpoint(args.checkpoint)
    net, _ = load_checkpoint(ckpt)
    loaded, annotated = _load_input(args.image, args.mm_per_px)
    if annotated:
        sample = loaded
    else:
        # inference only needs the image; a placeholder annotation satisfies the container
        h, w = loaded.shape
        dummy = AnnotationSet(np.zeros(2), np.zeros(2), np.zeros(2), np.ones(2), np.zeros((4, h, w), bool))
        sample = Sample(loaded, dummy, "test")
    pred = predict(net, sample)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    name = sample.sample_id
    if pred.plan is None:
        (out / f"{name}_plan.json").write_text(json.dumps({"error": pred.error}, indent=2) + "\n", encoding="utf-8")
        raise KneeplanError(f"planning failed: {pred.error}")
    result = pred.plan
    payload = {"plan": None, "source": str(args.image)}
    if annotated:
        ref = reference_plan(sample)
        finalize(result, sample.image.mm_per_px, reference_point=ref.p_sp)
        payload["reference_p_sp"] = [float(v) for v in ref.p_sp]
        payload["error_px"] = float(np.hypot(*(result.p_sp - ref.p_sp)))
        meta = Path(args.image) / "phantom.json"
        if meta.is_file():
            analytic = np.asarray(json.loads(meta.read_text(encoding="utf-8"))["analytic_schoettle"])
            payload["analytic_p_sp"] = analytic.tolist()
            payload["analytic_error_px"] = float(np.hypot(*(result.p_sp - analytic)))
    payload["plan"] = result.to_dict()
    (out / f"{name}_plan.json").write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    render_overlay(sample.image.pixels, pred.masks, result, (pred.p_blum, pred.p_tmc)).save(out / f"{name}_overlay.png")
    print(f"Schoettle point ({result.p_sp[0]:.2f}, {result.p_sp[1]:.2f}) px, radius {result.radius_px:.2f} px"
          + (f", {payload['error_px']:.2f} px from the reference plan" if annotated else ""))
    return 0


def _read_raters(paths, sample_ids):
    """Rater files are JSON ``{"rater": name, "points": {sample_id: [x, y]}}``."""
    plans = {}
    for path in paths:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"rater file not found: {p}")
        raw = json.loads(p.read_text(encoding="utf-8"))
        name = str(raw.get("rater", p.stem))
        missing = [s for s in sample_ids if s not in raw["points"]]
        if missing:
            raise UsageError(f"rater {name} lacks points for {missing}")
        plans[name] = np.array([raw["points"][s] for s in sample_ids], dtype=float)
    return plans


def cmd_evaluate(args) -> int:
    root = _require_dataset(args.dataset)
    if args.split not in SPLITS:
        raise UsageError(f"unknown split {args.split!r}")
    samples = load_dataset(root, splits=(args.split,))[args.split]
    if not samples:
        raise UsageError(f"{args.split} split of {root} is empty")
    if args.ground_truth:
        preds = [prediction_from_ground_truth(s) for s in samples]
    else:
        net, _ = load_checkpoint(_require_checkpoint(args.checkpoint))
        preds = [predict(net, s) for s in samples]
    report = evaluate(preds, samples, resamples=args.resamples, seed=args.seed)
    if args.raters:
        ids = [s.sample_id for s in samples]
        plans = _read_raters(args.raters, ids)
        if any(p.plan is None for p in preds):
            raise KneeplanError("automatic planning failed on some images; rater table needs every image")
        plans["auto"] = np.array([p.plan.p_sp for p in preds])
        spacing = [s.image.mm_per_px if s.image.mm_per_px is not None else 1.0 for s in samples]
        report.rater_table = pairwise_rater_table(plans, spacing, resamples=args.resamples, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (out / "metrics.txt").write_text(report.render_text(), encoding="utf-8")
    print(report.render_text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kneeplan", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic phantom samples")
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--canvas", type=int, default=256)
    p.add_argument("--train-ratio", type=float, default=0.8)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="fix a phantom parameter, e.g. --set noise_std=0.05")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the network on a dataset's train split")
    p.add_argument("--dataset", required=True)
    p.add_argument("--config", default=None, help="YAML config (defaults reproduce the published protocol)")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("plan", help="plan the Schoettle point on one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="sample directory or grayscale image file")
    p.add_argument("--mm-per-px", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("evaluate", help="compute the metric report on a split")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--raters", nargs="*", default=[])
    p.add_argument("--ground-truth", action="store_true", help="feed annotations as predictions")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resamples", type=int, default=10_000)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (KneeplanError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
