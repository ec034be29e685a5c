"""Inference on single samples and the evaluation report over a split."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .augment import NormalizeTransform, normalize_to_input
from .dataset_io import BONES, Sample
from .errors import PlanningError
from .heatmaps import (HEATMAP_SCALE, decode_landmark, encode_line_roi, threshold_roi,
                       upsample_heatmap)
from .metrics import (MetricReport, average_surface_distance, hausdorff, iou, landmark_ed,
                      line_alignment, project_error_axes, summarize_mean, summarize_median)
from .model import HourglassOutput, StackedHourglass
from .planner import PlanningResult, plan, plan_from_inputs


@dataclass
class PredictedSample:
    """Everything the evaluation needs from one image, in original pixel coordinates."""

    masks: np.ndarray
    p_blum: np.ndarray
    p_tmc: np.ndarray
    roi_mask: np.ndarray
    plan: PlanningResult | None = None
    error: str | None = None


def sample_tensor(sample: Sample, size: int = 256) -> tuple[torch.Tensor, NormalizeTransform]:
    norm, tr = normalize_to_input(sample, size)
    x = torch.from_numpy(norm.image.pixels.astype(np.float32))[None, None]
    return x, tr


@torch.no_grad()
def network_outputs(network: StackedHourglass, sample: Sample) -> tuple[HourglassOutput, NormalizeTransform]:
    """Final-hourglass outputs for one sample (numpy arrays, batch axis dropped)."""
    was_training = network.training
    network.eval()
    x, tr = sample_tensor(sample, network.config.input_size)
    out = network(x)[-1]
    network.train(was_training)
    return HourglassOutput(*(t[0].cpu().numpy().astype(np.float64) for t in out)), tr


def prediction_from_outputs(out: HourglassOutput, tr: NormalizeTransform, sample: Sample,
                            scale: int = HEATMAP_SCALE) -> PredictedSample:
    masks = np.stack([tr.to_original(upsample_heatmap(ch, scale)) >= 0.0 for ch in out.seg])
    p_blum, p_tmc = (tr.inverse(decode_landmark(ch, scale).xy) for ch in out.lm)
    roi = threshold_roi(tr.to_original(upsample_heatmap(out.roi[0], scale)))
    try:
        result = plan(out, tr, femur_mask_fullres=masks[0], mm_per_px=sample.image.mm_per_px, scale=scale)
        error = None
    except PlanningError as exc:
        result, error = None, str(exc)
    return PredictedSample(masks, p_blum, p_tmc, roi, result, error)


def predict(network: StackedHourglass, sample: Sample) -> PredictedSample:
    out, tr = network_outputs(network, sample)
    return prediction_from_outputs(out, tr, sample)


def ground_truth_roi(sample: Sample) -> np.ndarray:
    a = sample.annotation
    return threshold_roi(encode_line_roi(a.p_prox, a.p_dist, sample.image.shape, scale=1))


def reference_plan(sample: Sample) -> PlanningResult:
    """Plan constructed from the annotation itself (masks, landmarks, GT line ROI)."""
    a = sample.annotation
    return plan_from_inputs(a.p_blum, a.p_tmc, a.mask("femur"), ground_truth_roi(sample),
                            sample.image.mm_per_px)


def prediction_from_ground_truth(sample: Sample) -> PredictedSample:
    a = sample.annotation
    return PredictedSample(a.masks.copy(), a.p_blum.copy(), a.p_tmc.copy(), ground_truth_roi(sample),
                           reference_plan(sample))


def evaluate(predictions, samples, resamples: int = 10_000, seed: int = 0) -> MetricReport:
    predictions, samples = list(predictions), list(samples)
    if not samples:
        raise ValueError("cannot evaluate an empty split")
    if len(predictions) != len(samples):
        raise ValueError("predictions and samples differ in length")
    have_mm = all(s.image.mm_per_px is not None for s in samples)
    report = MetricReport(units="mm" if have_mm else "px")
    seg = {b: {"iou": [], "asd": [], "hausdorff": []} for b in BONES}
    eds = {"p_blum": [], "p_tmc": []}
    lines, sp_eds = [], []
    for pred, sample in zip(predictions, samples):
        mm = sample.image.mm_per_px if have_mm else 1.0
        a = sample.annotation
        row = {"id": sample.sample_id}
        for k, bone in enumerate(BONES):
            seg[bone]["iou"].append(iou(pred.masks[k], a.masks[k]))
            if pred.masks[k].any() and a.masks[k].any():
                seg[bone]["asd"].append(average_surface_distance(pred.masks[k], a.masks[k], mm))
                seg[bone]["hausdorff"].append(hausdorff(pred.masks[k], a.masks[k], mm))
        for name, p in (("p_blum", pred.p_blum), ("p_tmc", pred.p_tmc)):
            eds[name].append(landmark_ed(p, getattr(a, name), mm))
            row[name] = eds[name][-1]
        if pred.plan is not None:
            lines.append(line_alignment(pred.plan.lm1, a.p_prox, a.p_dist, mm))
            try:
                ref = reference_plan(sample)
            except PlanningError as exc:
                row["reference_error"] = str(exc)
            else:
                sp_eds.append(landmark_ed(pred.plan.p_sp, ref.p_sp, mm))
                report.axis_errors.append(project_error_axes(pred.plan.p_sp, ref.p_sp, ref.lm1.direction, mm))
                row["schoettle"] = sp_eds[-1]
        else:
            row["planning_error"] = pred.error
        report.per_image.append(row)
    for bone, m in seg.items():
        report.segmentation[bone] = {k: summarize_mean(v) if v else {"mean": float("nan"), "std": float("nan"), "n": 0}
                                     for k, v in m.items()}
    report.landmarks = {k: summarize_median(v, resamples, seed) for k, v in eds.items()}
    if lines:
        report.line_alignment = summarize_median(lines, resamples, seed)
    if sp_eds:
        report.schoettle = summarize_median(sp_eds, resamples, seed)
    return report


def validate(network: StackedHourglass, samples, resamples: int = 1000, seed: int = 0) -> MetricReport:
    samples = list(samples)
    if not samples:
        raise ValueError("validation split is empty")
    return evaluate([predict(network, s) for s in samples], samples, resamples, seed)
