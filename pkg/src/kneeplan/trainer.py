"""Deeply supervised multi-task training with per-hourglass GradNorm weighting."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import yaml

from .augment import AugmentConfig, augment_sample, normalize_to_input
from .dataset_io import Sample
from .errors import ConfigError, TrainingDivergedError
from .evaluation import validate
from .heatmaps import HEATMAP_SCALE, area_fraction, encode_landmark, encode_line_roi
from .losses import GradNorm, heatmap_loss, seg_loss, total_loss
from .metrics import MetricReport
from .model import TASKS, NetworkConfig, StackedHourglass, build_network, save_checkpoint

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 250
    batch_size: int = 2
    lr_net: float = 0.00025
    lr_w: float = 0.025
    lr_halving_period: int = 60
    alpha: float = 1.0
    beta: float = 0.6
    seed: int = 0
    checkpoint_interval: int = 10
    validation_interval: int = 10
    augment: bool = True
    gradnorm: bool = True
    rms_alpha: float = 0.99
    rms_eps: float = 1e-8

    def validate(self) -> None:
        for name in ("epochs", "batch_size", "lr_net", "lr_w", "lr_halving_period",
                     "checkpoint_interval", "validation_interval"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be non-negative")


@dataclass(frozen=True)
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)

    def to_dict(self) -> dict:
        d = {"train": asdict(self.train), "augment": asdict(self.augment), "network": asdict(self.network)}
        for k in ("rotation_deg", "scale", "contrast_gain", "contrast_bias"):
            d["augment"][k] = list(d["augment"][k])
        return d


def _build(cls, raw: dict | None, section: str):
    raw = dict(raw or {})
    known = {f.name: f for f in fields(cls)}
    unknown = set(raw) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    for k, v in raw.items():
        if isinstance(v, list):
            raw[k] = tuple(v)
    return cls(**raw)


def load_config(path=None) -> ExperimentConfig:
    """Read a YAML config with optional ``train``, ``augment`` and ``network`` sections."""
    if path is None:
        return ExperimentConfig()
    raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    extra = set(raw) - {"train", "augment", "network"}
    if extra:
        raise ConfigError(f"unknown config sections: {sorted(extra)}")
    cfg = ExperimentConfig(_build(TrainConfig, raw.get("train"), "train"),
                           _build(AugmentConfig, raw.get("augment"), "augment"),
                           _build(NetworkConfig, raw.get("network"), "network"))
    cfg.train.validate()
    cfg.network.validate()
    return cfg


def learning_rate(config: TrainConfig, epoch: int) -> float:
    return config.lr_net * 0.5 ** (epoch // config.lr_halving_period)


def prepare_targets(sample: Sample, scale: int = HEATMAP_SCALE, size: int = 256) -> dict[str, np.ndarray]:
    """Network input and per-task targets for one sample (normalized to ``size``)."""
    norm, _ = normalize_to_input(sample, size)
    a = norm.annotation
    hm_shape = (size // scale, size // scale)
    return {
        "image": norm.image.pixels[None].astype(np.float32),
        # soft coverage keeps sub-cell boundary position in the target
        "seg": np.stack([area_fraction(m, scale) for m in a.masks]).astype(np.float32),
        "lm": np.stack([encode_landmark(a.p_blum, hm_shape, scale),
                        encode_landmark(a.p_tmc, hm_shape, scale)]).astype(np.float32),
        "roi": encode_line_roi(a.p_prox, a.p_dist, hm_shape, scale)[None].astype(np.float32),
    }


def collate(items: list[dict]) -> dict[str, torch.Tensor]:
    return {k: torch.from_numpy(np.stack([it[k] for it in items])) for k in items[0]}


def task_losses(outputs, batch: dict[str, torch.Tensor], beta: float) -> list[list[torch.Tensor]]:
    """Nested ``[l][t]`` list of (seg, lm, roi) losses; all hourglasses share the targets."""
    return [[seg_loss(out.seg, batch["seg"], beta),
             heatmap_loss(out.lm, batch["lm"]),
             heatmap_loss(out.roi, batch["roi"])] for out in outputs]


def _sample_seed(seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, index]).generate_state(1)[0])


@dataclass
class TrainResult:
    network: StackedHourglass
    weight_history: list[tuple[int, int, str, float]]
    loss_history: list[tuple[int, int, int, str, float]]
    metric_log: list[dict]
    gradnorm: GradNorm | None = None
    best_epoch: int | None = None


class _CsvLog:
    def __init__(self, path: Path | None, header: list[str]):
        self._fh = None
        if path is not None:
            self._fh = open(path, "w", newline="", encoding="utf-8")
            self._writer = csv.writer(self._fh)
            self._writer.writerow(header)

    def write(self, rows):
        if self._fh is not None:
            self._writer.writerows(rows)
            self._fh.flush()

    def close(self):
        if self._fh is not None:
            self._fh.close()


def train(train_samples, config: ExperimentConfig | None = None, val_samples=None, out_dir=None,
          progress=None) -> TrainResult:
    """Train a fresh network on ``train_samples``.

    ``progress`` is an optional callable receiving ``(epoch, step, losses, weights)``.
    """
    config = config or ExperimentConfig()
    tc = config.train
    tc.validate()
    samples = list(train_samples)
    if not samples:
        raise ValueError("training split is empty")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.yaml").write_text(yaml.safe_dump(config.to_dict(), sort_keys=False), encoding="utf-8")

    torch.manual_seed(tc.seed)
    rng = np.random.default_rng(tc.seed)
    net = build_network(config.network)
    net.train()
    n_hg = config.network.num_hourglasses
    optimizer = torch.optim.RMSprop(net.parameters(), lr=tc.lr_net, alpha=tc.rms_alpha, eps=tc.rms_eps)
    gradnorm = GradNorm(n_hg, len(TASKS), alpha=tc.alpha, lr=tc.lr_w, rms_alpha=tc.rms_alpha, eps=tc.rms_eps)
    shared = [net.shared_parameters(l) for l in range(n_hg)]
    size, scale = config.network.input_size, HEATMAP_SCALE

    static = None if tc.augment else [prepare_targets(s, scale, size) for s in samples]
    loss_log = _CsvLog(out / "losses.csv" if out else None, ["step", "epoch", "hg", "task", "loss"])
    weight_log = _CsvLog(out / "gradnorm_weights.csv" if out else None, ["step", "l", "task", "w"])
    val_log = _CsvLog(out / "validation.csv" if out else None, ["epoch", "metric", "value"])
    weight_history, loss_history, metric_log = [], [], []
    best = (math.inf, None)
    step = 0
    try:
        for epoch in range(tc.epochs):
            lr = learning_rate(tc, epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr
            order = rng.permutation(len(samples))
            for start in range(0, len(order), tc.batch_size):
                idx = order[start:start + tc.batch_size]
                if static is not None:
                    items = [static[i] for i in idx]
                else:
                    items = [prepare_targets(augment_sample(samples[i], _sample_seed(tc.seed, epoch, int(i)),
                                                            config.augment), scale, size) for i in idx]
                batch = collate(items)
                outputs = net(batch["image"])
                per_task = task_losses(outputs, batch, tc.beta)
                losses = torch.stack([torch.stack(row) for row in per_task])
                if not torch.all(torch.isfinite(losses)):
                    _dump_divergence(out, step, epoch, losses, gradnorm.w)
                    raise TrainingDivergedError(
                        f"non-finite loss at step {step} (epoch {epoch}): {losses.detach().tolist()}")
                if tc.gradnorm:
                    gradnorm.step(per_task, shared)
                total = total_loss(gradnorm.w.to(losses.dtype), losses)
                optimizer.zero_grad()
                total.backward()
                optimizer.step()

                lrows = [(step, epoch, l, TASKS[t], float(losses[l, t].detach())) for l in range(n_hg) for t in range(len(TASKS))]
                wrows = [(step, l, TASKS[t], float(gradnorm.w[l, t])) for l in range(n_hg) for t in range(len(TASKS))]
                loss_history += lrows
                weight_history += wrows
                loss_log.write(lrows)
                weight_log.write(wrows)
                if progress is not None:
                    progress(epoch, step, losses.detach(), gradnorm.w.clone())
                step += 1
            log.info("epoch %d lr %.3g total %.5f", epoch, lr, float(total.detach()))

            last = epoch == tc.epochs - 1
            if val_samples and ((epoch + 1) % tc.validation_interval == 0 or last):
                report = validate(net, val_samples, resamples=200, seed=tc.seed)
                entry = _flatten_report(epoch, report)
                metric_log.append(entry)
                val_log.write([(epoch, k, v) for k, v in entry.items() if k != "epoch"])
                score = entry["mean_landmark_ed"]
                if score < best[0]:
                    best = (score, epoch)
                    if out is not None:
                        save_checkpoint(out / "best.pt", net, epoch=epoch, gradnorm=gradnorm.state_dict())
            if out is not None and ((epoch + 1) % tc.checkpoint_interval == 0 or last):
                save_checkpoint(out / f"epoch_{epoch + 1:04d}.pt", net, epoch=epoch, gradnorm=gradnorm.state_dict())
        if out is not None:
            save_checkpoint(out / "final.pt", net, epoch=tc.epochs - 1, gradnorm=gradnorm.state_dict())
    finally:
        for lg in (loss_log, weight_log, val_log):
            lg.close()
    return TrainResult(net, weight_history, loss_history, metric_log, gradnorm, best[1])


def _flatten_report(epoch: int, report: MetricReport) -> dict:
    entry = {"epoch": epoch}
    for bone, m in report.segmentation.items():
        entry[f"{bone}_iou"] = m["iou"]["mean"]
    for name, s in report.landmarks.items():
        entry[f"{name}_ed_median"] = s["median"]
    entry["mean_landmark_ed"] = float(np.mean([r[k] for r in report.per_image for k in ("p_blum", "p_tmc")]))
    if report.schoettle:
        entry["schoettle_ed_median"] = report.schoettle["median"]
    return entry


def _dump_divergence(out: Path | None, step, epoch, losses, weights) -> None:
    payload = {"step": step, "epoch": epoch, "losses": losses.detach().tolist(), "weights": weights.tolist()}
    log.error("training diverged: %s", payload)
    if out is not None:
        (out / "divergence_dump.json").write_text(json.dumps(payload, indent=2), encoding="utf-8")
