"""Multi-task stacked hourglass network.

Every residual unit is a pre-activation bottleneck with instance
normalization.  Each hourglass ends in one extra bottleneck whose output is
shared by the per-task prediction heads; the parameters of that unit are the
reference layer for gradient-norm task balancing.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigError

TASKS = ("seg", "lm", "roi")
# near-zero initial predictions, as in common heatmap regression heads
HEAD_INIT_STD = 1e-3


@dataclass(frozen=True)
class NetworkConfig:
    num_hourglasses: int = 4
    hourglass_depth: int = 4
    in_channels: int = 1
    stem_channels: int = 64
    mid_channels: int = 128
    features: int = 256
    seg_channels: int = 4
    lm_channels: int = 2
    roi_channels: int = 1
    input_size: int = 256
    norm_eps: float = 1e-5

    @property
    def num_tasks(self) -> int:
        return len(TASKS)

    @property
    def heatmap_size(self) -> int:
        return self.input_size // 4

    @property
    def task_channels(self) -> tuple[int, int, int]:
        return (self.seg_channels, self.lm_channels, self.roi_channels)

    def validate(self) -> None:
        if self.num_hourglasses < 1:
            raise ConfigError("num_hourglasses must be >= 1")
        counts = (self.in_channels, self.stem_channels, self.mid_channels, self.features,
                  self.seg_channels, self.lm_channels, self.roi_channels, self.hourglass_depth)
        if any(c <= 0 for c in counts):
            raise ConfigError("channel counts and hourglass_depth must be positive")
        if self.input_size <= 0 or self.input_size % 2 ** (2 + self.hourglass_depth):
            raise ConfigError(
                f"input_size {self.input_size} must be divisible by 2**(2 + hourglass_depth)"
            )

    def to_dict(self) -> dict:
        return asdict(self)


class HourglassOutput(NamedTuple):
    seg: torch.Tensor
    lm: torch.Tensor
    roi: torch.Tensor


def _norm(channels: int, eps: float) -> nn.InstanceNorm2d:
    return nn.InstanceNorm2d(channels, eps=eps, affine=True)


class PreActBottleneck(nn.Module):
    """IN-ReLU-conv bottleneck (1x1, 3x3, 1x1) with identity or projected skip."""

    def __init__(self, in_ch: int, out_ch: int, eps: float = 1e-5):
        super().__init__()
        mid = out_ch // 2
        self.norm1 = _norm(in_ch, eps)
        self.conv1 = nn.Conv2d(in_ch, mid, 1)
        self.norm2 = _norm(mid, eps)
        self.conv2 = nn.Conv2d(mid, mid, 3, padding=1)
        self.norm3 = _norm(mid, eps)
        self.conv3 = nn.Conv2d(mid, out_ch, 1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.conv1(F.relu(self.norm1(x)))
        out = self.conv2(F.relu(self.norm2(out)))
        out = self.conv3(F.relu(self.norm3(out)))
        identity = x if self.skip is None else self.skip(x)
        return out + identity


class Hourglass(nn.Module):
    def __init__(self, depth: int, channels: int, eps: float = 1e-5):
        super().__init__()
        self.depth = depth
        self.skip = PreActBottleneck(channels, channels, eps)
        self.down = PreActBottleneck(channels, channels, eps)
        if depth > 1:
            self.inner = Hourglass(depth - 1, channels, eps)
        else:
            self.inner = PreActBottleneck(channels, channels, eps)
        self.up = PreActBottleneck(channels, channels, eps)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        upper = self.skip(x)
        low = self.down(F.max_pool2d(x, 2))
        low = self.up(self.inner(low))
        return upper + F.interpolate(low, scale_factor=2, mode="nearest")


class PredictionHead(nn.Module):
    """IN-ReLU then a 1x1 convolution producing one task's maps."""

    def __init__(self, in_ch: int, out_ch: int, eps: float = 1e-5):
        super().__init__()
        self.norm = _norm(in_ch, eps)
        self.conv = nn.Conv2d(in_ch, out_ch, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(F.relu(self.norm(x)))


class HourglassStage(nn.Module):
    """One hourglass, its shared bottleneck, the task heads and (optionally) reinjection."""

    def __init__(self, cfg: NetworkConfig, reinject: bool):
        super().__init__()
        c = cfg.features
        self.hourglass = Hourglass(cfg.hourglass_depth, c, cfg.norm_eps)
        self.shared = PreActBottleneck(c, c, cfg.norm_eps)
        self.heads = nn.ModuleList(PredictionHead(c, k, cfg.norm_eps) for k in cfg.task_channels)
        self.remaps = nn.ModuleList(nn.Conv2d(k, c, 1) for k in cfg.task_channels) if reinject else None

    def forward(self, x: torch.Tensor) -> tuple[HourglassOutput, torch.Tensor | None]:
        feats = self.shared(self.hourglass(x))
        preds = [head(feats) for head in self.heads]
        nxt = None
        if self.remaps is not None:
            nxt = x + feats
            for remap, p in zip(self.remaps, preds):
                nxt = nxt + remap(p)
        return HourglassOutput(*preds), nxt


class StackedHourglass(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        cfg.validate()
        self.config = cfg
        self.stem_conv = nn.Conv2d(cfg.in_channels, cfg.stem_channels, 7, stride=2, padding=3)
        self.stem_res1 = PreActBottleneck(cfg.stem_channels, cfg.mid_channels, cfg.norm_eps)
        self.stem_res2 = PreActBottleneck(cfg.mid_channels, cfg.features, cfg.norm_eps)
        self.stem_res3 = PreActBottleneck(cfg.features, cfg.features, cfg.norm_eps)
        n = cfg.num_hourglasses
        self.stages = nn.ModuleList(HourglassStage(cfg, reinject=i < n - 1) for i in range(n))
        self.reset_parameters()

    def reset_parameters(self) -> None:
        linear_out, heads = set(), set()
        for stage in self.stages:
            heads.update(id(h.conv) for h in stage.heads)
            if stage.remaps is not None:
                linear_out.update(id(r) for r in stage.remaps)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                # heads and remaps are not followed by a ReLU: unit gain
                if id(m) in heads:
                    nn.init.normal_(m.weight, std=HEAD_INIT_STD)
                else:
                    gain = "linear" if id(m) in linear_out else "relu"
                    nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity=gain)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.InstanceNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def shared_parameters(self, stage: int) -> list[nn.Parameter]:
        """Parameters of the last shared bottleneck of hourglass ``stage``."""
        return list(self.stages[stage].shared.parameters())

    def forward(self, x: torch.Tensor) -> list[HourglassOutput]:
        size = self.config.input_size
        if x.ndim != 4 or x.shape[1] != self.config.in_channels or x.shape[-2:] != (size, size):
            raise ValueError(
                f"expected input (B, {self.config.in_channels}, {size}, {size}), got {tuple(x.shape)}"
            )
        x = self.stem_res1(self.stem_conv(x))
        x = F.max_pool2d(x, 2)
        x = self.stem_res3(self.stem_res2(x))
        outputs = []
        for stage in self.stages:
            out, x = stage(x)
            outputs.append(out)
        return outputs


def build_network(config: NetworkConfig | None = None) -> StackedHourglass:
    return StackedHourglass(config or NetworkConfig())


def save_checkpoint(path, network: StackedHourglass, **extra) -> None:
    payload = {"config": network.config.to_dict(), "state_dict": network.state_dict()}
    payload.update(extra)
    torch.save(payload, path)


def load_checkpoint(path, config: NetworkConfig | None = None, map_location="cpu"):
    """Load a checkpoint; returns ``(network, payload)``.

    If ``config`` is given it must equal the stored config.
    """
    payload = torch.load(path, map_location=map_location, weights_only=False)
    stored = NetworkConfig(**payload["config"])
    if config is not None and config != stored:
        raise ConfigError(f"checkpoint config {stored} does not match requested {config}")
    net = StackedHourglass(stored)
    net.load_state_dict(payload["state_dict"])
    return net, payload
