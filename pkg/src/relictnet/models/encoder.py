"""DenseNet encoder exposing one feature map per stride (2, 4, 8, 16, 32)."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch import nn
import torch.nn.functional as F


@dataclass(frozen=True)
class EncoderSpec:
    growth_rate: int = 32
    block_layout: tuple[int, ...] = (6, 12, 24, 16)
    input_channels: int = 4
    init_features: int = 64
    bn_size: int = 4
    width_scale: str = "full"

    def __post_init__(self):
        object.__setattr__(self, "block_layout", tuple(int(b) for b in self.block_layout))
        if not self.block_layout:
            raise ValueError("block_layout must contain at least one dense block")
        if min(self.block_layout) < 1 or self.growth_rate < 1 or self.input_channels < 1:
            raise ValueError(f"invalid encoder spec {self}")

    @property
    def stage_count(self) -> int:
        return len(self.block_layout)

    @classmethod
    def full(cls, input_channels: int = 4) -> "EncoderSpec":
        """The 121-layer layout."""
        return cls(32, (6, 12, 24, 16), input_channels, 64, 4, "full")

    @classmethod
    def tiny(cls, input_channels: int = 4) -> "EncoderSpec":
        return cls(12, (2, 2, 2, 2), input_channels, 16, 2, "tiny")

    @classmethod
    def preset(cls, name: str, input_channels: int = 4) -> "EncoderSpec":
        if name not in ("full", "tiny"):
            raise ValueError(f"unknown encoder preset {name!r}")
        return getattr(cls, name)(input_channels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block_layout"] = list(self.block_layout)
        return d


class _DenseLayer(nn.Module):
    def __init__(self, in_ch, growth, bn_size):
        super().__init__()
        self.norm1 = nn.BatchNorm2d(in_ch)
        self.conv1 = nn.Conv2d(in_ch, bn_size * growth, 1, bias=False)
        self.norm2 = nn.BatchNorm2d(bn_size * growth)
        self.conv2 = nn.Conv2d(bn_size * growth, growth, 3, padding=1, bias=False)

    def forward(self, x):
        y = self.conv1(F.relu(self.norm1(x)))
        y = self.conv2(F.relu(self.norm2(y)))
        return torch.cat([x, y], 1)


class _DenseBlock(nn.Sequential):
    def __init__(self, n_layers, in_ch, growth, bn_size):
        super().__init__(*[_DenseLayer(in_ch + i * growth, growth, bn_size) for i in range(n_layers)])


class _Transition(nn.Sequential):
    """BN-ReLU-1x1 conv halving channels. Pooling happens in the next stage so
    that the stage output keeps its stride."""

    def __init__(self, in_ch, out_ch):
        super().__init__(nn.BatchNorm2d(in_ch), nn.ReLU(), nn.Conv2d(in_ch, out_ch, 1, bias=False))


class DenseEncoder(nn.Module):
    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        c = spec.init_features
        self.register_buffer("input_mean", torch.zeros(spec.input_channels))
        self.register_buffer("input_std", torch.ones(spec.input_channels))
        self.stem = nn.Sequential(
            nn.Conv2d(spec.input_channels, c, 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(c),
            nn.ReLU(),
        )
        channels = [c]
        stages = []
        last = spec.stage_count - 1
        for i, n_layers in enumerate(spec.block_layout):
            pool = nn.MaxPool2d(3, stride=2, padding=1) if i == 0 else nn.AvgPool2d(2)
            block = _DenseBlock(n_layers, c, spec.growth_rate, spec.bn_size)
            c = c + n_layers * spec.growth_rate
            if i == last:
                tail = nn.Sequential(nn.BatchNorm2d(c), nn.ReLU())
            else:
                tail = _Transition(c, c // 2)
                c = c // 2
            stages.append(nn.Sequential(pool, block, tail))
            channels.append(c)
        self.stages = nn.ModuleList(stages)
        self.out_channels = tuple(channels)
        self.strides = tuple(2 ** (i + 1) for i in range(len(channels)))
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight)

    def set_input_stats(self, mean, std) -> None:
        """Per-band normalization applied to raw pixel values."""
        std = torch.as_tensor(std, dtype=self.input_std.dtype).clamp_min(1e-6)
        self.input_mean.copy_(torch.as_tensor(mean, dtype=self.input_mean.dtype))
        self.input_std.copy_(std)

    def forward(self, x):
        x = (x - self.input_mean[:, None, None]) / self.input_std[:, None, None]
        feats = [self.stem(x)]
        for stage in self.stages:
            feats.append(stage(feats[-1]))
        return feats


def build_encoder(spec: EncoderSpec, seed: int | None = None) -> DenseEncoder:
    if seed is None:
        return DenseEncoder(spec)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return DenseEncoder(spec)
