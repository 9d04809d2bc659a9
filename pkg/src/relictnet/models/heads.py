"""Classification and segmentation networks built on the dense encoder."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import torch
from torch import nn
import torch.nn.functional as F

from .encoder import DenseEncoder, EncoderSpec, build_encoder

ARCHITECTURES = ("unet", "fpn", "linknet")

DECODER_WIDTHS = {
    "full": {"unet": (256, 128, 64, 32, 16), "fpn": (256, 128), "linknet": 32},
    "tiny": {"unet": (32, 24, 16, 12, 8), "fpn": (24, 16), "linknet": 8},
}


@dataclass(frozen=True)
class ModelSpec:
    architecture: str
    encoder: EncoderSpec = field(default_factory=EncoderSpec.tiny)
    output_classes: int = 1

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES + ("classifier",):
            raise ValueError(f"unknown architecture {self.architecture!r}")

    def to_dict(self) -> dict:
        return {
            "architecture": self.architecture,
            "encoder": self.encoder.to_dict(),
            "output_classes": self.output_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(d["architecture"], EncoderSpec(**d["encoder"]), d["output_classes"])

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _conv_bn_relu(in_ch, out_ch, k=3):
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, k, padding=k // 2, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(),
    )


class Classifier(nn.Module):
    """Encoder + global average pooling + linear layer."""

    def __init__(self, encoder: DenseEncoder, num_classes: int):
        super().__init__()
        if num_classes < 2:
            raise ValueError("a classifier needs at least 2 classes")
        self.encoder = encoder
        self.fc = nn.Linear(encoder.out_channels[-1], num_classes)
        self.spec = ModelSpec("classifier", encoder.spec, num_classes)

    def forward(self, x):
        feat = self.encoder(x)[-1]
        return self.fc(torch.flatten(F.adaptive_avg_pool2d(feat, 1), 1))

    @torch.no_grad()
    def predict_proba(self, x):
        return torch.softmax(self.forward(x), dim=1)


class Segmenter(nn.Module):
    """Base class: ``forward`` returns per-pixel probabilities, ``logits``
    the pre-sigmoid scores."""

    def __init__(self, encoder: DenseEncoder, spec: ModelSpec):
        super().__init__()
        self.encoder = encoder
        self.spec = spec

    def decode(self, feats):
        raise NotImplementedError

    def logits(self, x):
        return self.decode(self.encoder(x))

    def forward(self, x):
        return torch.sigmoid(self.logits(x))


class _UNetBlock(nn.Module):
    def __init__(self, in_ch, skip_ch, out_ch):
        super().__init__()
        self.conv1 = _conv_bn_relu(in_ch + skip_ch, out_ch)
        self.conv2 = _conv_bn_relu(out_ch, out_ch)

    def forward(self, x, skip=None):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        if skip is not None:
            x = torch.cat([x, skip], 1)
        return self.conv2(self.conv1(x))


class UNet(Segmenter):
    """Expansive path: upsample, concatenate the same-stride encoder map, two convs."""

    def __init__(self, encoder, spec, widths):
        super().__init__(encoder, spec)
        enc = encoder.out_channels[::-1]  # deepest first
        skips = list(enc[1:]) + [0]
        ins = [enc[0]] + list(widths[:-1])
        self.blocks = nn.ModuleList(_UNetBlock(i, s, o) for i, s, o in zip(ins, skips, widths))
        self.head = nn.Conv2d(widths[-1], spec.output_classes, 3, padding=1)

    def decode(self, feats):
        feats = feats[::-1]
        x = feats[0]
        skips = feats[1:] + [None]
        for block, skip in zip(self.blocks, skips):
            x = block(x, skip)
        return self.head(x)


class _FPNSegBlock(nn.Sequential):
    def __init__(self, in_ch, out_ch, n_upsamples):
        layers = [_conv_bn_relu(in_ch, out_ch)]
        for _ in range(n_upsamples):
            layers.append(nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False))
            layers.append(_conv_bn_relu(out_ch, out_ch))
        super().__init__(*layers)


class FPN(Segmenter):
    """Top-down pathway with lateral 1x1 sums over the stride-4..32 maps,
    per-level conv heads merged by summation at stride 4."""

    def __init__(self, encoder, spec, widths):
        super().__init__(encoder, spec)
        pyr, seg = widths
        enc = encoder.out_channels[1:]  # stride 4 and deeper
        self.lateral = nn.ModuleList(nn.Conv2d(c, pyr, 1) for c in enc)
        n = len(enc)
        self.seg_blocks = nn.ModuleList(_FPNSegBlock(pyr, seg, i) for i in range(n))
        self.head = nn.Conv2d(seg, spec.output_classes, 3, padding=1)

    def decode(self, feats):
        feats = feats[1:]
        p = self.lateral[-1](feats[-1])
        pyramid = [p]
        for lat, f in zip(reversed(self.lateral[:-1]), reversed(feats[:-1])):
            p = F.interpolate(p, scale_factor=2, mode="nearest") + lat(f)
            pyramid.append(p)
        pyramid = pyramid[::-1]  # stride 4 first
        merged = sum(block(p) for block, p in zip(self.seg_blocks, pyramid))
        out = self.head(merged)
        return F.interpolate(out, scale_factor=4, mode="bilinear", align_corners=False)


class _LinkBlock(nn.Sequential):
    def __init__(self, in_ch, out_ch):
        mid = max(in_ch // 4, 1)
        super().__init__(
            _conv_bn_relu(in_ch, mid, 1),
            nn.ConvTranspose2d(mid, mid, 3, stride=2, padding=1, output_padding=1, bias=False),
            nn.BatchNorm2d(mid),
            nn.ReLU(),
            _conv_bn_relu(mid, out_ch, 1),
        )


class LinkNet(Segmenter):
    """Residual decoder blocks whose outputs are added to the encoder map of
    the same stride."""

    def __init__(self, encoder, spec, prefinal):
        super().__init__(encoder, spec)
        enc = encoder.out_channels[::-1]
        outs = list(enc[1:]) + [prefinal]
        self.blocks = nn.ModuleList(_LinkBlock(i, o) for i, o in zip(enc, outs))
        self.head = nn.Conv2d(prefinal, spec.output_classes, 3, padding=1)

    def decode(self, feats):
        feats = feats[::-1]
        x = feats[0]
        skips = feats[1:] + [None]
        for block, skip in zip(self.blocks, skips):
            x = block(x)
            if skip is not None:
                x = x + skip
        return self.head(x)


_SEGMENTERS = {"unet": UNet, "fpn": FPN, "linknet": LinkNet}


def build_segmenter(spec: ModelSpec, seed: int | None = None, encoder: DenseEncoder | None = None) -> Segmenter:
    """U-Net, FPN or LinkNet over a dense encoder; one sigmoid output channel."""
    if spec.architecture not in _SEGMENTERS:
        raise ValueError(f"unknown segmentation architecture {spec.architecture!r}")
    widths = DECODER_WIDTHS[spec.encoder.width_scale][spec.architecture]

    def make():
        enc = encoder if encoder is not None else build_encoder(spec.encoder)
        return _SEGMENTERS[spec.architecture](enc, spec, widths)

    if seed is None:
        return make()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return make()


def build_classifier(encoder: DenseEncoder, num_classes: int, seed: int | None = None) -> Classifier:
    if seed is None:
        return Classifier(encoder, num_classes)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Classifier(encoder, num_classes)


def build_model(spec: ModelSpec, seed: int | None = None) -> nn.Module:
    if spec.architecture == "classifier":
        return build_classifier(build_encoder(spec.encoder, seed), spec.output_classes, seed)
    return build_segmenter(spec, seed)
