"""Cluster pre-training, segmentation fine-tuning and the standard/proposed
framework composition."""

from __future__ import annotations

import json
import logging
import re
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .clustering import SUPPORTED_K
from .datasets import TileSet
from .models import (
    ARCHITECTURES,
    EncoderSpec,
    ModelSpec,
    ParameterStore,
    build_classifier,
    build_encoder,
    build_segmenter,
    transfer_encoder,
)

log = logging.getLogger(__name__)

FRAMEWORKS = ("standard", "proposed")
DATASETS = ("LD30", "LD50")
_DATASET_RE = re.compile(r"^LD[1-9][0-9]*$")


class TrainingError(RuntimeError):
    pass


class CombinationError(ValueError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    epochs: int = 300
    batch_size: int = 32
    seed: int = 0
    optimizer: str = "adam"
    loss: str | None = None  # "pixel-bce" or "categorical-ce"; picked per task when None
    device: str = "cpu"
    checkpoint_every: int = 25

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.loss not in (None, "pixel-bce", "categorical-ce"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.device not in ("cpu", "accelerator"):
            raise ValueError(f"unknown device {self.device!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainRecord:
    losses: list = field(default_factory=list)
    metrics: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    initial_encoder_checksum: str = ""
    final_checksum: str = ""
    wall_time: float = field(default=0.0, compare=False)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def _device(config: TrainConfig) -> torch.device:
    if config.device == "accelerator" and torch.cuda.is_available():
        return torch.device("cuda")
    return torch.device("cpu")


def tiles_to_tensor(tiles: TileSet) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(tiles.pixels, dtype=np.float32))


def band_stats(tiles: TileSet) -> tuple[np.ndarray, np.ndarray]:
    """Per-band mean and std over valid pixels."""
    px = tiles.pixels.astype(np.float64).transpose(1, 0, 2, 3).reshape(tiles.pixels.shape[1], -1)
    v = tiles.valid.reshape(-1)
    px = px[:, v] if v.any() else px
    return px.mean(axis=1), px.std(axis=1)


def _ensure_input_stats(encoder, tiles: TileSet) -> None:
    # Untouched (identity) normalization gets fitted to the data; stats that
    # arrived via transfer are kept.
    if torch.all(encoder.input_mean == 0) and torch.all(encoder.input_std == 1):
        mean, std = band_stats(tiles)
        encoder.set_input_stats(mean, std)


def _make_optimizer(model: nn.Module, config: TrainConfig):
    if config.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    return torch.optim.SGD(model.parameters(), lr=config.learning_rate)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = perm[start:start + batch_size]
        if len(idx) == 1:
            # batch norm needs two values per channel on the 1x1 deepest map;
            # a duplicated sample leaves the mean loss and its gradient unchanged
            idx = np.repeat(idx, 2)
        yield idx


def segmentation_loss(logits, target, valid):
    """Per-pixel binary cross-entropy averaged over valid pixels."""
    bce = F.binary_cross_entropy_with_logits(logits, target, reduction="none")
    w = valid.to(bce.dtype)
    return (bce * w).sum() / w.sum().clamp_min(1)


def _run_loop(model, X, targets, step_fn, config, record, checkpoint_dir, meta):
    device = _device(config)
    model.to(device)
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    opt = _make_optimizer(model, config)
    n = X.shape[0]
    t0 = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        model.train()
        tot_loss = tot_n = correct = counted = 0.0
        for bi, idx in enumerate(_batches(n, config.batch_size, rng)):
            it = torch.from_numpy(idx)
            xb = X[it].to(device)
            tb = [t[it].to(device) for t in targets]
            loss, hits, total = step_fn(model, xb, tb)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss.item()} at epoch {epoch}, batch {bi}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot_loss += loss.item() * len(idx)
            tot_n += len(idx)
            correct += hits
            counted += total
        record.losses.append(tot_loss / tot_n)
        record.metrics.append({"epoch": epoch, "accuracy": correct / max(counted, 1)})
        if checkpoint_dir is not None and (epoch % config.checkpoint_every == 0 or epoch == config.epochs):
            path = Path(checkpoint_dir) / f"epoch_{epoch}.pt"
            ParameterStore.from_module(model, dict(meta, epoch=epoch)).save(path)
            record.checkpoints.append(path.name)
        log.debug("epoch %d loss %.5f", epoch, record.losses[-1])
    record.wall_time = time.perf_counter() - t0
    model.cpu()


def pretrain(classifier, cluster_tiles: TileSet, config: TrainConfig, checkpoint_dir=None, meta=None):
    """Fit the classifier to cluster pseudo-labels with categorical cross-entropy.

    Returns:
        (ParameterStore, TrainRecord). The store includes the encoder, its
        batch-norm statistics and input normalization.
    """
    if len(cluster_tiles) == 0:
        raise TrainingError("cluster dataset is empty")
    k = classifier.fc.out_features
    labels = np.asarray(cluster_tiles.label)
    if labels.min() < 0 or labels.max() >= k:
        raise TrainingError(f"cluster labels must lie in [0, {k})")
    _ensure_input_stats(classifier.encoder, cluster_tiles)
    X = tiles_to_tensor(cluster_tiles)
    y = torch.from_numpy(labels.astype(np.int64))
    record = TrainRecord(initial_encoder_checksum=ParameterStore.from_module(classifier).encoder_checksum())

    def step(model, xb, tb):
        logits = model(xb)
        loss = F.cross_entropy(logits, tb[0])
        return loss, int((logits.argmax(1) == tb[0]).sum()), len(tb[0])

    meta = dict(meta or {}, task="pretrain", train_config=config.to_dict())
    _run_loop(classifier, X, [y], step, config, record, checkpoint_dir, meta)
    store = ParameterStore.from_module(classifier, meta)
    record.final_checksum = store.checksum()
    return store, record


def train_segmenter(model, labeled_tiles: TileSet, config: TrainConfig, checkpoint_dir=None, meta=None):
    """Fine-tune a segmenter on tile mask windows with per-pixel BCE."""
    if len(labeled_tiles) == 0:
        raise TrainingError("labeled dataset is empty")
    _ensure_input_stats(model.encoder, labeled_tiles)
    X = tiles_to_tensor(labeled_tiles)
    y = torch.from_numpy(labeled_tiles.mask.astype(np.float32))[:, None]
    v = torch.from_numpy(labeled_tiles.valid)[:, None]
    record = TrainRecord(initial_encoder_checksum=ParameterStore.from_module(model).encoder_checksum())

    def step(model, xb, tb):
        target, valid = tb
        logits = model.logits(xb)
        loss = segmentation_loss(logits, target, valid)
        hits = int((((logits > 0).float() == target) & valid).sum())
        return loss, hits, int(valid.sum())

    meta = dict(meta or {}, task="segmentation", train_config=config.to_dict())
    _run_loop(model, X, [y, v], step, config, record, checkpoint_dir, meta)
    store = ParameterStore.from_module(model, meta)
    record.final_checksum = store.checksum()
    return store, record


@torch.no_grad()
def predict_tiles(model, tiles: TileSet | np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode probabilities, shape (N, s, s)."""
    pixels = tiles.pixels if isinstance(tiles, TileSet) else tiles
    model.eval()
    out = []
    for start in range(0, pixels.shape[0], batch_size):
        xb = torch.from_numpy(np.ascontiguousarray(pixels[start:start + batch_size], dtype=np.float32))
        out.append(model(xb)[:, 0].numpy())
    if not out:
        return np.zeros((0,) + pixels.shape[-2:], dtype=np.float32)
    return np.concatenate(out)


def pixel_accuracy(model, tiles: TileSet, threshold: float = 0.5) -> float:
    prob = predict_tiles(model, tiles)
    pred = prob > threshold
    v = tiles.valid
    return float(((pred == (tiles.mask > 0)) & v).sum() / v.sum())


# ---------------------------------------------------------------- frameworks


@dataclass(frozen=True)
class Combination:
    framework: str
    arch: str
    k: int | None
    dataset: str

    def __post_init__(self):
        validate_combination(self.framework, self.arch, self.k, self.dataset)

    @property
    def k_tag(self) -> str:
        return "na" if self.k is None else str(self.k)

    def relpath(self) -> Path:
        return Path(self.framework) / self.arch / f"k{self.k_tag}" / self.dataset

    def sort_key(self):
        return (self.framework, self.arch, -1 if self.k is None else self.k, self.dataset)

    def to_dict(self) -> dict:
        return {"framework": self.framework, "arch": self.arch, "k": self.k, "dataset": self.dataset}


def validate_combination(framework, arch, k, dataset, allow_any_k: bool = False) -> None:
    if framework not in FRAMEWORKS:
        raise CombinationError(f"unknown framework {framework!r}")
    if arch not in ARCHITECTURES:
        raise CombinationError(f"unknown architecture {arch!r}")
    if not _DATASET_RE.match(str(dataset)):
        raise CombinationError(f"dataset names look like LD30 or LD50, got {dataset!r}")
    if framework == "standard" and k is not None:
        raise CombinationError("the standard framework takes no cluster count")
    if framework == "proposed":
        if k is None:
            raise CombinationError("the proposed framework needs a cluster count k")
        if not allow_any_k and k not in SUPPORTED_K:
            raise CombinationError(f"k must be one of {SUPPORTED_K}, got {k}")


def combinations(frameworks=FRAMEWORKS, archs=ARCHITECTURES, k_values=SUPPORTED_K, datasets=DATASETS):
    """Every requested (framework, arch, k, dataset), sorted."""
    out = []
    for fw in frameworks:
        for arch in archs:
            for k in ([None] if fw == "standard" else k_values):
                for ds in datasets:
                    out.append(Combination(fw, arch, k, ds))
    return sorted(out, key=Combination.sort_key)


def run_pretrain(k: int, encoder_spec: EncoderSpec, cluster_tiles: TileSet, config: TrainConfig,
                 checkpoint_dir=None, meta=None):
    classifier = build_classifier(build_encoder(encoder_spec, config.seed), k, config.seed)
    return pretrain(classifier, cluster_tiles, config, checkpoint_dir, dict(meta or {}, k=k))


def run_framework(
    combo: Combination,
    *,
    encoder_spec: EncoderSpec,
    finetune_config: TrainConfig,
    train_tiles: TileSet,
    pretrain_config: TrainConfig | None = None,
    cluster_tiles: TileSet | None = None,
    pretrained: ParameterStore | None = None,
    checkpoint_root=None,
    meta=None,
) -> ParameterStore:
    """Standard: random encoder then fine-tune. Proposed: cluster pre-training,
    encoder transfer, then fine-tune.

    ``pretrained`` short-circuits pre-training with an existing classifier store.
    """
    provenance = dict(meta or {}, combination=combo.to_dict())
    model = build_segmenter(ModelSpec(combo.arch, encoder_spec), seed=finetune_config.seed)
    if combo.framework == "proposed":
        if pretrained is None:
            if cluster_tiles is None or pretrain_config is None:
                raise CombinationError("proposed framework needs cluster tiles or a pretrained store")
            pretrained, _ = run_pretrain(combo.k, encoder_spec, cluster_tiles, pretrain_config, meta=meta)
        transfer_encoder(pretrained, model)
        provenance["pretrain_checksum"] = pretrained.checksum()
        provenance["pretrain_encoder_checksum"] = pretrained.encoder_checksum()
    ckdir = None if checkpoint_root is None else Path(checkpoint_root) / combo.relpath()
    store, record = train_segmenter(model, train_tiles, finetune_config, ckdir, provenance)
    if ckdir is not None:
        record.save(ckdir / "record.json")
    store.meta["initial_encoder_checksum"] = record.initial_encoder_checksum
    store.meta["final_loss"] = record.losses[-1]
    return store


# ---------------------------------------------------------------- gradient check


def finite_difference_check(model, x, target, valid=None, n_params: int = 32, seed: int = 0, eps: float = 1e-7):
    """Compare autograd gradients with central differences on sampled scalars.

    Runs in float64. Returns a list of ``(name, flat_index, analytic, numeric,
    relative_error)``.
    """
    model = model.double().train()
    x = x.double()
    target = target.double()
    valid = torch.ones_like(target, dtype=torch.bool) if valid is None else valid
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    sizes = np.array([p.numel() for _, p in named])
    rng = np.random.default_rng(seed)
    flat = rng.choice(sizes.sum(), n_params, replace=False)
    bounds = np.cumsum(sizes)

    def loss_fn():
        return segmentation_loss(model.logits(x), target, valid)

    model.zero_grad()
    loss_fn().backward()
    results = []
    with torch.no_grad():
        for f in np.sort(flat):
            pi = int(np.searchsorted(bounds, f, side="right"))
            local = int(f - (bounds[pi - 1] if pi else 0))
            name, p = named[pi]
            view = p.view(-1)
            analytic = float(p.grad.view(-1)[local])
            orig = view[local].item()
            view[local] = orig + eps
            up = loss_fn().item()
            view[local] = orig - eps
            down = loss_fn().item()
            view[local] = orig
            numeric = (up - down) / (2 * eps)
            denom = max(abs(analytic), abs(numeric), 1e-8)
            results.append((name, local, analytic, numeric, abs(analytic - numeric) / denom))
    return results
