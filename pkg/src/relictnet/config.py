"""Pipeline configuration document (YAML) with canonical serialization."""

from __future__ import annotations

import copy
import hashlib
import os
import re
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from .clustering import MAX_FIT_PIXELS, SUPPORTED_K
from .models import ARCHITECTURES
from .raster import PAD_MODES
from .synthetic import SceneSpec
from .training import FRAMEWORKS, TrainConfig

OUTPUT_ROOT_ENV = "RELICTNET_OUTPUT_ROOT"
_DATASET_RE = re.compile(r"^LD(\d+)$")


class ConfigError(ValueError):
    pass


@dataclass
class PathsConfig:
    output_root: str = "runs/default"
    scenes: list = field(default_factory=list)  # scenes pooled for clustering
    labeled_scene: str | None = None
    polygons: str | None = None  # landslide inventory (GeoJSON)
    void_regions: str | None = None  # ocean/urban areas to clip (GeoJSON)


@dataclass
class KMeansConfig:
    max_iter: int = 300
    tol: float = 1e-4
    sample_size: int = MAX_FIT_PIXELS
    standardize: bool = False


@dataclass
class SyntheticConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    scene_count: int = 1


@dataclass
class Seeds:
    data: int = 0  # balancing
    augment: int = 0
    kmeans: int = 0


@dataclass
class PipelineConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    tile_size: int = 32
    pad_mode: str = "zero_pad"
    split_ratio: float = 0.7
    k_values: list = field(default_factory=lambda: list(SUPPORTED_K))
    augmentation_factors: list = field(default_factory=lambda: [30, 50])
    frameworks: list = field(default_factory=lambda: list(FRAMEWORKS))
    architectures: list = field(default_factory=lambda: list(ARCHITECTURES))
    encoder_preset: str = "full"
    band_count: int = 4
    pretrain: TrainConfig = field(default_factory=TrainConfig)
    finetune: TrainConfig = field(default_factory=TrainConfig)
    kmeans: KMeansConfig = field(default_factory=KMeansConfig)
    threshold: float = 0.5
    seeds: Seeds = field(default_factory=Seeds)
    grid_seeds: list = field(default_factory=lambda: [0])
    workers: int = 1
    allow_any_k: bool = False
    synthetic: SyntheticConfig | None = None
    base_dir: str = field(default=".", compare=False, repr=False)

    def validate(self) -> "PipelineConfig":
        if self.tile_size < 1:
            raise ConfigError("tile_size must be >= 1")
        if self.pad_mode not in PAD_MODES:
            raise ConfigError(f"pad_mode must be one of {PAD_MODES}")
        if not 0 < self.split_ratio < 1:
            raise ConfigError("split_ratio must lie in (0, 1)")
        if not 0 < self.threshold < 1:
            raise ConfigError("threshold must lie in (0, 1)")
        if not self.allow_any_k:
            bad = [k for k in self.k_values if k not in SUPPORTED_K]
            if bad:
                raise ConfigError(f"k values {bad} outside {SUPPORTED_K} (use allow_any_k)")
        if any(int(k) < 2 for k in self.k_values):
            raise ConfigError("k values must be >= 2")
        if any(int(f) < 1 for f in self.augmentation_factors):
            raise ConfigError("augmentation factors must be >= 1")
        for fw in self.frameworks:
            if fw not in FRAMEWORKS:
                raise ConfigError(f"unknown framework {fw!r}")
        for arch in self.architectures:
            if arch not in ARCHITECTURES:
                raise ConfigError(f"unknown architecture {arch!r}")
        if self.encoder_preset not in ("full", "tiny"):
            raise ConfigError("encoder_preset must be 'full' or 'tiny'")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if not self.grid_seeds:
            raise ConfigError("grid_seeds must not be empty")
        if self.synthetic is None and not self.paths.labeled_scene:
            raise ConfigError("paths.labeled_scene is required without a synthetic block")
        return self

    @property
    def dataset_names(self) -> list[str]:
        return [f"LD{int(f)}" for f in self.augmentation_factors]

    # ------------------------------------------------------------ paths

    def resolve(self, p: str | None) -> Path | None:
        if p is None:
            return None
        path = Path(os.path.expandvars(p)).expanduser()
        return path if path.is_absolute() else Path(self.base_dir) / path

    @property
    def output_root(self) -> Path:
        env = os.environ.get(OUTPUT_ROOT_ENV)
        return Path(env) if env else self.resolve(self.paths.output_root)

    # ------------------------------------------------------------ serialization

    def to_dict(self) -> dict:
        return _to_plain(self)

    def dumps(self) -> str:
        """Canonical YAML: sorted keys, block style."""
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=False)

    def config_hash(self) -> str:
        d = self.to_dict()
        d["paths"].pop("output_root")
        d.pop("workers")
        blob = yaml.safe_dump(d, sort_keys=True, default_flow_style=False).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def dataset_factor(name: str) -> int:
    m = _DATASET_RE.match(name)
    if not m:
        raise ConfigError(f"dataset names look like LD30, got {name!r}")
    return int(m.group(1))


def _to_plain(obj):
    if isinstance(obj, (SceneSpec,)):
        return obj.to_dict()
    if is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in fields(obj) if f.compare}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    return obj


def _build(cls, data, where: str):
    if data is None:
        return None
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    known = {f.name: f for f in fields(cls) if f.compare}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for name, value in data.items():
        sub = _NESTED.get((cls, name))
        if sub is not None and value is not None:
            value = _build(sub, value, f"{where}.{name}") if sub is not SceneSpec else _scene(value, f"{where}.{name}")
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _scene(data, where):
    try:
        return SceneSpec.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


_NESTED = {
    (PipelineConfig, "paths"): PathsConfig,
    (PipelineConfig, "pretrain"): TrainConfig,
    (PipelineConfig, "finetune"): TrainConfig,
    (PipelineConfig, "kmeans"): KMeansConfig,
    (PipelineConfig, "seeds"): Seeds,
    (PipelineConfig, "synthetic"): SyntheticConfig,
    (SyntheticConfig, "scene"): SceneSpec,
}


def from_dict(data: dict, base_dir=".") -> PipelineConfig:
    cfg = _build(PipelineConfig, data or {}, "config")
    cfg.base_dir = str(base_dir)
    return cfg.validate()


def loads(text: str, base_dir=".") -> PipelineConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from exc
    return from_dict(data or {}, base_dir)


def load(path, overrides=()) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    data = apply_overrides(data, overrides)
    return from_dict(data, path.parent)


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``dotted.key=value`` overrides to scalar fields only."""
    data = copy.deepcopy(data)
    defaults = PipelineConfig().to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        parts = key.split(".")
        ref = defaults
        for p in parts:
            if not isinstance(ref, dict) or p not in ref:
                ref = None
                break
            ref = ref[p]
        if isinstance(ref, (list, dict)):
            raise ConfigError(f"override {key!r} targets a non-scalar field")
        value = yaml.safe_load(raw)
        if isinstance(value, (list, dict)):
            raise ConfigError(f"override {key!r} must be a scalar")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} crosses a non-mapping field")
        node[parts[-1]] = value
    return data
