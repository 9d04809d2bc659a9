"""Labeled and cluster tile datasets, class balancing, flip augmentation,
and the sharded on-disk format."""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import kernels
from .clustering import KMeansModel, assign
from .raster import AreaSplit, MaskRaster, TileGrid

TRAIN, TEST = 0, 1
AREA_NAMES = ("train", "test")
# variant codes: 0 identity, 1 horizontal flip, 2 vertical flip, 3 both
VARIANT_NAMES = ("identity", "hflip", "vflip", "hvflip")

# Record layout of a shard, in order. Every field is an array whose first
# axis indexes tiles.
SHARD_FIELDS = ("pixels", "valid", "label", "mask", "area", "scene", "row", "col", "variant")
SHARD_SIZE = 4096
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


class DatasetError(ValueError):
    pass


@dataclass
class TileSet:
    """A batch of tiles stored column-wise.

    ``label`` is the landslide flag for labeled datasets and the cluster id for
    cluster datasets. ``mask`` holds the landslide target window and is all
    zero for cluster datasets.
    """

    pixels: np.ndarray  # (N, bands, s, s)
    valid: np.ndarray  # (N, s, s) bool
    label: np.ndarray  # (N,) int64
    mask: np.ndarray  # (N, s, s) uint8
    area: np.ndarray  # (N,) uint8, TRAIN or TEST
    scene: np.ndarray  # (N,) int32
    row: np.ndarray  # (N,) int32
    col: np.ndarray  # (N,) int32
    variant: np.ndarray  # (N,) uint8

    def __len__(self) -> int:
        return self.label.shape[0]

    def subset(self, idx) -> "TileSet":
        return TileSet(**{f.name: getattr(self, f.name)[idx] for f in fields(self)})

    @classmethod
    def concat(cls, parts) -> "TileSet":
        parts = list(parts)
        return cls(**{f.name: np.concatenate([getattr(p, f.name) for p in parts]) for f in fields(cls)})

    def class_counts(self, num_classes: int | None = None) -> dict[int, int]:
        n = int(self.label.max()) + 1 if len(self) else 0
        counts = np.bincount(self.label, minlength=max(n, num_classes or 0))
        return {i: int(c) for i, c in enumerate(counts)}


@dataclass
class DatasetManifest:
    dataset_kind: str  # "labeled" or "cluster"
    class_counts: dict  # labeled: {area: {class: n}}; cluster: {class: n}
    total: int
    source_scenes: list = field(default_factory=list)
    k: int | None = None
    augmentation_factor: int = 0
    split_ratio: float | None = None
    seeds: dict = field(default_factory=dict)
    pad_mode: str = "zero_pad"
    tile_size: int = 32
    dropped_nodata_tiles: int = 0
    extra: dict = field(default_factory=dict)

    def count_sum(self) -> int:
        if self.dataset_kind == "labeled":
            return sum(sum(v.values()) for v in self.class_counts.values())
        return sum(self.class_counts.values())

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(**d)


def _labeled_counts(labels: np.ndarray, area: np.ndarray) -> dict:
    return {
        name: {str(c): int(np.count_nonzero((area == a) & (labels == c))) for c in (0, 1)}
        for a, name in enumerate(AREA_NAMES)
    }


def build_labeled_dataset(
    grid: TileGrid, mask: MaskRaster, split: AreaSplit, scene_index: int = 0
) -> tuple[TileSet, DatasetManifest]:
    """Label each tile 1 when at least one mask pixel falls inside it.

    Tiles with no valid pixel are dropped. A tile belongs to the train area
    only when its whole window lies on the train side of the cut.
    """
    r = grid.raster
    if (mask.height, mask.width) != (r.height, r.width):
        raise DatasetError(f"mask {mask.values.shape} does not match raster {(r.height, r.width)}")
    if (split.height, split.width) != (r.height, r.width):
        raise DatasetError("split was computed for a different raster")
    pixels, valid = grid.stack()
    masks = grid.split(mask.values, 0)
    pos = grid.positive_counts(mask.values).ravel()
    keep = valid.reshape(len(grid), -1).any(axis=1)

    n = len(grid)
    rows, cols = np.divmod(np.arange(n), grid.cols)
    area = np.array(
        [TRAIN if split.window_in_train(*grid.window(rr, cc)) else TEST for rr, cc in zip(rows, cols)],
        dtype=np.uint8,
    )
    tiles = TileSet(
        pixels=pixels,
        valid=valid,
        label=(pos > 0).astype(np.int64),
        mask=masks.astype(np.uint8),
        area=area,
        scene=np.full(n, scene_index, dtype=np.int32),
        row=rows.astype(np.int32),
        col=cols.astype(np.int32),
        variant=np.zeros(n, dtype=np.uint8),
    ).subset(keep)
    manifest = DatasetManifest(
        dataset_kind="labeled",
        class_counts=_labeled_counts(tiles.label, tiles.area),
        total=len(tiles),
        split_ratio=round(split.achieved_ratio, 6),
        pad_mode=grid.pad_mode,
        tile_size=grid.tile_size,
        dropped_nodata_tiles=int(n - keep.sum()),
        extra={"split": split.to_dict()},
    )
    return tiles, manifest


def build_cluster_dataset(grids, model: KMeansModel) -> tuple[TileSet, DatasetManifest]:
    """Label each tile with the predominant k-means cluster of its valid pixels."""
    if model is None or getattr(model, "centroids", None) is None:
        raise DatasetError("k-means model is not fitted")
    parts = []
    dropped = 0
    grids = list(grids)
    for si, grid in enumerate(grids):
        r = grid.raster
        labels = np.zeros((r.height, r.width), dtype=np.int64)
        v = r.valid
        if v.any():
            labels[v] = assign(model, r.pixels[:, v].T)
        modal = kernels.tile_modal_labels(labels, v, grid.tile_size, grid.rows, grid.cols, model.k).ravel()
        keep = modal >= 0
        dropped += int((~keep).sum())
        pixels, valid = grid.stack()
        n = len(grid)
        rows, cols = np.divmod(np.arange(n), grid.cols)
        s = grid.tile_size
        parts.append(
            TileSet(
                pixels=pixels,
                valid=valid,
                label=modal,
                mask=np.zeros((n, s, s), dtype=np.uint8),
                area=np.full(n, TRAIN, dtype=np.uint8),
                scene=np.full(n, si, dtype=np.int32),
                row=rows.astype(np.int32),
                col=cols.astype(np.int32),
                variant=np.zeros(n, dtype=np.uint8),
            ).subset(keep)
        )
    tiles = TileSet.concat(parts)
    counts = tiles.class_counts(model.k)
    manifest = DatasetManifest(
        dataset_kind="cluster",
        class_counts={str(c): n for c, n in counts.items()},
        total=len(tiles),
        k=model.k,
        seeds={"kmeans": model.seed},
        pad_mode=grids[0].pad_mode if grids else "zero_pad",
        tile_size=grids[0].tile_size if grids else 32,
        dropped_nodata_tiles=dropped,
    )
    return tiles, manifest


def balance_classes(tiles: TileSet, seed: int = 0, num_classes: int | None = None) -> TileSet:
    """Undersample every class to the minority-class count.

    With ``num_classes`` every class in ``range(num_classes)`` must be present;
    otherwise the classes present in ``tiles`` are balanced. Original tile order
    is preserved.
    """
    if len(tiles) == 0:
        raise DatasetError("cannot balance an empty dataset")
    counts = np.bincount(tiles.label, minlength=num_classes or 0)
    classes = np.arange(len(counts)) if num_classes else np.nonzero(counts)[0]
    if num_classes and (counts[:num_classes] == 0).any():
        empty = int(np.nonzero(counts[:num_classes] == 0)[0][0])
        raise DatasetError(f"class {empty} has no tiles")
    target = int(counts[classes].min())
    rng = np.random.default_rng(seed)
    keep = []
    for c in classes:
        idx = np.nonzero(tiles.label == c)[0]
        if len(idx) > target:
            idx = rng.choice(idx, target, replace=False)
        keep.append(idx)
    return tiles.subset(np.sort(np.concatenate(keep)))


def hflip(a: np.ndarray) -> np.ndarray:
    return a[..., ::-1]


def vflip(a: np.ndarray) -> np.ndarray:
    return a[..., ::-1, :]


def apply_variant(a: np.ndarray, variant: int) -> np.ndarray:
    if variant & 1:
        a = hflip(a)
    if variant & 2:
        a = vflip(a)
    return np.ascontiguousarray(a)


def augment_positives(tiles: TileSet, factor: int, seed: int = 0) -> TileSet:
    """Replace every positive train-area tile by ``factor`` flip variants.

    Each source tile cycles through the four variants in a seeded order that
    always starts with the unflipped original. Pixels, validity and target
    mask receive the same flip. Every other tile passes through unchanged.
    """
    if factor < 1:
        raise DatasetError("augmentation factor must be >= 1")
    rng = np.random.default_rng(seed)
    src_idx, variants = [], []
    for i in range(len(tiles)):
        if tiles.label[i] == 1 and tiles.area[i] == TRAIN:
            order = np.concatenate([[0], 1 + rng.permutation(3)])
            src_idx.extend([i] * factor)
            variants.extend(order[j % 4] for j in range(factor))
        else:
            src_idx.append(i)
            variants.append(-1)
    src_idx = np.asarray(src_idx, dtype=np.int64)
    variants = np.asarray(variants, dtype=np.int64)
    out = tiles.subset(src_idx)
    out.pixels = out.pixels.copy()
    out.valid = out.valid.copy()
    out.mask = out.mask.copy()
    for v in (1, 2, 3):
        sel = variants == v
        if sel.any():
            out.pixels[sel] = apply_variant(out.pixels[sel], v)
            out.valid[sel] = apply_variant(out.valid[sel], v)
            out.mask[sel] = apply_variant(out.mask[sel], v)
    aug = variants >= 0
    out.variant = np.where(aug, variants, out.variant).astype(np.uint8)
    return out


def augmented_manifest(base: DatasetManifest, tiles: TileSet, factor: int, seed: int) -> DatasetManifest:
    return replace(
        base,
        class_counts=_labeled_counts(tiles.label, tiles.area),
        total=len(tiles),
        augmentation_factor=factor,
        seeds={**base.seeds, "augment": seed},
    )


def train_subset(tiles: TileSet) -> TileSet:
    return tiles.subset(tiles.area == TRAIN)


# ---------------------------------------------------------------- shards


def _write_npy_zip(path: Path, arrays: dict) -> None:
    # fixed timestamps keep shard bytes reproducible
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in SHARD_FIELDS:
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=_ZIP_EPOCH)
            zf.writestr(info, buf.getvalue())


def save_tileset(tiles: TileSet, directory, manifest: DatasetManifest, shard_size: int = SHARD_SIZE) -> Path:
    """Write ``shard_#####.npz`` files plus ``manifest.json`` into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for old in d.glob("shard_*.npz"):
        old.unlink()
    if manifest.total != len(tiles) or manifest.count_sum() != len(tiles):
        raise DatasetError("manifest totals do not match the dataset size")
    shards = []
    for i, start in enumerate(range(0, max(len(tiles), 1), shard_size)):
        part = tiles.subset(slice(start, start + shard_size))
        name = f"shard_{i:05d}.npz"
        _write_npy_zip(d / name, {f: getattr(part, f) for f in SHARD_FIELDS})
        shards.append({"file": name, "count": len(part)})
    doc = manifest.to_dict()
    doc["shards"] = shards
    doc["shard_fields"] = list(SHARD_FIELDS)
    (d / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return d / "manifest.json"


def load_tileset(directory) -> tuple[TileSet, DatasetManifest]:
    d = Path(directory)
    mpath = d / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"dataset manifest not found: {mpath}")
    doc = json.loads(mpath.read_text())
    if doc.get("shard_fields") != list(SHARD_FIELDS):
        raise DatasetError(f"{mpath}: unsupported shard layout {doc.get('shard_fields')}")
    parts = []
    for shard in doc.pop("shards"):
        with np.load(d / shard["file"], allow_pickle=False) as z:
            parts.append(TileSet(**{f: z[f] for f in SHARD_FIELDS}))
    doc.pop("shard_fields")
    doc.pop("config_hash", None)
    return TileSet.concat(parts), DatasetManifest.from_dict(doc)
