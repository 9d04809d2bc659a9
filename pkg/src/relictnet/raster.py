"""Raster data model: scene I/O, void clipping, polygon rasterization,
train/test area split and fixed-size tiling."""

from __future__ import annotations

import json
import math
import os
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import shapely
from scipy import ndimage
from shapely.geometry import mapping, shape

from . import kernels

PAD_MODES = ("zero_pad", "crop")
DEFAULT_BANDS = ("blue", "green", "red", "nir")
# 8-connectivity for landslide components everywhere in the package.
COMPONENT_STRUCTURE = np.ones((3, 3), dtype=bool)


class RasterError(ValueError):
    """Invalid raster input, container or geometry."""


@dataclass
class MultibandRaster:
    """A band-major pixel grid with a per-pixel nodata mask."""

    pixels: np.ndarray
    nodata_mask: np.ndarray | None = None
    band_names: tuple[str, ...] | None = None
    transform: tuple[float, ...] | None = None
    crs: str | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.pixels.ndim == 2:
            self.pixels = self.pixels[None]
        if self.pixels.ndim != 3:
            raise RasterError(f"pixels must be (bands, height, width), got {self.pixels.shape}")
        c, h, w = self.pixels.shape
        if c < 1 or h < 1 or w < 1:
            raise RasterError(f"empty raster {self.pixels.shape}")
        if self.nodata_mask is None:
            self.nodata_mask = np.zeros((h, w), dtype=bool)
        self.nodata_mask = np.asarray(self.nodata_mask, dtype=bool)
        if self.nodata_mask.shape != (h, w):
            raise RasterError(f"nodata_mask shape {self.nodata_mask.shape} != {(h, w)}")
        if self.band_names is None:
            self.band_names = DEFAULT_BANDS if c == 4 else tuple(f"band{i + 1}" for i in range(c))
        self.band_names = tuple(self.band_names)
        if len(self.band_names) != c:
            raise RasterError("band_names length does not match band count")
        if self.transform is not None:
            self.transform = tuple(float(v) for v in self.transform[:6])

    @property
    def band_count(self) -> int:
        return self.pixels.shape[0]

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]

    @property
    def valid(self) -> np.ndarray:
        return ~self.nodata_mask

    def pixel_centers(self, space: str = "pixel") -> tuple[np.ndarray, np.ndarray]:
        """Coordinates of every pixel center, each shaped (height, width)."""
        ys, xs = np.mgrid[0:self.height, 0:self.width]
        cx, cy = xs + 0.5, ys + 0.5
        if space == "geo":
            if self.transform is None:
                raise RasterError("geo-referenced polygons need a raster transform")
            a, b, c, d, e, f = self.transform
            return a * cx + b * cy + c, d * cx + e * cy + f
        return cx, cy


@dataclass
class MaskRaster:
    """Binary {0,1} grid aligned with a MultibandRaster."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise RasterError("mask must be 2-D")
        if not np.isin(self.values, (0, 1)).all():
            raise RasterError("mask values must be 0 or 1")
        self.values = self.values.astype(np.uint8)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


# ---------------------------------------------------------------- I/O


def load_raster(path, expected_bands: int | Sequence[str] | None = None) -> MultibandRaster:
    """Read a GeoTIFF (``.tif``/``.tiff``) or numpy (``.npz``) container.

    Args:
        path: file to read.
        expected_bands: band count, or ordered band names, the file must carry.

    Returns:
        The raster with ``nodata_mask`` populated from the container's nodata
        value or mask band.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"raster not found: {path}")
    suffix = path.suffix.lower()
    try:
        if suffix == ".npz":
            raster = _load_npz(path)
        else:
            raster = _load_geotiff(path)
    except (FileNotFoundError, RasterError):
        raise
    except Exception as exc:
        raise RasterError(f"cannot read raster {path}: {exc}") from exc

    if expected_bands is not None:
        if isinstance(expected_bands, int):
            if raster.band_count != expected_bands:
                raise RasterError(
                    f"{path}: expected {expected_bands} bands, found {raster.band_count}"
                )
        elif tuple(expected_bands) != raster.band_names:
            raise RasterError(f"{path}: band schema {raster.band_names} != {tuple(expected_bands)}")
    return raster


def _load_npz(path: Path) -> MultibandRaster:
    with np.load(path, allow_pickle=False) as z:
        pixels = z["pixels"]
        if "nodata_mask" in z:
            mask = z["nodata_mask"].astype(bool)
        elif "nodata" in z:
            mask = _nodata_to_mask(pixels if pixels.ndim == 3 else pixels[None], z["nodata"].item())
        else:
            mask = None
        names = tuple(str(s) for s in z["band_names"]) if "band_names" in z else None
        transform = tuple(z["transform"].tolist()) if "transform" in z else None
        crs = str(z["crs"]) if "crs" in z else None
    return MultibandRaster(pixels, mask, names, transform, crs)


def _load_geotiff(path: Path) -> MultibandRaster:
    import rasterio
    from rasterio.enums import MaskFlags
    from rasterio.errors import NotGeoreferencedWarning

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NotGeoreferencedWarning)
        src = rasterio.open(path)
    with src:
        pixels = src.read()
        if src.nodata is not None:
            mask = _nodata_to_mask(pixels, src.nodata)
        elif any(MaskFlags.per_dataset in flags for flags in src.mask_flag_enums):
            mask = src.dataset_mask() == 0
        else:
            mask = None
        names = tuple(src.descriptions) if all(src.descriptions) else None
        transform = None
        if not src.transform.is_identity:
            transform = tuple(src.transform)[:6]
        crs = src.crs.to_string() if src.crs else None
    return MultibandRaster(pixels, mask, names, transform, crs)


def _nodata_to_mask(pixels: np.ndarray, nodata) -> np.ndarray:
    if isinstance(nodata, float) and math.isnan(nodata):
        return np.isnan(pixels).all(axis=0)
    return (pixels == nodata).all(axis=0)


def save_raster(raster, path, transform=None, crs=None) -> None:
    """Write a raster or a bare 2-D/3-D array (e.g. a probability grid).

    GeoTIFF output stores nodata as an internal mask band so that 0 stays a
    legal pixel value; ``.npz`` stores the mask array directly.
    """
    if not isinstance(raster, MultibandRaster):
        arr = np.asarray(raster)
        if arr.dtype == np.float64:
            arr = arr.astype(np.float32)
        raster = MultibandRaster(arr, transform=transform, crs=crs)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if path.suffix.lower() == ".npz":
            _save_npz(raster, path)
        else:
            _save_geotiff(raster, path)
    except OSError as exc:
        raise RasterError(f"cannot write raster {path}: {exc}") from exc
    except Exception as exc:
        if type(exc).__module__.startswith("rasterio"):
            raise RasterError(f"cannot write raster {path}: {exc}") from exc
        raise


def _save_npz(raster: MultibandRaster, path: Path) -> None:
    extra = {}
    if raster.transform is not None:
        extra["transform"] = np.asarray(raster.transform)
    if raster.crs is not None:
        extra["crs"] = np.asarray(raster.crs)
    with open(path, "wb") as fh:
        np.savez(
            fh,
            pixels=raster.pixels,
            nodata_mask=raster.nodata_mask,
            band_names=np.asarray(raster.band_names),
            **extra,
        )


def _save_geotiff(raster: MultibandRaster, path: Path) -> None:
    import rasterio
    from rasterio.transform import Affine
    from rasterio.errors import NotGeoreferencedWarning

    if not os.access(path.parent, os.W_OK):
        raise RasterError(f"cannot write raster {path}: directory not writable")
    profile = dict(
        driver="GTiff",
        width=raster.width,
        height=raster.height,
        count=raster.band_count,
        dtype=raster.pixels.dtype.name if raster.pixels.dtype != bool else "uint8",
        compress="deflate",
    )
    if raster.transform is not None:
        profile["transform"] = Affine(*raster.transform)
    if raster.crs is not None:
        profile["crs"] = raster.crs
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NotGeoreferencedWarning)
        with rasterio.Env(GDAL_TIFF_INTERNAL_MASK=True):
            with rasterio.open(path, "w", **profile) as dst:
                dst.write(raster.pixels.astype(profile["dtype"], copy=False))
                for i, name in enumerate(raster.band_names, start=1):
                    dst.set_band_description(i, name)
                if raster.nodata_mask.any():
                    dst.write_mask(np.where(raster.nodata_mask, 0, 255).astype(np.uint8))


def read_polygons(path) -> list:
    """Polygon/MultiPolygon geometries from a GeoJSON FeatureCollection."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"polygon file not found: {path}")
    doc = json.loads(path.read_text())
    features = doc.get("features", [doc] if doc.get("type") == "Feature" else [])
    geoms = []
    for feat in features:
        geom = feat.get("geometry")
        if geom is None:
            continue
        if geom["type"] not in ("Polygon", "MultiPolygon"):
            raise RasterError(f"unsupported geometry type {geom['type']!r}")
        g = shape(geom)
        if not g.is_valid:
            g = shapely.make_valid(g)
        geoms.append(g)
    return geoms


def write_polygons(polygons, path, properties: Sequence[dict] | None = None) -> None:
    feats = []
    for i, g in enumerate(polygons):
        props = dict(properties[i]) if properties else {"id": i}
        feats.append({"type": "Feature", "properties": props, "geometry": mapping(g)})
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps({"type": "FeatureCollection", "features": feats}))


# ---------------------------------------------------------------- geometry


def _polygon_space(raster: MultibandRaster, space: str) -> str:
    if space == "auto":
        return "geo" if raster.transform is not None else "pixel"
    if space not in ("pixel", "geo"):
        raise RasterError(f"unknown coordinate space {space!r}")
    return space


def _cover(polygons, raster: MultibandRaster, space: str) -> np.ndarray:
    """Boolean grid: pixel center strictly inside any polygon."""
    out = np.zeros((raster.height, raster.width), dtype=bool)
    if not polygons:
        return out
    cx, cy = raster.pixel_centers(_polygon_space(raster, space))
    xmin, xmax = cx.min(), cx.max()
    ymin, ymax = cy.min(), cy.max()
    for poly in polygons:
        bx0, by0, bx1, by1 = poly.bounds
        if bx1 < xmin or bx0 > xmax or by1 < ymin or by0 > ymax:
            continue
        sel = (cx >= bx0) & (cx <= bx1) & (cy >= by0) & (cy <= by1) & ~out
        if sel.any():
            idx = np.nonzero(sel)
            out[idx] = shapely.contains_xy(poly, cx[idx], cy[idx])
    return out


def clip_regions(raster: MultibandRaster, void_regions, space: str = "auto") -> MultibandRaster:
    """Zero and mark as nodata every pixel whose center lies in a void polygon."""
    void_regions = list(void_regions or [])
    hit = _cover(void_regions, raster, space)
    meta = dict(raster.metadata)
    if void_regions and not hit.any():
        meta["clip_warning"] = "void regions do not intersect the raster extent"
    pixels = raster.pixels.copy()
    pixels[:, hit] = 0
    return replace(raster, pixels=pixels, nodata_mask=raster.nodata_mask | hit, metadata=meta)


def rasterize_mask(polygons, template: MultibandRaster, space: str = "auto") -> MaskRaster:
    """Burn polygons into a {0,1} mask using the pixel-center rule."""
    return MaskRaster(_cover(list(polygons or []), template, space).astype(np.uint8))


# ---------------------------------------------------------------- split


@dataclass(frozen=True)
class AreaSplit:
    """A straight cut dividing the scene into a train and a test area.

    Pixels with coordinate ``< cut`` along ``axis`` form the low side.
    """

    axis: str
    cut: int
    train_side: str
    width: int
    height: int
    train_landslide_count: int
    test_landslide_count: int

    @property
    def achieved_ratio(self) -> float:
        total = self.train_landslide_count + self.test_landslide_count
        return self.train_landslide_count / total

    def train_mask(self) -> np.ndarray:
        ys, xs = np.mgrid[0:self.height, 0:self.width]
        coord = xs if self.axis == "x" else ys
        low = coord < self.cut
        return low if self.train_side == "low" else ~low

    def test_mask(self) -> np.ndarray:
        return ~self.train_mask()

    def window_in_train(self, x0: int, y0: int, w: int, h: int) -> bool:
        """True when the whole window lies inside the train area."""
        lo, hi = (x0, x0 + w) if self.axis == "x" else (y0, y0 + h)
        if self.train_side == "low":
            return hi <= self.cut
        return lo >= self.cut

    def to_dict(self) -> dict:
        return {
            "axis": self.axis,
            "cut": self.cut,
            "train_side": self.train_side,
            "width": self.width,
            "height": self.height,
            "train_landslide_count": self.train_landslide_count,
            "test_landslide_count": self.test_landslide_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AreaSplit":
        return cls(**{k: d[k] for k in (
            "axis", "cut", "train_side", "width", "height",
            "train_landslide_count", "test_landslide_count")})


def landslide_components(mask: MaskRaster) -> tuple[np.ndarray, int]:
    return ndimage.label(mask.values, structure=COMPONENT_STRUCTURE)


def split_train_test(raster: MultibandRaster, mask: MaskRaster, target_ratio: float = 0.7) -> AreaSplit:
    """Sweep vertical and horizontal cuts for the best landslide ratio.

    Cuts that would bisect a landslide component are never considered. The
    winner minimises ``|train components / total - target_ratio|``, then the
    distance of the train area fraction from the target, then prefers a
    vertical cut with the train area on the low side.
    """
    if not 0 < target_ratio < 1:
        raise RasterError("target_ratio must lie in (0, 1)")
    if (mask.height, mask.width) != (raster.height, raster.width):
        raise RasterError("mask and raster dimensions differ")
    labels, n = landslide_components(mask)
    if n < 2:
        raise RasterError(f"need at least 2 landslide components to split, found {n}")
    slices = ndimage.find_objects(labels)
    x_lo = np.array([s[1].start for s in slices])
    x_hi = np.array([s[1].stop for s in slices])  # exclusive
    y_lo = np.array([s[0].start for s in slices])
    y_hi = np.array([s[0].stop for s in slices])

    best = None
    for axis_rank, (axis, lo, hi, size) in enumerate(
        (("x", x_lo, x_hi, raster.width), ("y", y_lo, y_hi, raster.height))
    ):
        cuts = np.arange(size + 1)
        # components entirely below the cut / straddling it
        below = np.searchsorted(np.sort(hi), cuts, side="right")
        started = np.searchsorted(np.sort(lo), cuts, side="left")
        straddle = started - below
        for cut in cuts[straddle == 0]:
            n_low = int(below[cut])
            for side_rank, side in enumerate(("low", "high")):
                n_train = n_low if side == "low" else n - n_low
                if n_train == 0 or n_train == n:
                    continue
                area = cut / size if side == "low" else 1 - cut / size
                key = (
                    abs(n_train / n - target_ratio),
                    abs(area - target_ratio),
                    axis_rank,
                    side_rank,
                    int(cut),
                )
                if best is None or key < best[0]:
                    best = (key, axis, int(cut), side, n_train)
    if best is None:
        raise RasterError("no straight cut separates the landslides without bisecting one")
    _, axis, cut, side, n_train = best
    return AreaSplit(axis, cut, side, raster.width, raster.height, n_train, n - n_train)


# ---------------------------------------------------------------- tiling


@dataclass(frozen=True)
class Tile:
    grid_row: int
    grid_col: int
    window: tuple[int, int, int, int]  # x0, y0, w, h within the source extent
    padded: bool
    pixels: np.ndarray  # (bands, s, s)
    valid: np.ndarray  # (s, s) bool; False on nodata and padding


@dataclass
class TileGrid:
    """Disjoint ``tile_size`` windows covering the padded or cropped extent."""

    raster: MultibandRaster
    tile_size: int
    pad_mode: str
    rows: int
    cols: int

    def __len__(self) -> int:
        return self.rows * self.cols

    @property
    def extent(self) -> tuple[int, int]:
        """(height, width) of the tiled area."""
        return self.rows * self.tile_size, self.cols * self.tile_size

    def window(self, row: int, col: int) -> tuple[int, int, int, int]:
        s = self.tile_size
        x0, y0 = col * s, row * s
        return x0, y0, min(s, self.raster.width - x0), min(s, self.raster.height - y0)

    def pad(self, arr: np.ndarray, fill=0) -> np.ndarray:
        """Pad (or crop) a (..., H, W) array to the tiled extent."""
        eh, ew = self.extent
        out = np.full(arr.shape[:-2] + (eh, ew), fill, dtype=arr.dtype)
        h, w = min(eh, arr.shape[-2]), min(ew, arr.shape[-1])
        out[..., :h, :w] = arr[..., :h, :w]
        return out

    def split(self, arr: np.ndarray, fill=0) -> np.ndarray:
        """Cut a (..., H, W) array into (rows*cols, ..., s, s) tiles."""
        s = self.tile_size
        padded = self.pad(arr, fill)
        lead = padded.shape[:-2]
        t = padded.reshape(lead + (self.rows, s, self.cols, s))
        nl = len(lead)
        order = (nl, nl + 2) + tuple(range(nl)) + (nl + 1, nl + 3)
        return np.ascontiguousarray(t.transpose(order)).reshape((self.rows * self.cols,) + lead + (s, s))

    def stitch(self, tiles: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`split`; padding discarded, crop extent kept."""
        s = self.tile_size
        lead = tiles.shape[1:-2]
        t = tiles.reshape((self.rows, self.cols) + lead + (s, s))
        nl = len(lead)
        order = tuple(range(2, 2 + nl)) + (0, 2 + nl, 1, 3 + nl)
        full = t.transpose(order).reshape(lead + (self.rows * s, self.cols * s))
        h = min(full.shape[-2], self.raster.height)
        w = min(full.shape[-1], self.raster.width)
        return np.ascontiguousarray(full[..., :h, :w])

    def stack(self) -> tuple[np.ndarray, np.ndarray]:
        """All tiles at once: pixels (N, bands, s, s) and validity (N, s, s)."""
        return self.split(self.raster.pixels, 0), self.split(self.raster.valid, False)

    def __iter__(self) -> Iterator[Tile]:
        pixels, valid = self.stack()
        for i in range(len(self)):
            r, c = divmod(i, self.cols)
            x0, y0, w, h = self.window(r, c)
            padded = w < self.tile_size or h < self.tile_size
            yield Tile(r, c, (x0, y0, w, h), padded, pixels[i], valid[i])

    @property
    def tiles(self) -> list[Tile]:
        return list(self)

    def positive_counts(self, mask: np.ndarray) -> np.ndarray:
        """Positive mask pixels per tile, shape (rows, cols)."""
        return kernels.tile_positive_counts(mask, self.tile_size, self.rows, self.cols)


def make_tile_grid(raster: MultibandRaster, tile_size: int = 32, pad_mode: str = "zero_pad") -> TileGrid:
    if tile_size < 1:
        raise RasterError("tile_size must be >= 1")
    if pad_mode == "zero_pad":
        rows = -(-raster.height // tile_size)
        cols = -(-raster.width // tile_size)
    elif pad_mode == "crop":
        rows = raster.height // tile_size
        cols = raster.width // tile_size
        if rows == 0 or cols == 0:
            raise RasterError(
                f"tile_size {tile_size} exceeds raster extent {raster.width}x{raster.height} in crop mode"
            )
    else:
        raise RasterError(f"unknown pad_mode {pad_mode!r}; expected one of {PAD_MODES}")
    return TileGrid(raster, tile_size, pad_mode, rows, cols)
