"""Deterministic desk-scale rainforest scenes with fern-covered landslide
scars and spectrally similar confounder patches."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage
from shapely import affinity
from shapely.geometry import Polygon

from .raster import COMPONENT_STRUCTURE, MaskRaster, MultibandRaster, rasterize_mask


class SceneError(RuntimeError):
    pass


@dataclass(frozen=True)
class Signature:
    mean: tuple[float, ...]
    sigma: tuple[float, ...]


# B, G, R, NIR digital numbers
FOREST = Signature((310.0, 470.0, 360.0, 2500.0), (18.0, 22.0, 20.0, 140.0))
FERN = Signature((360.0, 600.0, 430.0, 3100.0), (18.0, 22.0, 20.0, 140.0))
PASTURE = Signature((365.0, 595.0, 440.0, 2300.0), (18.0, 22.0, 20.0, 140.0))


def _sig(value) -> Signature:
    if isinstance(value, Signature):
        return value
    return Signature(tuple(map(float, value["mean"])), tuple(map(float, value["sigma"])))


@dataclass
class SceneSpec:
    width: int = 512
    height: int = 512
    scar_count: int = 12
    confounder_count: int = 6
    scar_length: tuple[float, float] = (26.0, 60.0)  # major axis, pixels
    scar_elongation: tuple[float, float] = (2.5, 4.5)
    min_elongation: float = 2.0
    confounder_size: tuple[float, float] = (14.0, 30.0)
    confounder_elongation: tuple[float, float] = (1.0, 1.8)
    boundary_noise: float = 0.08
    margin: float = 4.0
    forest_signature: Signature = FOREST
    fern_signature: Signature = FERN
    confounder_signature: Signature = PASTURE
    seed: int = 0
    max_attempts: int = 2000
    transform: tuple[float, ...] | None = (8.0, 0.0, 300000.0, 0.0, -8.0, 7400000.0)
    crs: str | None = "EPSG:31983"

    def __post_init__(self):
        self.forest_signature = _sig(self.forest_signature)
        self.fern_signature = _sig(self.fern_signature)
        self.confounder_signature = _sig(self.confounder_signature)
        self.scar_length = tuple(self.scar_length)
        self.scar_elongation = tuple(self.scar_elongation)
        self.confounder_size = tuple(self.confounder_size)
        self.confounder_elongation = tuple(self.confounder_elongation)
        if self.transform is not None:
            self.transform = tuple(self.transform)
        means = {self.forest_signature.mean, self.fern_signature.mean, self.confounder_signature.mean}
        if len(means) != 3:
            raise ValueError("forest, fern and confounder signatures must differ in mean")
        if self.scar_elongation[0] < self.min_elongation:
            raise ValueError("scar_elongation lower bound is below min_elongation")

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("forest_signature", "fern_signature", "confounder_signature"):
            d[key] = {"mean": list(d[key]["mean"]), "sigma": list(d[key]["sigma"])}
        for key in ("scar_length", "scar_elongation", "confounder_size", "confounder_elongation", "transform"):
            if d[key] is not None:
                d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(**d)


@dataclass
class SyntheticScene:
    raster: MultibandRaster
    mask: MaskRaster
    confounder_mask: MaskRaster
    scar_polygons: list = field(default_factory=list)  # in raster (geo) coordinates
    confounder_polygons: list = field(default_factory=list)

    def __iter__(self):
        return iter((self.raster, self.mask, self.confounder_mask))


def _blob(rng, center, length, elongation, noise, exponent=2.5, n_vertices=64) -> Polygon:
    """Rotated super-ellipse with smooth radial boundary noise, pixel space."""
    a = length / 2.0
    b = a / elongation
    t = np.linspace(0, 2 * np.pi, n_vertices, endpoint=False)
    c, s = np.cos(t), np.sin(t)
    x = a * np.sign(c) * np.abs(c) ** (2 / exponent)
    y = b * np.sign(s) * np.abs(s) ** (2 / exponent)
    wobble = np.zeros_like(t)
    for freq in (2, 3, 5):
        wobble += rng.uniform(-1, 1) * np.sin(freq * t + rng.uniform(0, 2 * np.pi))
    wobble = noise * wobble / 3.0
    poly = Polygon(np.column_stack([x * (1 + wobble), y * (1 + wobble)]))
    poly = affinity.rotate(poly, rng.uniform(0, 180), origin=(0, 0))
    return affinity.translate(poly, *center)


def _to_geo(poly: Polygon, transform):
    if transform is None:
        return poly
    a, b, c, d, e, f = transform
    return affinity.affine_transform(poly, [a, b, d, e, c, f])


def elongation(component: np.ndarray) -> float:
    """Major/minor axis ratio from the second moments of a binary region."""
    ys, xs = np.nonzero(component)
    if len(xs) < 3:
        return 1.0
    cov = np.cov(np.vstack([xs, ys]).astype(np.float64))
    ev = np.sort(np.linalg.eigvalsh(cov))
    if ev[0] <= 0:
        return float("inf")
    return float(np.sqrt(ev[1] / ev[0]))


def _place(rng, spec, count, size_range, elong_range, placed, template, check_elongation):
    out = []
    attempts = 0
    while len(out) < count:
        attempts += 1
        if attempts > spec.max_attempts:
            raise SceneError(
                f"could not place {count} shapes within {spec.max_attempts} attempts; scene too crowded"
            )
        length = rng.uniform(*size_range)
        elong = rng.uniform(*elong_range)
        edge = length / 2 + spec.margin
        if 2 * edge >= min(spec.width, spec.height):
            continue
        center = (rng.uniform(edge, spec.width - edge), rng.uniform(edge, spec.height - edge))
        poly = _blob(rng, center, length, elong, spec.boundary_noise)
        if not poly.is_valid:
            continue
        if any(poly.distance(p) <= spec.margin for p in placed):
            continue
        geo = _to_geo(poly, spec.transform)
        burned = rasterize_mask([geo], template).values
        labels, n = ndimage.label(burned, structure=COMPONENT_STRUCTURE)
        if n != 1 or burned.sum() < 12:
            continue
        if check_elongation and elongation(burned) < spec.min_elongation:
            continue
        placed.append(poly)
        out.append(geo)
    return out


def generate_scene(spec: SceneSpec) -> SyntheticScene:
    """Forest background, ``scar_count`` fern scars (mask 1) and
    ``confounder_count`` pasture patches (mask 0). Deterministic per seed."""
    rng = np.random.default_rng(spec.seed)
    bands = len(spec.forest_signature.mean)
    template = MultibandRaster(
        np.zeros((bands, spec.height, spec.width), dtype=np.uint16),
        transform=spec.transform,
        crs=spec.crs,
    )
    placed = []
    scars = _place(rng, spec, spec.scar_count, spec.scar_length, spec.scar_elongation,
                   placed, template, True)
    confs = _place(rng, spec, spec.confounder_count, spec.confounder_size,
                   spec.confounder_elongation, placed, template, False)
    mask = rasterize_mask(scars, template)
    conf = rasterize_mask(confs, template)
    conf.values[mask.values == 1] = 0  # separated by margin; kept explicit

    pixels = np.empty((bands, spec.height, spec.width), dtype=np.float64)
    for sig, region in (
        (spec.forest_signature, np.ones((spec.height, spec.width), bool)),
        (spec.confounder_signature, conf.values == 1),
        (spec.fern_signature, mask.values == 1),
    ):
        n = int(region.sum())
        if n == 0:
            continue
        noise = rng.standard_normal((bands, n))
        pixels[:, region] = np.asarray(sig.mean)[:, None] + np.asarray(sig.sigma)[:, None] * noise
    pixels = np.clip(np.rint(pixels), 0, np.iinfo(np.uint16).max).astype(np.uint16)
    raster = MultibandRaster(pixels, transform=spec.transform, crs=spec.crs,
                             metadata={"synthetic_seed": spec.seed})
    return SyntheticScene(raster, mask, conf, scars, confs)
