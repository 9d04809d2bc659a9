"""k-means over per-pixel band vectors, used to pseudo-label tiles."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels

SUPPORTED_K = (2, 4, 6, 8, 10, 12)
MAX_FIT_PIXELS = 2_000_000


class ClusteringError(ValueError):
    pass


@dataclass(frozen=True)
class KMeansModel:
    k: int
    centroids: np.ndarray  # (k, bands)
    inertia: float
    iterations_run: int
    seed: int
    inertia_history: tuple[float, ...] = ()
    band_mean: np.ndarray | None = None  # set when fitted on standardized pixels
    band_std: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @property
    def band_count(self) -> int:
        return self.centroids.shape[1]

    def to_dict(self) -> dict:
        d = {
            "k": self.k,
            "seed": self.seed,
            "iterations_run": self.iterations_run,
            "inertia": self.inertia,
            "centroids": self.centroids.tolist(),
            "inertia_history": list(self.inertia_history),
        }
        if self.band_mean is not None:
            d["band_mean"] = self.band_mean.tolist()
            d["band_std"] = self.band_std.tolist()
        if self.extra:
            d["extra"] = self.extra
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "KMeansModel":
        mean = d.get("band_mean")
        std = d.get("band_std")
        return cls(
            k=int(d["k"]),
            centroids=np.asarray(d["centroids"], dtype=np.float64),
            inertia=float(d["inertia"]),
            iterations_run=int(d["iterations_run"]),
            seed=int(d["seed"]),
            inertia_history=tuple(d.get("inertia_history", ())),
            band_mean=None if mean is None else np.asarray(mean, dtype=np.float64),
            band_std=None if std is None else np.asarray(std, dtype=np.float64),
            extra=d.get("extra", {}),
        )

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "KMeansModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _kmeans_pp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding with 2 + log(k) local trials per centroid."""
    n = X.shape[0]
    trials = 2 + int(np.log(k))
    centers = np.empty((k, X.shape[1]), dtype=np.float64)
    centers[0] = X[rng.integers(n)]
    _, closest = kernels.nearest_centroid(X, centers[:1])
    pot = closest.sum()
    for c in range(1, k):
        if pot <= 0:
            # every remaining point coincides with a chosen center
            centers[c] = X[rng.integers(n)]
            continue
        cum = np.cumsum(closest)
        cand = np.searchsorted(cum, rng.random(trials) * cum[-1], side="right")
        cand = np.minimum(cand, n - 1)
        best_pot, best_d = None, None
        for idx in cand:
            _, d = kernels.nearest_centroid(X, X[idx:idx + 1])
            d = np.minimum(d, closest)
            p = d.sum()
            if best_pot is None or p < best_pot:
                best_pot, best_d, best_idx = p, d, idx
        centers[c] = X[best_idx]
        closest, pot = best_d, best_pot
    return centers


def fit_kmeans(
    pixels,
    k: int,
    seed: int = 0,
    max_iter: int = 300,
    tol: float = 1e-4,
    standardize: bool = False,
    sample_size: int | None = MAX_FIT_PIXELS,
) -> KMeansModel:
    """Lloyd's algorithm from k-means++ seeds.

    Stops when the largest centroid displacement drops below ``tol`` or after
    ``max_iter`` iterations. Inertia is checked to be non-increasing after
    every iteration. Empty clusters keep their previous centroid.

    Args:
        pixels: (n, bands) array of valid pixel vectors.
        sample_size: fit on a seeded uniform subsample of at most this many
            pixels; ``None`` uses all of them.
    """
    X = np.asarray(pixels, dtype=np.float64)
    if X.ndim != 2:
        raise ClusteringError("pixels must be an (n, bands) array")
    if k < 1:
        raise ClusteringError("k must be >= 1")
    if X.shape[0] < k:
        raise ClusteringError(f"need at least k={k} pixels, got {X.shape[0]}")
    if not np.isfinite(X).all():
        raise ClusteringError("pixels contain non-finite values")

    rng = np.random.default_rng(seed)
    if sample_size is not None and X.shape[0] > sample_size:
        X = X[np.sort(rng.choice(X.shape[0], sample_size, replace=False))]

    mean = std = None
    if standardize:
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        std[std == 0] = 1.0
        X = (X - mean) / std

    X = np.ascontiguousarray(X)
    centroids = _kmeans_pp(X, k, rng)
    labels, d2 = kernels.nearest_centroid(X, centroids)
    inertia = float(d2.sum())
    history = [inertia]
    it = 0
    for it in range(1, max_iter + 1):
        sums, counts = kernels.cluster_sums(X, labels, k)
        new = centroids.copy()
        nz = counts > 0
        new[nz] = sums[nz] / counts[nz, None]
        shift = float(np.sqrt(((new - centroids) ** 2).sum(axis=1)).max())
        centroids = new
        labels, d2 = kernels.nearest_centroid(X, centroids)
        new_inertia = float(d2.sum())
        if new_inertia > inertia * (1 + 1e-12) + 1e-9:
            raise ClusteringError(
                f"inertia increased at iteration {it}: {inertia} -> {new_inertia}"
            )
        inertia = new_inertia
        history.append(inertia)
        if shift < tol:
            break

    return KMeansModel(
        k=k,
        centroids=centroids,
        inertia=inertia,
        iterations_run=it,
        seed=seed,
        inertia_history=tuple(history),
        band_mean=mean,
        band_std=std,
        extra={"fit_pixels": int(X.shape[0])},
    )


def assign(model: KMeansModel, pixels) -> np.ndarray:
    """Nearest-centroid label per pixel; ties go to the lowest index."""
    X = np.asarray(pixels, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.band_count:
        raise ClusteringError(
            f"pixel dimensionality {X.shape[-1] if X.ndim else None} != {model.band_count}"
        )
    if model.band_mean is not None:
        X = (X - model.band_mean) / model.band_std
    labels, _ = kernels.nearest_centroid(X, model.centroids)
    return labels


def assign_raster(model: KMeansModel, pixels: np.ndarray) -> np.ndarray:
    """Labels for a (bands, H, W) grid, returned as (H, W)."""
    c, h, w = pixels.shape
    return assign(model, pixels.reshape(c, -1).T).reshape(h, w)


def predominant_label(tile_labels, validity=None) -> int:
    """Modal label among valid pixels; ties go to the lowest label."""
    labels = np.asarray(tile_labels).ravel()
    valid = np.ones(labels.shape, bool) if validity is None else np.asarray(validity, bool).ravel()
    if not valid.any():
        raise ClusteringError("tile has no valid pixels")
    counts = np.bincount(labels[valid].astype(np.int64))
    return int(np.argmax(counts))
