"""Hot pixel kernels with a compiled core and a numpy fallback.

The compiled extension ``_ckernels`` is used when it imports cleanly.
Set ``RELICTNET_KERNELS=python`` to force the numpy fallback.

Kernels
-------
nearest_centroid(X, C)
    Nearest-centroid labels and squared distances.
cluster_sums(X, labels, k)
    Per-cluster coordinate sums and member counts.
confusion_counts(pred, truth, valid)
    Pixel TP/FP/FN/TN over valid pixels.
tile_positive_counts(mask, tile, rows, cols)
    Positive pixels per tile window.
tile_modal_labels(labels, valid, tile, rows, cols, k)
    Modal valid label per tile window (-1 when the tile has no valid pixel).
"""

import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("RELICTNET_KERNELS", "").lower() != "python":
    try:
        from . import _ckernels as _impl  # noqa: F811

        BACKEND = "compiled"
    except ImportError:  # pragma: no cover - depends on build
        _impl = _pykernels


def backends():
    """Available kernel implementations keyed by name."""
    out = {"python": _pykernels}
    try:
        from . import _ckernels

        out["compiled"] = _ckernels
    except ImportError:  # pragma: no cover
        pass
    return out


def nearest_centroid(X, C):
    X = np.ascontiguousarray(X, dtype=np.float64)
    C = np.ascontiguousarray(C, dtype=np.float64)
    return _impl.nearest_centroid(X, C)


def cluster_sums(X, labels, k):
    X = np.ascontiguousarray(X, dtype=np.float64)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    return _impl.cluster_sums(X, labels, int(k))


def confusion_counts(pred, truth, valid):
    return _impl.confusion_counts(_u8(pred), _u8(truth), _u8(valid))


def tile_positive_counts(mask, tile, rows, cols):
    return _impl.tile_positive_counts(_u8(mask), int(tile), int(rows), int(cols))


def tile_modal_labels(labels, valid, tile, rows, cols, k):
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    return _impl.tile_modal_labels(labels, _u8(valid), int(tile), int(rows), int(cols), int(k))


def _u8(a):
    a = np.asarray(a)
    if a.dtype == np.uint8:
        return np.ascontiguousarray(a)
    return np.ascontiguousarray(a != 0, dtype=np.uint8)
