"""Pure numpy implementations of the pixel kernels.

Used when the compiled extension is unavailable, or when
``RELICTNET_KERNELS=python`` is set. Results are bit-identical to the
compiled versions.
"""

import numpy as np

_CHUNK = 1 << 16


def nearest_centroid(X, C):
    """Index of the nearest centroid (squared Euclidean, lowest index on ties)."""
    n = X.shape[0]
    labels = np.empty(n, dtype=np.int64)
    d2 = np.empty(n, dtype=np.float64)
    for start in range(0, n, _CHUNK):
        block = X[start:start + _CHUNK]
        dist = np.zeros((block.shape[0], C.shape[0]), dtype=np.float64)
        # accumulate band by band so the summation order matches the C loop
        for b in range(X.shape[1]):
            diff = block[:, b, None] - C[None, :, b]
            dist += diff * diff
        arg = np.argmin(dist, axis=1)
        labels[start:start + _CHUNK] = arg
        d2[start:start + _CHUNK] = dist[np.arange(block.shape[0]), arg]
    return labels, d2


def cluster_sums(X, labels, k):
    counts = np.bincount(labels, minlength=k).astype(np.int64)
    sums = np.zeros((k, X.shape[1]), dtype=np.float64)
    np.add.at(sums, labels, X)
    return sums, counts


def confusion_counts(pred, truth, valid):
    v = valid.astype(bool)
    p = pred.astype(bool) & v
    t = truth.astype(bool) & v
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    tn = int(np.count_nonzero(v)) - tp - fp - fn
    return tp, fp, fn, tn


def _pad_to(arr, rows, cols, tile, fill):
    h, w = arr.shape
    out = np.full((rows * tile, cols * tile), fill, dtype=arr.dtype)
    hh, ww = min(h, rows * tile), min(w, cols * tile)
    out[:hh, :ww] = arr[:hh, :ww]
    return out


def tile_positive_counts(mask, tile, rows, cols):
    m = _pad_to(mask.astype(np.int64) != 0, rows, cols, tile, False)
    return m.reshape(rows, tile, cols, tile).sum(axis=(1, 3)).astype(np.int64)


def tile_modal_labels(labels, valid, tile, rows, cols, k):
    lab = _pad_to(labels.astype(np.int64), rows, cols, tile, 0)
    val = _pad_to(valid.astype(bool), rows, cols, tile, False)
    lab = lab.reshape(rows, tile, cols, tile).transpose(0, 2, 1, 3).reshape(rows * cols, -1)
    val = val.reshape(rows, tile, cols, tile).transpose(0, 2, 1, 3).reshape(rows * cols, -1)
    counts = np.zeros((rows * cols, k), dtype=np.int64)
    idx = np.nonzero(val)
    np.add.at(counts, (idx[0], lab[idx]), 1)
    out = np.argmax(counts, axis=1).astype(np.int64)
    out[counts.sum(axis=1) == 0] = -1
    return out.reshape(rows, cols)
