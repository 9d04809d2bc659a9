# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled pixel kernels. Semantics mirror ``_pykernels`` exactly."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def nearest_centroid(const double[:, ::1] X, const double[:, ::1] C):
    cdef Py_ssize_t n = X.shape[0], d = X.shape[1], k = C.shape[0]
    cdef Py_ssize_t i, j, b
    cdef double best, dist, diff
    cdef Py_ssize_t arg
    labels_arr = np.empty(n, dtype=np.int64)
    d2_arr = np.empty(n, dtype=np.float64)
    cdef cnp.int64_t[::1] labels = labels_arr
    cdef double[::1] d2 = d2_arr
    with nogil:
        for i in range(n):
            best = 0.0
            arg = 0
            for j in range(k):
                dist = 0.0
                for b in range(d):
                    diff = X[i, b] - C[j, b]
                    dist = dist + diff * diff
                if j == 0 or dist < best:
                    best = dist
                    arg = j
            labels[i] = arg
            d2[i] = best
    return labels_arr, d2_arr


def cluster_sums(const double[:, ::1] X, const cnp.int64_t[::1] labels, Py_ssize_t k):
    cdef Py_ssize_t n = X.shape[0], d = X.shape[1]
    cdef Py_ssize_t i, b, lab
    sums_arr = np.zeros((k, d), dtype=np.float64)
    counts_arr = np.zeros(k, dtype=np.int64)
    cdef double[:, ::1] sums = sums_arr
    cdef cnp.int64_t[::1] counts = counts_arr
    with nogil:
        for i in range(n):
            lab = labels[i]
            counts[lab] += 1
            for b in range(d):
                sums[lab, b] += X[i, b]
    return sums_arr, counts_arr


def confusion_counts(const cnp.uint8_t[:, ::1] pred,
                     const cnp.uint8_t[:, ::1] truth,
                     const cnp.uint8_t[:, ::1] valid):
    cdef Py_ssize_t h = pred.shape[0], w = pred.shape[1]
    cdef Py_ssize_t y, x
    cdef long long tp = 0, np_ = 0, nt = 0, nv = 0
    cdef unsigned char v, p, t
    # branchless: random masks defeat the branch predictor
    with nogil:
        for y in range(h):
            for x in range(w):
                v = valid[y, x] != 0
                p = v & (pred[y, x] != 0)
                t = v & (truth[y, x] != 0)
                tp += p & t
                np_ += p
                nt += t
                nv += v
    cdef long long fp = np_ - tp, fn = nt - tp, tn = nv - tp - fp - fn
    return int(tp), int(fp), int(fn), int(tn)


def tile_positive_counts(const cnp.uint8_t[:, ::1] mask, Py_ssize_t tile,
                         Py_ssize_t rows, Py_ssize_t cols):
    cdef Py_ssize_t h = mask.shape[0], w = mask.shape[1]
    cdef Py_ssize_t y, x, ymax, xmax
    out_arr = np.zeros((rows, cols), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] out = out_arr
    ymax = rows * tile if rows * tile < h else h
    xmax = cols * tile if cols * tile < w else w
    cdef Py_ssize_t r, c, x1
    cdef cnp.int64_t acc
    with nogil:
        for y in range(ymax):
            r = y // tile
            for c in range(cols):
                x1 = (c + 1) * tile if (c + 1) * tile < xmax else xmax
                acc = 0
                for x in range(c * tile, x1):
                    acc += mask[y, x] != 0
                out[r, c] += acc
    return out_arr


def tile_modal_labels(const cnp.int64_t[:, ::1] labels,
                      const cnp.uint8_t[:, ::1] valid,
                      Py_ssize_t tile, Py_ssize_t rows, Py_ssize_t cols,
                      Py_ssize_t k):
    cdef Py_ssize_t h = labels.shape[0], w = labels.shape[1]
    cdef Py_ssize_t r, c, y, x, y1, x1, j, best, lab
    cdef cnp.int64_t bestcount
    counts_arr = np.zeros(k, dtype=np.int64)
    out_arr = np.full((rows, cols), -1, dtype=np.int64)
    cdef cnp.int64_t[::1] counts = counts_arr
    cdef cnp.int64_t[:, ::1] out = out_arr
    with nogil:
        for r in range(rows):
            y1 = (r + 1) * tile if (r + 1) * tile < h else h
            for c in range(cols):
                x1 = (c + 1) * tile if (c + 1) * tile < w else w
                for j in range(k):
                    counts[j] = 0
                for y in range(r * tile, y1):
                    for x in range(c * tile, x1):
                        if valid[y, x]:
                            lab = labels[y, x]
                            counts[lab] += 1
                best = -1
                bestcount = 0
                for j in range(k):
                    if counts[j] > bestcount:
                        bestcount = counts[j]
                        best = j
                out[r, c] = best
    return out_arr
