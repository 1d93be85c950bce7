"""Numpy implementations of the compiled kernels (used when the extension is absent)."""
import numpy as np

_CHUNK = 4096


def nearest(x, codebook):
    n = x.shape[0]
    idx = np.empty(n, dtype=np.int64)
    dist = np.empty(n, dtype=np.float64)
    for start in range(0, n, _CHUNK):
        block = x[start:start + _CHUNK]
        d = ((block[:, None, :] - codebook[None, :, :]) ** 2).sum(axis=2)
        # argmin returns the first occurrence, i.e. the lowest index on ties
        k = d.argmin(axis=1)
        idx[start:start + _CHUNK] = k
        dist[start:start + _CHUNK] = d[np.arange(len(k)), k]
    return idx, dist


def csr_matmul(indptr, indices, values, x):
    n = indptr.shape[0] - 1
    out = np.zeros((n, x.shape[1]), dtype=np.float64)
    if indices.size == 0:
        return out
    rows = np.repeat(np.arange(n), np.diff(indptr))
    np.add.at(out, rows, values[:, None] * x[indices])
    return out


def index_add(n_rows, index, rows):
    out = np.zeros((n_rows, rows.shape[1]), dtype=np.float64)
    np.add.at(out, index, rows)
    return out
