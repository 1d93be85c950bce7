"""Kernel dispatch.

The compiled extension is used when it imports; setting ``BEAT_PURE_PYTHON=1``
forces the numpy fallback. ``BACKEND`` names the active implementation.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import _pykernels

if os.environ.get("BEAT_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels
        BACKEND = "python"


def _rows(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64)


def nearest(x, codebook) -> tuple[np.ndarray, np.ndarray]:
    """Index and squared distance of the closest codebook row for every row of ``x``."""
    x = _rows(x)
    codebook = _rows(codebook)
    if codebook.shape[0] == 0:
        raise ValueError("nearest: empty codebook")
    if x.ndim != 2 or codebook.ndim != 2 or x.shape[1] != codebook.shape[1]:
        raise ValueError(f"nearest: shape mismatch {x.shape} vs {codebook.shape}")
    return _impl.nearest(x, codebook)


def index_add(n_rows: int, index, rows) -> np.ndarray:
    """Scatter-add ``rows[k]`` into row ``index[k]`` of a zero (n_rows, m) array."""
    index = np.ascontiguousarray(index, dtype=np.int64)
    return _impl.index_add(int(n_rows), index, _rows(rows))


@dataclass(frozen=True)
class CSR:
    """Constant square-or-rectangular sparse matrix in compressed-row form."""

    shape: tuple[int, int]
    indptr: np.ndarray
    indices: np.ndarray
    values: np.ndarray

    @classmethod
    def from_coo(cls, shape, rows, cols, values) -> "CSR":
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        order = np.lexsort((cols, rows))
        rows, cols, values = rows[order], cols[order], values[order]
        indptr = np.zeros(shape[0] + 1, dtype=np.int64)
        np.add.at(indptr, rows + 1, 1)
        np.cumsum(indptr, out=indptr)
        return cls((int(shape[0]), int(shape[1])), indptr, cols, values)

    def transpose(self) -> "CSR":
        rows = np.repeat(np.arange(self.shape[0], dtype=np.int64), np.diff(self.indptr))
        return CSR.from_coo((self.shape[1], self.shape[0]), self.indices, rows, self.values)

    def matmul(self, x) -> np.ndarray:
        x = _rows(x)
        if x.ndim != 2 or x.shape[0] != self.shape[1]:
            raise ValueError(f"csr_matmul: shape mismatch {self.shape} vs {x.shape}")
        return _impl.csr_matmul(self.indptr, self.indices, self.values, x)

    def todense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        rows = np.repeat(np.arange(self.shape[0]), np.diff(self.indptr))
        np.add.at(out, (rows, self.indices), self.values)
        return out
