import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from beat import _pykernels, kernels
from beat.kernels import CSR

try:
    from beat import _ckernels
except ImportError:  # pragma: no cover - build without compiler
    _ckernels = None

needs_ext = pytest.mark.skipif(_ckernels is None, reason="compiled extension not built")


def brute_nearest(x, code):
    out = []
    for row in x:
        best, best_d = 0, np.inf
        for k, c in enumerate(code):
            d = float(((row - c) ** 2).sum())
            if d < best_d:
                best, best_d = k, d
        out.append(best)
    return np.asarray(out)


def test_backend_names_an_implementation():
    assert kernels.BACKEND in ("cython", "python")


def test_pure_python_env_forces_fallback():
    env = dict(os.environ, BEAT_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import beat; print(beat.BACKEND)"], env=env,
                         capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


@needs_ext
@given(arrays(np.float64, (7, 3), elements=st.floats(-5, 5)), arrays(np.float64, (5, 3), elements=st.floats(-5, 5)))
def test_nearest_backends_agree(x, code):
    a_idx, a_d = _pykernels.nearest(x, code)
    b_idx, b_d = _ckernels.nearest(x, code)
    assert np.array_equal(a_idx, b_idx)
    assert np.allclose(a_d, b_d, rtol=1e-12, atol=1e-12)


@needs_ext
def test_csr_and_index_add_backends_agree(rng):
    dense = rng.standard_normal((6, 5)) * (rng.random((6, 5)) < 0.4)
    r, c = np.nonzero(dense)
    m = CSR.from_coo((6, 5), r, c, dense[r, c])
    x = rng.standard_normal((5, 3))
    assert np.allclose(_pykernels.csr_matmul(m.indptr, m.indices, m.values, x),
                       _ckernels.csr_matmul(m.indptr, m.indices, m.values, x), atol=1e-13)
    idx = rng.integers(0, 4, 10).astype(np.int64)
    rows = rng.standard_normal((10, 3))
    assert np.allclose(_pykernels.index_add(4, idx, rows), _ckernels.index_add(4, idx, rows), atol=1e-13)


def test_nearest_matches_linear_scan(rng):
    x = rng.standard_normal((50, 4))
    code = rng.standard_normal((9, 4))
    assert np.array_equal(kernels.nearest(x, code)[0], brute_nearest(x, code))


def test_nearest_ties_pick_lowest_index():
    code = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    idx, _ = kernels.nearest(np.array([[1.0, 0.0], [0.5, 0.5]]), code)
    assert idx.tolist() == [0, 0]


def test_nearest_rejects_empty_and_mismatch():
    with pytest.raises(ValueError, match="empty"):
        kernels.nearest(np.zeros((1, 2)), np.zeros((0, 2)))
    with pytest.raises(ValueError, match="mismatch"):
        kernels.nearest(np.zeros((1, 2)), np.zeros((3, 4)))


def test_csr_roundtrip_and_transpose(rng):
    dense = rng.standard_normal((4, 6)) * (rng.random((4, 6)) < 0.5)
    r, c = np.nonzero(dense)
    m = CSR.from_coo(dense.shape, r, c, dense[r, c])
    assert np.array_equal(m.todense(), dense)
    assert np.array_equal(m.transpose().todense(), dense.T)
    x = rng.standard_normal((6, 2))
    assert np.allclose(m.matmul(x), dense @ x, atol=1e-13)
