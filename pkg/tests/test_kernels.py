"""Backend contract: sparse/dense bit-identity within a backend, and
numerical agreement between the numba kernels and the numpy fallback."""

import numpy as np
import pytest

from mdat import kernels
from mdat.kernels import numpy_backend

try:
    from mdat.kernels import numba_backend
    HAVE_NUMBA = True
except ImportError:
    numba_backend = None
    HAVE_NUMBA = False

BACKENDS = [numpy_backend] + ([numba_backend] if HAVE_NUMBA else [])


def random_csr(rng, n_rows, dim, nnz):
    indptr = np.arange(0, (n_rows + 1) * nnz, nnz, dtype=np.int64)
    indices = np.concatenate([
        np.sort(rng.choice(dim, size=nnz, replace=False)) for _ in range(n_rows)
    ]).astype(np.int64)
    values = rng.integers(0, 6, size=n_rows * nnz).astype(np.float64)
    return indptr, indices, values


def densify(indptr, indices, values, n_rows, dim):
    X = np.zeros((n_rows, dim))
    for r in range(n_rows):
        lo, hi = indptr[r], indptr[r + 1]
        X[r, indices[lo:hi]] = values[lo:hi]
    return X


@pytest.mark.parametrize("impl", BACKENDS, ids=lambda m: m.__name__.split(".")[-1])
def test_sparse_dense_bit_identity(impl):
    rng = np.random.default_rng(0)
    indptr, indices, values, = random_csr(rng, 5, 40, 7)
    W = rng.standard_normal((9, 40))
    b = rng.standard_normal(9)
    X = densify(indptr, indices, values, 5, 40)
    Y_sparse = impl.affine_sparse(indptr, indices, values, W, b)
    Y_dense = impl.affine_dense(X, W, b)
    assert np.array_equal(Y_sparse, Y_dense)


@pytest.mark.skipif(not HAVE_NUMBA, reason="numba unavailable")
def test_backends_agree_on_affine():
    rng = np.random.default_rng(1)
    indptr, indices, values = random_csr(rng, 6, 50, 8)
    W = rng.standard_normal((11, 50))
    b = rng.standard_normal(11)
    a = numpy_backend.affine_sparse(indptr, indices, values, W, b)
    c = numba_backend.affine_sparse(indptr, indices, values, W, b)
    np.testing.assert_allclose(a, c, rtol=1e-13, atol=1e-13)


@pytest.mark.skipif(not HAVE_NUMBA, reason="numba unavailable")
def test_backends_agree_on_grad_weights():
    rng = np.random.default_rng(2)
    indptr, indices, values = random_csr(rng, 6, 30, 5)
    dY = rng.standard_normal((6, 7))
    a = numpy_backend.grad_weights_sparse(dY, indptr, indices, values, 30)
    c = numba_backend.grad_weights_sparse(dY, indptr, indices, values, 30)
    np.testing.assert_allclose(a, c, rtol=1e-13, atol=1e-13)


@pytest.mark.skipif(not HAVE_NUMBA, reason="numba unavailable")
def test_backends_agree_on_adam_bitwise():
    rng = np.random.default_rng(3)
    n = 257
    p0 = rng.standard_normal(n)
    g = rng.standard_normal(n)
    states = []
    for impl in (numpy_backend, numba_backend):
        p = p0.copy()
        m = np.zeros(n)
        v = np.zeros(n)
        for t in range(1, 4):
            impl.adam_update(p, g, m, v, t, 1e-3, 0.9, 0.999, 1e-8)
        states.append((p, m, v))
    for a, c in zip(states[0], states[1]):
        assert np.array_equal(a, c)


def test_active_backend_exposed():
    assert kernels.BACKEND in ("numba", "numpy")
    Y = kernels.affine_dense(np.ones((1, 3)), np.eye(3), np.zeros(3))
    np.testing.assert_array_equal(Y, np.ones((1, 3)))
