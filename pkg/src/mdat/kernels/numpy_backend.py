"""Pure-numpy fallback kernels.

Dense products go through BLAS.  The sparse entry points densify first and
reuse the dense path, which makes sparse/dense bit-identity trivial on this
backend (at the cost of touching every column).
"""

from __future__ import annotations

import numpy as np


def _densify(indptr: np.ndarray, indices: np.ndarray, values: np.ndarray,
             n_rows: int, dim: int) -> np.ndarray:
    X = np.zeros((n_rows, dim), dtype=np.float64)
    for r in range(n_rows):
        lo, hi = indptr[r], indptr[r + 1]
        X[r, indices[lo:hi]] = values[lo:hi]
    return X


def affine_dense(X: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    return X @ W.T + b


def affine_sparse(indptr: np.ndarray, indices: np.ndarray, values: np.ndarray,
                  W: np.ndarray, b: np.ndarray) -> np.ndarray:
    X = _densify(indptr, indices, values, len(indptr) - 1, W.shape[1])
    return affine_dense(X, W, b)


def grad_weights_sparse(dY: np.ndarray, indptr: np.ndarray, indices: np.ndarray,
                        values: np.ndarray, in_dim: int) -> np.ndarray:
    X = _densify(indptr, indices, values, len(indptr) - 1, in_dim)
    return dY.T @ X


def adam_update(params: np.ndarray, grads: np.ndarray, m: np.ndarray,
                v: np.ndarray, t: int, lr: float, beta1: float, beta2: float,
                eps: float) -> None:
    m *= beta1
    m += (1.0 - beta1) * grads
    v *= beta2
    v += (1.0 - beta2) * (grads * grads)
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    params -= lr * mhat / (np.sqrt(vhat) + eps)
