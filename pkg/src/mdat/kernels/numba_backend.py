"""Numba-jitted kernels.

``affine_dense`` accumulates over input features in ascending index order
starting from the bias, and ``affine_sparse`` walks the stored indices in
the same order, so skipping the zero entries never changes the rounding
sequence: sparse and densified inputs produce bit-identical outputs.

``grad_weights_sparse`` scatters only into the active columns, which is the
main win over the fallback on wide vocabularies.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def affine_dense(X: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    n_rows = X.shape[0]
    n_out, n_in = W.shape
    Y = np.empty((n_rows, n_out), dtype=np.float64)
    for r in range(n_rows):
        for o in range(n_out):
            s = b[o]
            for j in range(n_in):
                s += X[r, j] * W[o, j]
            Y[r, o] = s
    return Y


@njit(cache=True)
def affine_sparse(indptr: np.ndarray, indices: np.ndarray, values: np.ndarray,
                  W: np.ndarray, b: np.ndarray) -> np.ndarray:
    n_rows = indptr.shape[0] - 1
    n_out = W.shape[0]
    Y = np.empty((n_rows, n_out), dtype=np.float64)
    # weight row stays hot across the batch
    for o in range(n_out):
        for r in range(n_rows):
            s = b[o]
            for p in range(indptr[r], indptr[r + 1]):
                s += values[p] * W[o, indices[p]]
            Y[r, o] = s
    return Y


@njit(cache=True)
def grad_weights_sparse(dY: np.ndarray, indptr: np.ndarray, indices: np.ndarray,
                        values: np.ndarray, in_dim: int) -> np.ndarray:
    n_rows, n_out = dY.shape
    dW = np.zeros((n_out, in_dim), dtype=np.float64)
    for o in range(n_out):
        for r in range(n_rows):
            g = dY[r, o]
            if g != 0.0:
                for p in range(indptr[r], indptr[r + 1]):
                    dW[o, indices[p]] += g * values[p]
    return dW


@njit(cache=True)
def adam_update(params: np.ndarray, grads: np.ndarray, m: np.ndarray,
                v: np.ndarray, t: int, lr: float, beta1: float, beta2: float,
                eps: float) -> None:
    # same per-element arithmetic order as the numpy fallback
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for i in range(params.shape[0]):
        g = grads[i]
        m[i] = beta1 * m[i] + (1.0 - beta1) * g
        v[i] = beta2 * v[i] + (1.0 - beta2) * (g * g)
        mhat = m[i] / c1
        vhat = v[i] / c2
        params[i] -= lr * mhat / (np.sqrt(vhat) + eps)
