"""Deterministic float64 primitives: sparse vectors, affine maps, a
splittable counter-based RNG, the Adam update, softmax and dropout masks.

Everything here is a pure function of explicit state; there is no hidden
global RNG.  Heavy inner loops are delegated to :mod:`mdat.kernels`.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError, NonFiniteError, ShapeError


# ---------------------------------------------------------------------------
# sparse containers

class SparseVector:
    """Bag-of-features sample: strictly increasing indices, counts >= 0."""

    __slots__ = ("dim", "indices", "values")

    def __init__(self, dim: int, indices, values, *, validate: bool = True):
        self.dim = int(dim)
        self.indices = np.asarray(indices, dtype=np.int64)
        self.values = np.asarray(values, dtype=np.float64)
        if validate:
            self._check()

    def _check(self) -> None:
        if self.indices.shape != self.values.shape or self.indices.ndim != 1:
            raise ShapeError("indices and values must be matching 1-D arrays")
        if self.indices.size:
            if np.any(np.diff(self.indices) <= 0):
                raise ValueError("sparse indices must be strictly increasing")
            if self.indices[0] < 0 or self.indices[-1] >= self.dim:
                raise ValueError(
                    f"sparse index out of range [0, {self.dim})"
                )
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise ValueError("sparse values must be finite and >= 0")

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def densify(self) -> np.ndarray:
        x = np.zeros(self.dim, dtype=np.float64)
        x[self.indices] = self.values
        return x

    @classmethod
    def from_dense(cls, x: np.ndarray) -> "SparseVector":
        x = np.asarray(x, dtype=np.float64)
        idx = np.nonzero(x)[0]
        return cls(x.size, idx, x[idx])

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, SparseVector)
            and self.dim == other.dim
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.values, other.values)
        )

    def __repr__(self) -> str:
        return f"SparseVector(dim={self.dim}, nnz={self.nnz})"


class SparseBatch:
    """CSR-encoded stack of SparseVectors sharing one dimension."""

    __slots__ = ("dim", "indptr", "indices", "values")

    def __init__(self, dim: int, indptr, indices, values):
        self.dim = int(dim)
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.indices = np.asarray(indices, dtype=np.int64)
        self.values = np.asarray(values, dtype=np.float64)

    @classmethod
    def from_vectors(cls, vecs: list[SparseVector]) -> "SparseBatch":
        if not vecs:
            raise ShapeError("cannot batch zero vectors")
        dim = vecs[0].dim
        for v in vecs:
            if v.dim != dim:
                raise ShapeError("all vectors in a batch must share dim")
        indptr = np.zeros(len(vecs) + 1, dtype=np.int64)
        indptr[1:] = np.cumsum([v.nnz for v in vecs])
        indices = (
            np.concatenate([v.indices for v in vecs])
            if indptr[-1] else np.zeros(0, dtype=np.int64)
        )
        values = (
            np.concatenate([v.values for v in vecs])
            if indptr[-1] else np.zeros(0, dtype=np.float64)
        )
        return cls(dim, indptr, indices, values)

    @property
    def n_rows(self) -> int:
        return int(self.indptr.size - 1)

    def densify(self) -> np.ndarray:
        X = np.zeros((self.n_rows, self.dim), dtype=np.float64)
        for r in range(self.n_rows):
            lo, hi = self.indptr[r], self.indptr[r + 1]
            X[r, self.indices[lo:hi]] = self.values[lo:hi]
        return X


# ---------------------------------------------------------------------------
# RNG

def _label_key(label: str) -> tuple[int, ...]:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return tuple(int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4))


@dataclass
class RngState:
    """Splittable counter-based generator (Philox under the hood).

    Child streams are derived from (seed, label) only, so the draws of one
    stream never depend on how much another stream has consumed.
    """

    seed: int
    _path: tuple[int, ...] = ()
    _gen: np.random.Generator | None = field(default=None, repr=False)

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self._path)
            self._gen = np.random.Generator(np.random.Philox(ss))
        return self._gen

    def child(self, label: str) -> "RngState":
        return RngState(self.seed, self._path + _label_key(label))

    # convenience pass-throughs
    def integers(self, *a, **kw):
        return self.generator.integers(*a, **kw)

    def random(self, *a, **kw):
        return self.generator.random(*a, **kw)

    def standard_normal(self, *a, **kw):
        return self.generator.standard_normal(*a, **kw)

    def uniform(self, *a, **kw):
        return self.generator.uniform(*a, **kw)

    def permutation(self, *a, **kw):
        return self.generator.permutation(*a, **kw)

    def choice(self, *a, **kw):
        return self.generator.choice(*a, **kw)


# ---------------------------------------------------------------------------
# affine maps

def _as_matrix(W: np.ndarray) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise ShapeError("weight matrix must be 2-D")
    return W


def affine_forward(W: np.ndarray, b: np.ndarray, x) -> np.ndarray:
    """W @ x + b for a single dense or sparse vector.

    The sparse path is bit-identical to running the densified vector
    through the same backend.
    """
    W = _as_matrix(W)
    b = np.asarray(b, dtype=np.float64)
    if b.shape != (W.shape[0],):
        raise ShapeError(f"bias shape {b.shape} does not match {W.shape[0]} rows")
    if isinstance(x, SparseVector):
        if x.dim != W.shape[1]:
            raise ShapeError(f"input dim {x.dim} != weight cols {W.shape[1]}")
        indptr = np.array([0, x.nnz], dtype=np.int64)
        return kernels.affine_sparse(indptr, x.indices, x.values, W, b)[0]
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (W.shape[1],):
        raise ShapeError(f"input shape {x.shape} != weight cols {W.shape[1]}")
    return kernels.affine_dense(x[None, :], W, b)[0]


def affine_forward_batch(W: np.ndarray, b: np.ndarray, X) -> np.ndarray:
    """Batched affine map; X is a dense (n, in) array or a SparseBatch."""
    W = _as_matrix(W)
    b = np.asarray(b, dtype=np.float64)
    if isinstance(X, SparseBatch):
        if X.dim != W.shape[1]:
            raise ShapeError(f"input dim {X.dim} != weight cols {W.shape[1]}")
        return kernels.affine_sparse(X.indptr, X.indices, X.values, W, b)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != W.shape[1]:
        raise ShapeError(f"input shape {X.shape} != (*, {W.shape[1]})")
    return kernels.affine_dense(X, W, b)


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    """Per-parameter moments for one flat float64 parameter vector."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, n: int, *, lr: float = 1e-4, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, lr, beta1, beta2, eps)

    def clone(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.t,
                         self.lr, self.beta1, self.beta2, self.eps)


def adam_step(params: np.ndarray, grads: np.ndarray,
              state: AdamState) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update, in place on params and state."""
    params = np.asarray(params)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.ndim != 1:
        raise ShapeError("params and grads must be matching 1-D arrays")
    if params.shape != state.m.shape:
        raise ShapeError("state moments do not match parameter shape")
    if not np.all(np.isfinite(grads)):
        bad = int(np.flatnonzero(~np.isfinite(grads))[0])
        raise NonFiniteError(f"non-finite gradient at parameter index {bad}")
    state.t += 1
    kernels.adam_update(params, grads, state.m, state.v, state.t,
                        state.lr, state.beta1, state.beta2, state.eps)
    return params, state


# ---------------------------------------------------------------------------
# softmax / dropout

def softmax(logits: np.ndarray) -> np.ndarray:
    """Max-shifted softmax over the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NonFiniteError("softmax requires finite logits")
    shifted = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def bernoulli_mask(rng: RngState, n: int, keep_prob: float) -> np.ndarray:
    """Inverted-dropout mask: entries are 0 or 1/keep_prob, expectation 1."""
    if not 0.0 < keep_prob <= 1.0:
        raise ConfigError(f"keep_prob must be in (0, 1], got {keep_prob}")
    if keep_prob == 1.0:
        return np.ones(n, dtype=np.float64)
    keep = rng.random(n) < keep_prob
    return keep.astype(np.float64) / keep_prob
