"""Hot numeric kernels with a numba backend and a pure-numpy fallback.

The backend is picked once at import time from the ``MDAT_BACKEND``
environment variable:

* ``auto`` (default) - use numba if it imports, else fall back to numpy
* ``numba``          - require numba, raise if unavailable
* ``numpy``          - force the pure-numpy fallback

Both backends expose the same four functions:

* ``affine_dense(X, W, b)``            batched ``X @ W.T + b``
* ``affine_sparse(indptr, idx, val, W, b)``  same op on CSR-encoded rows
* ``grad_weights_sparse(dY, indptr, idx, val, in_dim)``  ``dY.T @ X`` with
  the input rows CSR-encoded
* ``adam_update(p, g, m, v, t, lr, b1, b2, eps)``  fused in-place update

Within one backend, ``affine_sparse`` is bit-identical to ``affine_dense``
on the densified rows.  Across backends results agree only to float
round-off (the numba kernels accumulate sequentially, numpy uses BLAS),
so a single run must stay on a single backend for byte-reproducibility.
"""

from __future__ import annotations

import os

_requested = os.environ.get("MDAT_BACKEND", "auto").strip().lower()
if _requested not in ("auto", "numba", "numpy"):
    raise RuntimeError(
        f"MDAT_BACKEND must be one of auto|numba|numpy, got {_requested!r}"
    )

if _requested in ("auto", "numba"):
    try:
        from . import numba_backend as _impl

        BACKEND = "numba"
    except ImportError:
        if _requested == "numba":
            raise
        from . import numpy_backend as _impl

        BACKEND = "numpy"
else:
    from . import numpy_backend as _impl

    BACKEND = "numpy"

affine_dense = _impl.affine_dense
affine_sparse = _impl.affine_sparse
grad_weights_sparse = _impl.grad_weights_sparse
adam_update = _impl.adam_update

__all__ = [
    "BACKEND",
    "affine_dense",
    "affine_sparse",
    "grad_weights_sparse",
    "adam_update",
]
