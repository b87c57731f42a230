"""Backend selection for the Bellman backup hot loops.

Automatic selection routes dense kernels to numpy (the contraction is a BLAS
matmul there, which the hand-written loop cannot beat) and sparse kernels to
the compiled extension when it is importable; ``benchmarks/backend_bench.py``
shows the crossover. ``set_backend`` forces one backend explicitly (used by
the benchmark and the backend-equivalence tests).
"""

from __future__ import annotations

import numpy as np

from sgsynth._kernels import _numpy_backend

try:
    from sgsynth._kernels import _core  # compiled extension, optional

    _HAVE_CORE = True
except ImportError:
    _core = None
    _HAVE_CORE = False

_FORCED: str | None = None


def available_backends() -> tuple[str, ...]:
    return ("compiled", "numpy") if _HAVE_CORE else ("numpy",)


def set_backend(name: str | None):
    """Force 'compiled' or 'numpy'; None restores automatic selection."""
    global _FORCED
    if name is not None and name not in ("compiled", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "compiled" and not _HAVE_CORE:
        raise RuntimeError("compiled backend requested but the extension is not built")
    _FORCED = name


def active_backend(kind: str = "sparse") -> str:
    if _FORCED is not None:
        return _FORCED
    if kind == "dense":
        return "numpy"
    return "compiled" if _HAVE_CORE else "numpy"


def bellman_backup_dense(t_matrix, v, n_states, n_u, n_w, maximize_u):
    t_matrix = np.ascontiguousarray(t_matrix, dtype=np.float64)
    v = np.ascontiguousarray(v, dtype=np.float64)
    if active_backend("dense") == "compiled":
        return _core.backup_dense(t_matrix, v, n_states, n_u, n_w, maximize_u)
    return _numpy_backend.backup_dense(t_matrix, v, n_states, n_u, n_w, maximize_u)


def bellman_backup_sparse(indptr, indices, data, truncated, trunc_value, v, n_states, n_u, n_w, maximize_u):
    indptr = np.ascontiguousarray(indptr, dtype=np.int64)
    indices = np.ascontiguousarray(indices, dtype=np.int64)
    data = np.ascontiguousarray(data, dtype=np.float64)
    truncated = np.ascontiguousarray(truncated, dtype=np.float64)
    v = np.ascontiguousarray(v, dtype=np.float64)
    if active_backend("sparse") == "compiled":
        return _core.backup_sparse(indptr, indices, data, truncated, trunc_value, v, n_states, n_u, n_w, maximize_u)
    return _numpy_backend.backup_sparse(indptr, indices, data, truncated, trunc_value, v, n_states, n_u, n_w, maximize_u)
