"""Hot-loop kernels with a compiled core and a pure-numpy fallback.

The backend is chosen once at import: the Cython extension when it is built,
otherwise the numpy loop below. Set ``NEURON_ALLOC_PURE_PYTHON=1`` to force the
fallback. Both accumulate each output element in ascending inner-index order
without fused multiply-add, so results are bit-identical across backends.
"""
from __future__ import annotations

import os

import numpy as np

try:
    if os.environ.get("NEURON_ALLOC_PURE_PYTHON", "0") == "1":
        raise ImportError("pure-python backend forced")
    from neuron_alloc._kernels import bmm_into as _compiled_bmm_into
except ImportError:
    _compiled_bmm_into = None

BACKEND = "compiled" if _compiled_bmm_into is not None else "python"


def bmm_python(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Reference batched matmul: (P, n, k) @ (P, k, m), fixed k order."""
    out = np.zeros(a.shape[:2] + (b.shape[2],), dtype=a.dtype)
    for k in range(a.shape[2]):
        out += a[:, :, k, None] * b[:, None, k, :]
    return out


def bmm_compiled(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if _compiled_bmm_into is None:
        raise RuntimeError("compiled kernels are not built")
    out = np.empty(a.shape[:2] + (b.shape[2],), dtype=a.dtype)
    _compiled_bmm_into(np.ascontiguousarray(a), np.ascontiguousarray(b), out)
    return out


def bmm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.dtype != b.dtype:
        raise TypeError(f"bmm: dtype mismatch {a.dtype} vs {b.dtype}")
    if a.dtype not in (np.float32, np.float64):
        raise TypeError(f"bmm: unsupported dtype {a.dtype}")
    if _compiled_bmm_into is not None:
        return bmm_compiled(a, b)
    return bmm_python(a, b)
