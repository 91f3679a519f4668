"""Dense-array primitives every other module builds on.

Conventions: a RealMatrix is a 2-D float64 ndarray [rows, cols]; a
MultiHeadTensor is a 3-D float64 ndarray [head, token, channel]. All
arithmetic runs in float64; determinism is guaranteed for a fixed seed
on one platform, not bit-identically across platforms.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, MaskError, ParameterError

# Documentation aliases; invariants are asserted where arrays are built.
RealMatrix = np.ndarray
MultiHeadTensor = np.ndarray


def as_matrix(x) -> np.ndarray:
    """Coerce to a 2-D float64 array, rejecting anything else."""
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {m.shape}")
    assert np.isfinite(m).all(), "non-finite values in matrix"
    return m


def matmul(a, b) -> np.ndarray:
    """Standard matrix product with explicit shape checking."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax_rows(m, mask=None) -> np.ndarray:
    """Row-wise stable softmax; `mask` marks entries to exclude (True = masked).

    Masked entries come out exactly 0 and each row sums to 1. A fully
    masked row is an error: there is nothing to normalize over.
    """
    m = as_matrix(m)
    if mask is None:
        z = m - m.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    mask = np.asarray(mask, dtype=bool)
    if mask.shape != m.shape:
        raise DimensionError(f"mask shape {mask.shape} != matrix shape {m.shape}")
    dead = mask.all(axis=1)
    if dead.any():
        raise MaskError(f"fully masked row(s) at {np.flatnonzero(dead).tolist()}")
    neg = np.where(mask, -np.inf, m)
    z = neg - neg.max(axis=1, keepdims=True)
    e = np.exp(z)
    e[mask] = 0.0
    return e / e.sum(axis=1, keepdims=True)


def grouped_mean(m, g: int) -> np.ndarray:
    """Mean of consecutive row groups of size `g`; the last group may be short.

    A short final group is averaged over its actual size (no padding),
    so pooled rows are unbiased. Output has ceil(rows / g) rows.
    """
    if g < 1:
        raise ParameterError(f"group size must be >= 1, got {g}")
    m = as_matrix(m)
    n = m.shape[0]
    if n == 0 or g == 1:
        return m.copy()
    starts = np.arange(0, n, g)
    sums = np.add.reduceat(m, starts, axis=0)
    sizes = np.minimum(starts + g, n) - starts
    return sums / sizes[:, None]


def top_k_indices(scores, k: int) -> np.ndarray:
    """Indices of the k largest values, ascending; ties go to the lower index."""
    v = np.asarray(scores, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionError(f"expected a 1-D score vector, got shape {v.shape}")
    if k > v.shape[0]:
        raise ParameterError(f"k={k} exceeds vector length {v.shape[0]}")
    # Stable argsort of the negated scores keeps equal values in index order.
    order = np.argsort(-v, kind="stable")[:k]
    return np.sort(order)
