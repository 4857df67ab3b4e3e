"""Spectral quantities of small dense matrices.

Everything here works on float64 numpy arrays. The spectral norm is computed by
power iteration on the smaller Gram matrix from fixed start vectors, so results
do not depend on any RNG state.
"""
from __future__ import annotations

import numpy as np

from .errors import DegenerateInputError, InvalidInputError

MAX_ITER = 10_000
RQ_RTOL = 1e-14
VEC_TOL = 1e-13


def as_matrix(a) -> np.ndarray:
    """Coerce to a finite 2-D float64 array (1-D input becomes a single row)."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise InvalidInputError(f"expected a non-empty matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError("matrix has non-finite entries")
    return a


def _start_vectors(n: int):
    ones = np.full(n, 1.0 / np.sqrt(n))
    yield ones
    if n > 1:
        # second fixed start: guards against an all-ones vector orthogonal to the
        # top singular direction (e.g. [[1, -1], [-1, 1]])
        alt = np.cos(np.arange(1, n + 1) * 1.2345 + 0.5)
        yield alt / np.linalg.norm(alt)


def _power(gram: np.ndarray, v: np.ndarray, refine: bool) -> tuple[float, np.ndarray]:
    """Top eigenpair of a PSD matrix. With ``refine`` also wait for the vector."""
    rq = float(v @ gram @ v)
    for _ in range(MAX_ITER):
        w = gram @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0, v
        w /= nw
        rq_new = float(w @ gram @ w)
        step = np.linalg.norm(w - v)
        v = w
        done = abs(rq_new - rq) <= RQ_RTOL * abs(rq_new)
        rq = rq_new
        if done and (not refine or step <= VEC_TOL):
            break
    return max(rq, 0.0), v


def _top_right_pair(a: np.ndarray, refine: bool) -> tuple[float, np.ndarray]:
    """Largest singular value and its right singular vector."""
    # rescale so the Gram matrix neither underflows nor overflows
    scale = float(np.max(np.abs(a)))
    if scale == 0.0:
        return 0.0, np.full(a.shape[1], 1.0 / np.sqrt(a.shape[1]))
    s, v = _top_right_pair_unit(a / scale, refine)
    return s * scale, v


def _top_right_pair_unit(a: np.ndarray, refine: bool) -> tuple[float, np.ndarray]:
    rows, cols = a.shape
    if cols <= rows:
        gram = a.T @ a
        best = max((_power(gram, v0, refine) for v0 in _start_vectors(cols)), key=lambda p: p[0])
        return float(np.sqrt(best[0])), best[1]
    gram = a @ a.T
    lam, u = max((_power(gram, v0, refine) for v0 in _start_vectors(rows)), key=lambda p: p[0])
    s = float(np.sqrt(lam))
    if s == 0.0:
        return 0.0, np.full(cols, 1.0 / np.sqrt(cols))
    v = a.T @ u
    return s, v / np.linalg.norm(v)


def spectral_norm(a) -> float:
    """Largest singular value of ``a``."""
    a = as_matrix(a)
    return _top_right_pair(a, refine=False)[0]


def top2_singular_values(a) -> tuple[float, float]:
    """Two largest singular values; the second by deflating the top singular pair
    out of ``a`` itself (not its Gram matrix, which would square the round-off)."""
    a = as_matrix(a)
    s1, v = _top_right_pair(a, refine=True)
    if min(a.shape) == 1 or s1 == 0.0:
        return s1, 0.0
    deflated = a - np.outer(a @ v, v)
    s2, _ = _top_right_pair(deflated, refine=False)
    return s1, min(s2, s1)


def stable_rank(a) -> tuple[float, float, float]:
    """Return ``(fro, spec, fro / spec)``.

    This is the plain ratio of Frobenius to spectral norm, not its square, so it
    ranges over ``[1, sqrt(min(rows, cols))]``.
    """
    a = as_matrix(a)
    fro = float(np.linalg.norm(a))
    if fro == 0.0:
        raise DegenerateInputError("stable rank of a zero matrix is undefined")
    spec = _top_right_pair(a, refine=False)[0]
    return fro, spec, fro / spec
