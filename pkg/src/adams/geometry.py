"""Vector helpers: norms, cosine similarity and its gradient."""

from __future__ import annotations

import numpy as np

ZERO_NORM = 1e-12


class ZeroNormError(ValueError):
    """Raised when a vector is too close to zero to be normalized."""


def as_vector(a) -> np.ndarray:
    v = np.asarray(a, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError(f"expected a non-empty 1-d vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector has non-finite entries")
    return v


def _check_pair(a, b) -> tuple[np.ndarray, np.ndarray, float, float]:
    a = as_vector(a)
    b = as_vector(b)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.size} vs {b.size}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na < ZERO_NORM or nb < ZERO_NORM:
        raise ZeroNormError("cosine similarity of a zero-norm vector")
    return a, b, na, nb


def l2_normalize(v) -> np.ndarray:
    v = as_vector(v)
    n = float(np.linalg.norm(v))
    if n < ZERO_NORM:
        raise ZeroNormError("cannot normalize a zero-norm vector")
    return v / n


def normalize_rows(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise L2 normalization. Returns (unit rows, norms)."""
    norms = np.linalg.norm(m, axis=1)
    if np.any(norms < ZERO_NORM):
        raise ZeroNormError("cannot normalize a zero-norm row")
    return m / norms[:, None], norms


def cosine_similarity(a, b) -> float:
    a, b, na, nb = _check_pair(a, b)
    return float(np.dot(a, b) / (na * nb))


def cosine_similarity_grad(a, b) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of cos(a, b) with respect to ``a`` and ``b``."""
    a, b, na, nb = _check_pair(a, b)
    s = np.dot(a, b) / (na * nb)
    da = b / (na * nb) - s * a / na**2
    db = a / (na * nb) - s * b / nb**2
    return da, db


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """All-pairs cosine similarity between the rows of ``a`` and ``b``."""
    ua, _ = normalize_rows(np.asarray(a, dtype=np.float64))
    ub, _ = normalize_rows(np.asarray(b, dtype=np.float64))
    return ua @ ub.T
