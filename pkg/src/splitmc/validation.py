"""Input validation helpers shared by the estimators and the dense engine."""

from __future__ import annotations

import numpy as np
from sklearn.utils import check_array

from .errors import GeneratorError, StochasticMatrixError

GENERATOR_ATOL = 1e-12
STOCHASTIC_ATOL = 1e-10
NEGATIVE_TOL = 1e-12


def check_square_matrix(a, name="matrix"):
    a = check_array(a, dtype=np.float64, ensure_all_finite=True, copy=True,
                    ensure_min_samples=1, ensure_min_features=1)
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"{name} must be square, got shape {a.shape}")
    return a


def check_generator_matrix(a, atol=GENERATOR_ATOL):
    """Return ``a`` as a float array after checking it is a rate matrix.

    Off-diagonal entries must be non-negative and every row must sum to zero
    within ``atol`` scaled by the largest entry of the row (rates of order
    one are held to ``atol`` absolutely).
    """
    a = check_square_matrix(a, "generator")
    off = a - np.diag(np.diag(a))
    if np.any(off < 0):
        i, j = np.argwhere(off < 0)[0]
        raise GeneratorError(f"negative off-diagonal rate at ({i}, {j}): {a[i, j]}")
    scale = np.maximum(1.0, np.abs(a).max(axis=1))
    bad = np.abs(a.sum(axis=1)) > atol * scale
    if np.any(bad):
        i = int(np.argmax(bad))
        raise GeneratorError(f"row {i} sums to {a[i].sum():.3e}, expected 0")
    return a


def check_stochastic_matrix(a, atol=STOCHASTIC_ATOL):
    """Validate a row-stochastic matrix, clamping round-off negatives.

    Entries in ``[-1e-12, 0)`` are set to zero and the affected rows are
    renormalised; anything more negative is an error.
    """
    a = check_square_matrix(a, "transition matrix")
    if np.any(a < -NEGATIVE_TOL):
        i, j = np.argwhere(a < -NEGATIVE_TOL)[0]
        raise StochasticMatrixError(f"negative probability at ({i}, {j}): {a[i, j]}")
    neg = a < 0
    if np.any(neg):
        rows = np.unique(np.nonzero(neg)[0])
        a[neg] = 0.0
        a[rows] /= a[rows].sum(axis=1, keepdims=True)
    bad = np.abs(a.sum(axis=1) - 1.0) > atol
    if np.any(bad):
        i = int(np.argmax(bad))
        raise StochasticMatrixError(f"row {i} sums to {a[i].sum()!r}, expected 1")
    return a


def check_distribution(v, n=None, name="distribution", atol=1e-10):
    v = np.asarray(v, dtype=np.float64).ravel().copy()
    if n is not None and v.size != n:
        raise ValueError(f"{name} has length {v.size}, expected {n}")
    if np.any(v < 0) or not np.isfinite(v).all():
        raise ValueError(f"{name} must be non-negative and finite")
    if abs(v.sum() - 1.0) > atol:
        raise ValueError(f"{name} sums to {v.sum()!r}, expected 1")
    return v


def check_timestep(dt, upper=1.0, name="dt"):
    dt = float(dt)
    if not (0.0 < dt <= upper):
        raise ValueError(f"{name} must lie in (0, {upper}], got {dt}")
    return dt


def check_configurations(X, n_sites):
    """Validate a batch of lattice configurations, one row per sample."""
    X = check_array(X, dtype=np.int8, ensure_2d=False, allow_nd=False)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.shape[1] != n_sites:
        raise ValueError(f"configurations have {X.shape[1]} sites, expected {n_sites}")
    if np.any((X != 0) & (X != 1)):
        raise ValueError("spin values must be 0 or 1")
    return X
