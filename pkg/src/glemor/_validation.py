"""Input checking helpers used across the package."""

import numbers

import numpy as np
import scipy.sparse as sp


def check_finite(a, name="array"):
    data = a.data if sp.issparse(a) else a
    if not np.all(np.isfinite(data)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def check_matrix(a, name="matrix", ndim=2):
    """Return ``a`` as a float ndarray (or float sparse matrix) of rank ``ndim``."""
    if sp.issparse(a):
        a = sp.csr_matrix(a, dtype=float)
    else:
        a = np.asarray(a, dtype=float)
        if a.ndim == 1 and ndim == 2:
            a = a.reshape(-1, 1)
        if a.ndim != ndim:
            raise ValueError(f"{name} must be {ndim}-dimensional, got shape {a.shape}")
    return check_finite(a, name)


def check_square(a, name="matrix"):
    a = check_matrix(a, name)
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"{name} must be square, got shape {a.shape}")
    return a


def check_factor(z, n, name="factor"):
    """Validate a tall low-rank factor with ``n`` rows; empty factors are allowed."""
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z.reshape(-1, 1)
    if z.ndim != 2 or z.shape[0] != n:
        raise ValueError(f"{name} must have {n} rows, got shape {z.shape}")
    return check_finite(z, name)


def check_positive(value, name="value", allow_zero=False):
    if not isinstance(value, numbers.Real) or not np.isfinite(value):
        raise ValueError(f"{name} must be a finite real number")
    if value < 0 or (value == 0 and not allow_zero):
        raise ValueError(f"{name} must be {'nonnegative' if allow_zero else 'positive'}")
    return float(value)


def check_order(r, upper, name="r"):
    if not isinstance(r, numbers.Integral) or r < 1 or r > upper:
        raise ValueError(f"{name} must be an integer in [1, {upper}], got {r!r}")
    return int(r)
