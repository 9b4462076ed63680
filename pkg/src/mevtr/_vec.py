"""Small shared vector helpers."""

from __future__ import annotations

import numpy as np

from .errors import InvariantError


def unit_rows(a: np.ndarray, what: str = "input") -> np.ndarray:
    """Return ``a`` with each row scaled to unit L2 norm.

    Norms are accumulated in float64; the result keeps the input dtype.
    Raises :class:`InvariantError` for a zero-norm row, naming its index.
    """
    a = np.atleast_2d(a)
    a64 = a.astype(np.float64, copy=False)
    norms = np.sqrt(np.einsum("ij,ij->i", a64, a64))
    if not norms.all():
        idx = int(np.flatnonzero(norms == 0.0)[0])
        raise InvariantError(f"zero-norm {what} row at index {idx}")
    return (a / norms[:, None]).astype(a.dtype, copy=False)


def unit_vector(v: np.ndarray, what: str = "input") -> np.ndarray:
    """Unit-normalize a single vector; rejects zero norm."""
    v = np.asarray(v).reshape(-1)
    n = float(np.sqrt(np.dot(v.astype(np.float64), v.astype(np.float64))))
    if n == 0.0:
        raise InvariantError(f"zero-norm {what} vector")
    return (v / n).astype(v.dtype)
