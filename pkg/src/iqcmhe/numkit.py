"""Small dense linear-algebra helpers shared by the rest of the package."""

from __future__ import annotations

import numpy as np

__all__ = [
    "NotPositiveDefinite",
    "NotPsd",
    "sym",
    "sym_eigvalsh",
    "kron",
    "generalized_max_eig",
    "is_doubly_hyperdominant",
    "psd_factor",
    "blockdiag",
]


class NotPositiveDefinite(ValueError):
    pass


class NotPsd(ValueError):
    pass


def sym(a) -> np.ndarray:
    """Return the symmetric part ``(a + a.T) / 2`` as a float array."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    return 0.5 * (a + a.T)


def sym_eigvalsh(a) -> np.ndarray:
    """Ascending eigenvalues of the symmetric part of ``a``."""
    a = sym(a)
    if a.shape[0] == 0:
        return np.zeros(0)
    return np.linalg.eigvalsh(a)


def kron(a, b) -> np.ndarray:
    return np.kron(np.atleast_2d(np.asarray(a, dtype=float)), np.atleast_2d(np.asarray(b, dtype=float)))


def blockdiag(*blocks) -> np.ndarray:
    """Block-diagonal stack that tolerates empty (0-row or 0-col) blocks."""
    mats = []
    for b in blocks:
        b = np.asarray(b, dtype=float)
        mats.append(b if b.ndim == 2 else np.atleast_2d(b) if b.size else np.zeros((0, 0)))
    rows = sum(m.shape[0] for m in mats)
    cols = sum(m.shape[1] for m in mats)
    out = np.zeros((rows, cols))
    r = c = 0
    for m in mats:
        out[r:r + m.shape[0], c:c + m.shape[1]] = m
        r += m.shape[0]
        c += m.shape[1]
    return out


def _inv_sqrt_spd(b: np.ndarray, tol: float) -> np.ndarray:
    vals, vecs = np.linalg.eigh(b)
    if vals.size and vals[0] <= tol:
        raise NotPositiveDefinite(f"min eigenvalue {vals[0]:.3e} <= {tol:g}")
    return (vecs / np.sqrt(vals)) @ vecs.T


def generalized_max_eig(a, b, tol: float = 1e-10) -> float:
    """Largest ``lam`` with ``det(a - lam * b) = 0`` for SPD ``b``.

    Computed as the top eigenvalue of ``b^{-1/2} a b^{-1/2}``.
    """
    a = sym(a)
    b = sym(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    s = _inv_sqrt_spd(b, tol)
    return float(np.linalg.eigvalsh(sym(s @ a @ s))[-1])


def is_doubly_hyperdominant(w, tol: float = 0.0) -> bool:
    """Off-diagonals <= tol, every row and column sum >= -tol."""
    w = np.asarray(w, dtype=float)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ValueError("expected a square matrix")
    off = w - np.diag(np.diag(w))
    return bool(
        np.all(off <= tol)
        and np.all(w.sum(axis=1) >= -tol)
        and np.all(w.sum(axis=0) >= -tol)
    )


def psd_factor(a, tol: float = 1e-12) -> np.ndarray:
    """Return ``L`` with ``L.T @ L == a`` for positive semidefinite ``a``.

    Eigenvalues in ``[-tol, tol]`` are truncated to zero; anything below
    ``-tol`` raises :class:`NotPsd`. The result is square, so a residual
    weighted by ``a`` is ``L @ r``.
    """
    a = sym(a)
    if a.shape[0] == 0:
        return np.zeros((0, 0))
    vals, vecs = np.linalg.eigh(a)
    if vals[0] < -tol:
        raise NotPsd(f"min eigenvalue {vals[0]:.3e} < -{tol:g}")
    vals = np.where(vals > tol, vals, 0.0)
    return (vecs * np.sqrt(vals)).T
