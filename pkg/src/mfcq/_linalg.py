"""Small dense linear-algebra helpers shared across modules."""

from __future__ import annotations

import math

import numpy as np

from mfcq.errors import DefinitenessError, SingularityError

SINGULAR_RTOL = 1e-12


def sym(A: np.ndarray) -> np.ndarray:
    if A.shape[-1] == 1:
        return A
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def sym_sqrt(A: np.ndarray, tol: float = 1e-10, name: str = "matrix") -> np.ndarray:
    """Symmetric PSD square root; eigenvalues down to ``-tol`` are clipped to 0."""
    w, Q = np.linalg.eigh(sym(A))
    if w.size and w.min() < -tol:
        raise DefinitenessError(f"{name} is not positive semidefinite (min eigenvalue {w.min():.3g})")
    w = np.clip(w, 0.0, None)
    return sym((Q * np.sqrt(w)[..., None, :]) @ np.swapaxes(Q, -1, -2))


def negdef_inverse(block: np.ndarray, name: str, t: float) -> tuple[np.ndarray, float, bool]:
    """Invert a block expected to be negative definite.

    Returns ``(inverse, log det(-block), negative_definite)``. The Cholesky
    factor of ``-block`` is tried first; if that fails the block is either
    singular (raise) or indefinite (LU solve, flag False).
    """
    if block.shape == (1, 1):
        u = float(block[0, 0])
        if abs(u) <= SINGULAR_RTOL:
            raise SingularityError(name, t, [u])
        if u < 0.0:
            return np.array([[1.0 / u]]), math.log(-u), True
        return np.array([[1.0 / u]]), float("nan"), False
    try:
        L = np.linalg.cholesky(-block)
    except np.linalg.LinAlgError:
        eig = np.linalg.eigvalsh(sym(block))
        scale = max(1.0, float(np.abs(eig).max()))
        if np.abs(eig).min() <= SINGULAR_RTOL * scale:
            raise SingularityError(name, t, eig) from None
        inv = np.linalg.inv(block)
        return inv, float("nan"), False
    Linv = np.linalg.inv(L)
    inv = -(Linv.T @ Linv)
    return inv, 2.0 * float(np.log(np.diag(L)).sum()), True
