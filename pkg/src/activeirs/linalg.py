"""Dense Hermitian linear-algebra primitives.

Every log-determinant in the package goes through a Hermitian
eigendecomposition so that values computed from ``X Y`` and ``Y X`` style
products agree to rounding.  All logarithms are natural.
"""

import numpy as np

from .errors import ContractError, NotPSDError

__all__ = [
    "HERMITIAN_ATOL",
    "PSD_CLAMP_RTOL",
    "as_hermitian",
    "hermitize",
    "eig_hermitian",
    "hermitian_sqrt",
    "logdet_plus_identity",
    "resolvent_trace",
]

HERMITIAN_ATOL = 1e-12
# eigenvalues in [-PSD_CLAMP_RTOL * ||M||, 0) are treated as zero
PSD_CLAMP_RTOL = 1e-8


def hermitize(M):
    """Return the Hermitian part ``(M + M^H) / 2`` (works on stacks)."""
    M = np.asarray(M)
    return 0.5 * (M + np.conj(np.swapaxes(M, -1, -2)))


def as_hermitian(M, name="matrix"):
    """Validate that `M` is a square Hermitian matrix and return it as an array.

    The symmetry defect ``max |M - M^H|`` must not exceed
    ``HERMITIAN_ATOL * max(1, max|M|)``.  The returned array is the exact
    Hermitian part of the input so downstream code sees a symmetric matrix.
    Stacks of matrices (``(..., n, n)``) are accepted.
    """
    M = np.asarray(M)
    if M.ndim < 2 or M.shape[-1] != M.shape[-2]:
        raise ContractError(f"{name} must be square, got shape {M.shape}")
    if M.size == 0:
        return M.astype(complex)
    scale = max(1.0, float(np.max(np.abs(M))))
    defect = float(np.max(np.abs(M - np.conj(np.swapaxes(M, -1, -2)))))
    if defect > HERMITIAN_ATOL * scale:
        raise ContractError(f"{name} is not Hermitian (defect {defect:.3e})")
    return hermitize(M)


def _clamp_psd(w, name):
    """Clamp slightly negative eigenvalues to zero, reject clearly negative ones.

    `w` holds ascending eigenvalues along the last axis.
    """
    norm = np.max(np.abs(w), axis=-1, keepdims=True)
    bad = w < -PSD_CLAMP_RTOL * norm
    if np.any(bad):
        worst = float(np.min(w / np.where(norm > 0, norm, 1.0)))
        raise NotPSDError(
            f"{name} is not positive semidefinite "
            f"(min eigenvalue / norm = {worst:.3e})")
    return np.maximum(w, 0.0)


def eig_hermitian(M):
    """Eigendecomposition of a Hermitian matrix.

    Returns
    -------
    w : np.ndarray
        Real eigenvalues in ascending order.
    U : np.ndarray
        Unitary matrix whose columns are the matching eigenvectors, so that
        ``U @ diag(w) @ U^H == M``.
    """
    M = as_hermitian(M)
    w, U = np.linalg.eigh(M)
    return w, U


def hermitian_sqrt(M):
    """Principal square root of a Hermitian PSD matrix.

    Eigenvalues within ``-1e-8 * ||M||`` of zero are clamped to zero;
    anything more negative raises :class:`NotPSDError`.
    """
    w, U = eig_hermitian(M)
    w = _clamp_psd(w, "argument of hermitian_sqrt")
    S = (U * np.sqrt(w)) @ U.conj().T
    return hermitize(S)


def logdet_plus_identity(M):
    """``ln det(I + M)`` for a Hermitian PSD matrix, in nats.

    Accepts a single matrix or a stack ``(..., n, n)``; for a stack an array
    of shape ``(...)`` is returned.
    """
    M = as_hermitian(M)
    if M.shape[-1] == 0:
        return np.zeros(M.shape[:-2]) if M.ndim > 2 else 0.0
    w = np.linalg.eigvalsh(M)
    w = _clamp_psd(w, "argument of logdet_plus_identity")
    out = np.sum(np.log1p(w), axis=-1)
    return float(out) if M.ndim == 2 else out


def resolvent_trace(M, t):
    """Normalized resolvent trace ``(1/n) Tr (t I + M)^{-1}`` for ``t > 0``.

    This is the Stieltjes transform of the empirical eigenvalue distribution
    of `M` evaluated at ``z = -t``.
    """
    if not t > 0:
        raise ContractError(f"resolvent_trace needs t > 0, got {t}")
    M = as_hermitian(M)
    w = _clamp_psd(np.linalg.eigvalsh(M), "argument of resolvent_trace")
    return float(np.mean(1.0 / (t + w)))
