"""Dense matrix kernels and decompositions (float64 throughout)."""

from dataclasses import dataclass
from typing import Callable, Tuple, Union

import numpy as np
import scipy.linalg

from fif_flow.errors import ConvergenceError, DimensionError, NotPSDError, NumericalError

PINV_REL_CUTOFF = 1e-12
PSD_TOLERANCE = 1e-10


@dataclass(frozen=True)
class SymEig:
    """Eigendecomposition of a symmetric matrix, eigenvalues descending."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        V = self.eigenvectors
        return (V * self.eigenvalues) @ V.T


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    """
    Validate and convert input to a finite 2-D float64 array.

    Args:
        m: Array-like input
        name: Label used in error messages

    Returns:
        2-D float64 numpy array
    """
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{name} contains non-finite entries")
    return arr


def svd(m) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Thin singular value decomposition.

    Args:
        m: m×n matrix

    Returns:
        (U, s, Vt) with U m×k, s descending of length k = min(m, n), Vt k×n
    """
    a = as_matrix(m)
    try:
        U, s, Vt = scipy.linalg.svd(a, full_matrices=False, lapack_driver="gesdd")
    except np.linalg.LinAlgError:
        # gesdd occasionally fails on hard inputs; gesvd is slower but more robust
        try:
            U, s, Vt = scipy.linalg.svd(a, full_matrices=False, lapack_driver="gesvd")
        except np.linalg.LinAlgError as exc:
            raise ConvergenceError(f"SVD did not converge: {exc}", residual=float("nan"), iterations=0)
    return U, s, Vt


def pinv(m, rel_cutoff: float = PINV_REL_CUTOFF) -> np.ndarray:
    """
    Moore-Penrose pseudoinverse via SVD.

    Singular values below rel_cutoff * s_max are treated as zero.
    """
    a = as_matrix(m)
    if a.size == 0:
        return np.zeros((a.shape[1], a.shape[0]))
    U, s, Vt = svd(a)
    s_max = s[0] if s.size else 0.0
    keep = s > rel_cutoff * s_max
    s_inv = np.zeros_like(s)
    s_inv[keep] = 1.0 / s[keep]
    return (Vt.T * s_inv) @ U.T


def sym_eig(m) -> SymEig:
    """Eigendecomposition of the symmetric part of m, sorted descending."""
    a = as_matrix(m)
    if a.shape[0] != a.shape[1]:
        raise DimensionError(f"sym_eig needs a square matrix, got {a.shape}")
    sym = 0.5 * (a + a.T)
    w, V = scipy.linalg.eigh(sym)
    order = np.argsort(w)[::-1]
    return SymEig(eigenvalues=w[order], eigenvectors=V[:, order])


def sqrtm_psd(m) -> np.ndarray:
    """
    Principal square root of a symmetric PSD matrix.

    Eigenvalues in [-1e-10, 0) are clamped to zero; anything lower raises NotPSDError.
    """
    eig = sym_eig(m)
    lam = eig.eigenvalues
    if lam.size and lam[-1] < -PSD_TOLERANCE:
        raise NotPSDError(float(lam[-1]))
    root = np.sqrt(np.clip(lam, 0.0, None))
    V = eig.eigenvectors
    return (V * root) @ V.T


def cg_solve(
    apply: Callable[[np.ndarray], np.ndarray],
    b: np.ndarray,
    tol: float = 1e-6,
    max_iter: int = None,
    return_iterations: bool = False,
) -> Union[np.ndarray, Tuple[np.ndarray, int]]:
    """
    Matrix-free conjugate gradient for symmetric positive-definite systems.

    A 2-D right-hand side (B, n) is treated as B independent systems, one per row,
    and `apply` must act row-wise on (B, n) arrays. Each row stops updating once its
    residual satisfies ||r|| <= tol * ||b||.

    Args:
        apply: Matvec closure
        b: Right-hand side, shape (n,) or (B, n)
        tol: Relative residual tolerance
        max_iter: Iteration cap (default: n)
        return_iterations: Also return the number of iterations run

    Returns:
        Solution with the shape of b (and the iteration count if requested)
    """
    b = np.asarray(b, dtype=np.float64)
    single = b.ndim == 1
    B = b[None, :] if single else b
    n = B.shape[1]
    if max_iter is None:
        max_iter = n

    def matvec(v: np.ndarray) -> np.ndarray:
        out = np.asarray(apply(v[0] if single else v), dtype=np.float64)
        return out[None, :] if single else out

    x = np.zeros_like(B)
    r = B.copy()
    p = r.copy()
    rs = np.einsum("ij,ij->i", r, r)
    target = (tol * np.linalg.norm(B, axis=1)) ** 2
    active = rs > target

    iterations = 0
    while np.any(active):
        if iterations >= max_iter:
            residual = float(np.max(np.sqrt(rs[active]) / np.linalg.norm(B[active], axis=1)))
            raise ConvergenceError("conjugate gradient exceeded max_iter", residual=residual, iterations=iterations)
        Ap = matvec(p)
        pAp = np.einsum("ij,ij->i", p, Ap)
        if np.any(pAp[active] <= 0.0):
            raise NumericalError("conjugate gradient met a non-positive curvature direction")
        alpha = np.where(active, rs / np.where(active, pAp, 1.0), 0.0)
        x += alpha[:, None] * p
        r -= alpha[:, None] * Ap
        rs_new = np.einsum("ij,ij->i", r, r)
        beta = np.where(active, rs_new / np.where(rs > 0, rs, 1.0), 0.0)
        p = np.where(active[:, None], r + beta[:, None] * p, p)
        rs = np.where(active, rs_new, rs)
        active = rs > target
        iterations += 1

    result = x[0] if single else x
    if return_iterations:
        return result, iterations
    return result


def sample_orthogonal_columns(d: int, K: int, rng: np.random.Generator, batch: int = None) -> np.ndarray:
    """
    First K columns of a random orthogonal d×d matrix, each scaled to norm √d.

    Built from the QR decomposition of a d×K standard-normal matrix. The sign of R's
    diagonal is left as is; trace estimates are invariant to column signs.

    Args:
        d: Ambient dimension
        K: Number of columns, 1 <= K <= d
        rng: numpy Generator
        batch: Optional leading batch size; returns (batch, d, K)

    Returns:
        d×K (or batch×d×K) matrix X with XᵀX = d·I
    """
    if K < 1 or K > d:
        raise DimensionError(f"orthogonal probes need 1 <= K <= d, got K={K}, d={d}")
    shape = (d, K) if batch is None else (batch, d, K)
    G = rng.standard_normal(shape)
    Q, _ = np.linalg.qr(G)
    return Q * np.sqrt(d)
