"""
Closed-form solutions for the linear encoder/decoder model on Gaussian data.

The loss of the linear model f(x) = A x, g(z) = A† z with data covariance Σ and
reconstruction weight 1/(2σ²) is

    ½ tr(AΣAᵀ) − ½ log det(AAᵀ) + (1/2σ²) tr(Σ(I − A†A))

Its minimizers select d eigendirections of Σ: those with the smallest
log λ − λ/σ². Training configs map σ² to β = 1/(2σ²).
"""

from dataclasses import dataclass
from itertools import combinations
from typing import Dict, List

import numpy as np
import scipy.linalg
import scipy.optimize

from fif_flow.errors import DimensionError, RankCollapseError
from fif_flow.numerics import linalg

RANK_TOL = 1e-12
CRITICAL_TOL = 1e-8


@dataclass
class LinearOracleSolution:
    """Optimal eigen-selection for the linear model."""

    lambdas: np.ndarray
    V: np.ndarray
    alpha: np.ndarray
    loss_alpha: float
    selected_subspace: np.ndarray
    sigma2: float

    @property
    def beta(self) -> float:
        return beta_from_sigma2(self.sigma2)

    def to_dict(self) -> Dict:
        return {
            'sigma2': self.sigma2,
            'beta': self.beta,
            'lambdas': self.lambdas.tolist(),
            'alpha': self.alpha.astype(int).tolist(),
            'loss_alpha': self.loss_alpha,
            'selected_subspace': self.selected_subspace.tolist(),
        }


@dataclass
class CriticalPointCert:
    """Gradient residual and structural checks at a candidate critical point."""

    U: np.ndarray
    residual: float
    orthonormal_error: float
    commute_error: float

    @property
    def ok(self) -> bool:
        return self.residual < CRITICAL_TOL and self.orthonormal_error < CRITICAL_TOL and self.commute_error < CRITICAL_TOL

    def to_dict(self) -> Dict:
        return {
            'residual': self.residual,
            'orthonormal_error': self.orthonormal_error,
            'commute_error': self.commute_error,
            'ok': self.ok,
        }


def beta_from_sigma2(sigma2: float) -> float:
    return 1.0 / (2.0 * sigma2)


def sigma2_from_beta(beta: float) -> float:
    return 1.0 / (2.0 * beta)


def selection_score(lambdas: np.ndarray, sigma2: float) -> np.ndarray:
    """log λ − λ/σ² per eigenvalue; selected directions minimize it."""
    lambdas = np.asarray(lambdas, dtype=np.float64)
    return np.log(lambdas) - lambdas / sigma2


def _check_full_rank(A: np.ndarray) -> None:
    _, s, _ = linalg.svd(A)
    if s[-1] <= RANK_TOL * s[0]:
        raise RankCollapseError(f"A is rank deficient (s_min/s_max = {s[-1] / s[0]:.3e})")


def optimal_selection(Sigma: np.ndarray, sigma2: float, d: int) -> LinearOracleSolution:
    """
    Globally optimal d-dimensional eigen-selection.

    Ties in the score are broken toward larger eigenvalues.

    Args:
        Sigma: D×D symmetric positive-definite covariance
        sigma2: Noise variance σ²
        d: Latent dimension

    Returns:
        LinearOracleSolution
    """
    eig = linalg.sym_eig(Sigma)
    lam, V = eig.eigenvalues, eig.eigenvectors
    D = lam.size
    if not 1 <= d <= D:
        raise DimensionError(f"need 1 <= d <= D, got d={d}, D={D}")
    if lam[-1] <= RANK_TOL * lam[0]:
        raise RankCollapseError("covariance is rank deficient; add noise of variance sigma2 to the data first")
    score = selection_score(lam, sigma2)
    # eigenvalues are descending, so a stable sort keeps larger λ first among ties
    chosen = np.sort(np.argsort(score, kind="stable")[:d])
    alpha = np.zeros(D, dtype=bool)
    alpha[chosen] = True
    return LinearOracleSolution(
        lambdas=lam,
        V=V,
        alpha=alpha,
        loss_alpha=float(0.5 * np.sum(score[alpha])),
        selected_subspace=V[:, chosen],
        sigma2=float(sigma2),
    )


def closed_form_loss(A: np.ndarray, Sigma: np.ndarray, sigma2: float) -> float:
    """Exact expected loss of the linear model."""
    A = linalg.as_matrix(A, "A")
    Sigma = linalg.as_matrix(Sigma, "Sigma")
    _check_full_rank(A)
    A_pinv = linalg.pinv(A)
    D = A.shape[1]
    _, logdet = np.linalg.slogdet(A @ A.T)
    proj_residual = np.eye(D) - A_pinv @ A
    return float(
        0.5 * np.trace(A @ Sigma @ A.T)
        - 0.5 * logdet
        + np.trace(Sigma @ proj_residual) / (2.0 * sigma2)
    )


def reduced_form_loss(U: np.ndarray, Sigma: np.ndarray, sigma2: float) -> float:
    """
    Loss at A = U Σ^{-1/2} for U with orthonormal rows commuting with Σ:
    ½ tr(U log(Σ) Uᵀ) − tr(UΣUᵀ)/(2σ²) + d/2 + tr(Σ)/(2σ²).
    """
    U = linalg.as_matrix(U, "U")
    eig = linalg.sym_eig(Sigma)
    V, lam = eig.eigenvectors, eig.eigenvalues
    log_sigma = (V * np.log(lam)) @ V.T
    d = U.shape[0]
    return float(
        0.5 * np.trace(U @ log_sigma @ U.T)
        - np.trace(U @ Sigma @ U.T) / (2.0 * sigma2)
        + 0.5 * d
        + np.trace(Sigma) / (2.0 * sigma2)
    )


def loss_gradient(A: np.ndarray, Sigma: np.ndarray, sigma2: float) -> np.ndarray:
    """∂L/∂A = (ΣAᵀ − A† − (1/σ²)(I − A†A)ΣA†)ᵀ, shape d×D."""
    A = linalg.as_matrix(A, "A")
    _check_full_rank(A)
    A_pinv = linalg.pinv(A)
    D = A.shape[1]
    inner = Sigma @ A.T - A_pinv - (np.eye(D) - A_pinv @ A) @ Sigma @ A_pinv / sigma2
    return inner.T


def verify_critical_point(A: np.ndarray, Sigma: np.ndarray, sigma2: float) -> CriticalPointCert:
    """
    Gradient residual plus the structural checks UUᵀ = I and [UᵀU, Σ] = 0 for U = AΣ^{1/2}.
    """
    A = linalg.as_matrix(A, "A")
    Sigma = linalg.as_matrix(Sigma, "Sigma")
    U = A @ linalg.sqrtm_psd(Sigma)
    UtU = U.T @ U
    return CriticalPointCert(
        U=U,
        residual=float(np.linalg.norm(loss_gradient(A, Sigma, sigma2))),
        orthonormal_error=float(np.linalg.norm(U @ U.T - np.eye(U.shape[0]))),
        commute_error=float(np.linalg.norm(UtU @ Sigma - Sigma @ UtU)),
    )


def critical_encoder(solution: LinearOracleSolution) -> np.ndarray:
    """A = U Σ^{-1/2} built from the selected eigenvectors (a critical point)."""
    V_sel = solution.selected_subspace
    lam_sel = solution.lambdas[solution.alpha]
    return (V_sel / np.sqrt(lam_sel)).T


def principal_angles(S1: np.ndarray, S2: np.ndarray) -> np.ndarray:
    """
    Principal angles between the column spans of S1 and S2, ascending, in [0, π/2].

    Args:
        S1: D×k1 matrix
        S2: D×k2 matrix

    Returns:
        min(k1, k2) angles in radians
    """
    S1 = linalg.as_matrix(S1, "S1")
    S2 = linalg.as_matrix(S2, "S2")
    if S1.shape[0] != S2.shape[0]:
        raise DimensionError(f"subspaces live in different spaces: {S1.shape[0]} vs {S2.shape[0]}")
    angles = scipy.linalg.subspace_angles(S1, S2)
    return np.clip(np.sort(angles), 0.0, np.pi / 2)


def selection_flip_point(lam_hi: float, lam_lo: float, tol: float = 1e-12) -> float:
    """
    σ² at which d=1 selection switches between λ_hi and λ_lo, located by bisection.

    Below the flip point the larger eigenvalue wins, above it the smaller one.
    """
    if not lam_hi > lam_lo > 0:
        raise ValueError(f"need lam_hi > lam_lo > 0, got {lam_hi}, {lam_lo}")

    def gap(sigma2: float) -> float:
        s = selection_score(np.array([lam_hi, lam_lo]), sigma2)
        return float(s[0] - s[1])

    return float(scipy.optimize.bisect(gap, lam_lo, lam_hi, xtol=tol))


def exhaustive_selection_losses(lambdas: np.ndarray, sigma2: float, d: int) -> List[float]:
    """loss_alpha of every valid α (for cross-checking optimal_selection on small D)."""
    score = selection_score(lambdas, sigma2)
    return [float(0.5 * score[list(idx)].sum()) for idx in combinations(range(len(lambdas)), d)]
