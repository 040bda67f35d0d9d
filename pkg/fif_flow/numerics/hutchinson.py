"""Hutchinson probe generation, trace estimation and closed-form estimator variances."""

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, List, Sequence, Union

import numpy as np

from fif_flow.errors import DimensionError
from fif_flow.numerics.linalg import as_matrix, sample_orthogonal_columns

# Probes per chunk when simulating estimator variances
_STUDY_CHUNK = 50_000


class NoiseKind(str, Enum):
    RADEMACHER = "rademacher"
    GAUSSIAN = "gaussian"
    SCALED_GAUSSIAN = "scaled_gaussian"
    ORTHOGONALIZED = "orthogonalized"

    @classmethod
    def parse(cls, value: Union[str, "NoiseKind"]) -> "NoiseKind":
        if isinstance(value, NoiseKind):
            return value
        try:
            return cls(value.strip().lower().replace("-", "_"))
        except ValueError:
            raise ValueError(f"Unknown noise kind '{value}'. Must be one of {[k.value for k in cls]}")


@dataclass
class NoiseBatch:
    """
    Probe vectors stored as rows.

    eps has shape (K, dim) for one sample or (B, K, dim) with independent probes per
    batch element.
    """

    eps: np.ndarray
    kind: NoiseKind

    @property
    def K(self) -> int:
        return self.eps.shape[-2]

    @property
    def dim(self) -> int:
        return self.eps.shape[-1]

    @property
    def batched(self) -> bool:
        return self.eps.ndim == 3


def default_kind(K: int) -> NoiseKind:
    """Scaled Gaussian for a single probe, orthogonalized probes otherwise."""
    return NoiseKind.SCALED_GAUSSIAN if K == 1 else NoiseKind.ORTHOGONALIZED


def sample(kind: Union[str, NoiseKind], d: int, K: int, rng: np.random.Generator, batch: int = None) -> NoiseBatch:
    """
    Draw K probes of dimension d.

    Args:
        kind: Probe distribution
        d: Probe dimension
        K: Number of probes (K <= d for orthogonalized probes)
        rng: numpy Generator owned by the caller
        batch: Optional number of independent probe sets

    Returns:
        NoiseBatch with eps of shape (K, d) or (batch, K, d)
    """
    kind = NoiseKind.parse(kind)
    if K < 1 or d < 1:
        raise DimensionError(f"need K >= 1 and d >= 1, got K={K}, d={d}")
    shape = (K, d) if batch is None else (batch, K, d)

    if kind is NoiseKind.RADEMACHER:
        eps = rng.integers(0, 2, size=shape).astype(np.float64) * 2.0 - 1.0
    elif kind is NoiseKind.GAUSSIAN:
        eps = rng.standard_normal(shape)
    elif kind is NoiseKind.SCALED_GAUSSIAN:
        eps = rng.standard_normal(shape)
        eps *= np.sqrt(d) / np.linalg.norm(eps, axis=-1, keepdims=True)
    else:
        cols = sample_orthogonal_columns(d, K, rng, batch=batch)
        eps = np.swapaxes(cols, -1, -2)
    return NoiseBatch(eps=eps, kind=kind)


def basis_probes(n: int, batch: int = None) -> NoiseBatch:
    """Deterministic probes √n·e_i (K = n); the estimate equals the exact trace."""
    eps = np.sqrt(n) * np.eye(n)
    if batch is not None:
        eps = np.broadcast_to(eps, (batch, n, n)).copy()
    return NoiseBatch(eps=eps, kind=NoiseKind.ORTHOGONALIZED)


def probe_values(op: Union[np.ndarray, Callable[[np.ndarray], np.ndarray]], eps: np.ndarray) -> np.ndarray:
    """Quadratic forms εᵀAε for each probe row; `op` maps (K, d) rows to (K, d) rows."""
    if callable(op):
        applied = np.asarray(op(eps), dtype=np.float64)
        if applied.shape != eps.shape:
            raise DimensionError(f"operator returned shape {applied.shape} for probes {eps.shape}")
        return np.einsum("...i,...i->...", eps, applied)
    A = as_matrix(op, "operator")
    if A.shape != (eps.shape[-1], eps.shape[-1]):
        raise DimensionError(f"operator shape {A.shape} does not match probe dim {eps.shape[-1]}")
    return np.einsum("...i,ij,...j->...", eps, A, eps)


def trace_estimate(op: Union[np.ndarray, Callable[[np.ndarray], np.ndarray]], noise: NoiseBatch) -> float:
    """
    Hutchinson estimate (1/K) Σ ε_kᵀ A ε_k.

    Args:
        op: Square matrix or row-wise matvec closure
        noise: Probes (unbatched)

    Returns:
        Trace estimate
    """
    if noise.batched:
        raise DimensionError("trace_estimate takes an unbatched NoiseBatch")
    return float(np.mean(probe_values(op, noise.eps)))


def analytic_variance(kind: Union[str, NoiseKind], K: int, A: np.ndarray) -> float:
    """
    Closed-form variance of the K-probe estimate of tr(A).

    Only the symmetric part of A contributes.
    """
    kind = NoiseKind.parse(kind)
    A = as_matrix(A)
    if A.shape[0] != A.shape[1]:
        raise DimensionError(f"operator must be square, got {A.shape}")
    d = A.shape[0]
    A_s = 0.5 * (A + A.T)

    if kind is NoiseKind.RADEMACHER:
        off = A_s - np.diag(np.diag(A_s))
        return float(2.0 * np.sum(off ** 2) / K)
    if kind is NoiseKind.GAUSSIAN:
        return float(2.0 * np.sum(A_s ** 2) / K)

    lam_var = float(np.var(np.linalg.eigvalsh(A_s)))
    if kind is NoiseKind.SCALED_GAUSSIAN:
        return 2.0 * d * d / (d + 2.0) * lam_var / K
    if K > d:
        raise DimensionError(f"orthogonalized probes need K <= d, got K={K}, d={d}")
    if d == 1:
        return 0.0
    return 2.0 * d * d * (d - K) / (K * (d - 1.0) * (d + 2.0)) * lam_var


def variance_study(
    A: np.ndarray,
    kinds: Sequence[Union[str, NoiseKind]],
    K_values: Sequence[int],
    n_samples: int,
    rng: np.random.Generator,
) -> List[Dict]:
    """
    Empirical vs analytic variance for each (kind, K).

    Args:
        A: Square operator
        kinds: Probe distributions to study
        K_values: Probe counts
        n_samples: Number of independent K-probe estimates per cell
        rng: numpy Generator

    Returns:
        Rows with keys kind, d, K, analytic_var, empirical_var, n_samples
    """
    A = as_matrix(A)
    d = A.shape[0]
    rows = []
    for kind in kinds:
        kind = NoiseKind.parse(kind)
        for K in K_values:
            estimates = []
            remaining = n_samples
            while remaining > 0:
                chunk = min(remaining, _STUDY_CHUNK)
                noise = sample(kind, d, K, rng, batch=chunk)
                estimates.append(probe_values(A, noise.eps).mean(axis=-1))
                remaining -= chunk
            est = np.concatenate(estimates)
            rows.append({
                'kind': kind.value,
                'd': d,
                'K': K,
                'analytic_var': analytic_variance(kind, K, A),
                'empirical_var': float(np.var(est, ddof=1)) if est.size > 1 else 0.0,
                'n_samples': n_samples,
            })
    return rows
