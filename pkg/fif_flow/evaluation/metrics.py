"""
Evaluation quantities: FID-like Wasserstein-2 score, decoder spectra, relative
gradient distance, sinusoid alignment and curvature diagnostics.
"""

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
from scipy.stats import differential_entropy

from fif_flow.data.datasets import Dataset, sinusoid_arc_length, sinusoid_normal
from fif_flow.errors import DataError, DimensionError
from fif_flow.model.nets import NetworkPair
from fif_flow.model.surrogate import EstimatorVariant, exact_surrogate_grad, surrogate_logdet
from fif_flow.numerics import hutchinson, linalg
from fif_flow.numerics.autodiff import full_jacobian
from fif_flow.numerics.hutchinson import NoiseKind

COV_JITTER = 1e-10
METRIC_COLUMNS = ("run_id", "step", "metric", "value")


@dataclass
class GaussianSummary:
    """Mean and covariance of a sample set."""

    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def from_samples(cls, samples: np.ndarray) -> "GaussianSummary":
        X = linalg.as_matrix(samples, "samples")
        n, D = X.shape
        if n < D + 1:
            raise DataError(f"need at least D+1 = {D + 1} samples for a covariance, got {n}")
        return cls(mean=X.mean(axis=0), cov=np.cov(X, rowvar=False).reshape(D, D))


def w2_gaussian(a: GaussianSummary, b: GaussianSummary) -> float:
    """
    Wasserstein-2 distance between N(μ_a, Σ_a) and N(μ_b, Σ_b).

    √(‖μ_a − μ_b‖² + tr(Σ_a + Σ_b − 2(Σ_b^{1/2} Σ_a Σ_b^{1/2})^{1/2})), with jitter on the diagonals.
    """
    if a.mean.shape != b.mean.shape:
        raise DimensionError(f"summaries differ in dimension: {a.mean.shape} vs {b.mean.shape}")
    if np.array_equal(a.mean, b.mean) and np.array_equal(a.cov, b.cov):
        return 0.0
    D = a.mean.size
    cov_a = a.cov + COV_JITTER * np.eye(D)
    cov_b = b.cov + COV_JITTER * np.eye(D)
    root_b = linalg.sqrtm_psd(cov_b)
    cross = linalg.sqrtm_psd(root_b @ cov_a @ root_b)
    diff = a.mean - b.mean
    d2 = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))
    return float(np.sqrt(max(d2, 0.0)))


def fid_like(model_samples: np.ndarray, test_data: np.ndarray) -> float:
    """W2 distance between moment-matched Gaussians of model samples and test data."""
    return w2_gaussian(GaussianSummary.from_samples(model_samples), GaussianSummary.from_samples(test_data))


def bootstrap_fid_baseline(data: np.ndarray, rng: np.random.Generator) -> float:
    """fid_like between two random halves of the same data (sampling-noise floor)."""
    X = linalg.as_matrix(data, "data")
    order = rng.permutation(X.shape[0])
    half = X.shape[0] // 2
    return fid_like(X[order[:half]], X[order[half:2 * half]])


@dataclass
class SpectrumReport:
    """Decoder singular values per sample."""

    singular_values: np.ndarray
    log_sums: np.ndarray
    count_ge_one: np.ndarray

    @property
    def mean_log_sum(self) -> float:
        return float(np.mean(self.log_sums))

    @property
    def mean_count_ge_one(self) -> float:
        return float(np.mean(self.count_ge_one))


def decoder_spectrum(pair: NetworkPair, z_batch: np.ndarray) -> SpectrumReport:
    """
    Singular values of g′(z) for each latent in the batch.

    The log-sum per sample is the entropy change from latent to data space.
    """
    Z = np.atleast_2d(np.asarray(z_batch, dtype=np.float64))
    J = full_jacobian(pair.decoder, Z).reshape(Z.shape[0], pair.D, pair.d)
    s = np.linalg.svd(J, compute_uv=False)
    with np.errstate(divide="ignore"):
        log_sums = np.sum(np.log(s), axis=1)
    return SpectrumReport(singular_values=s, log_sums=log_sums, count_ge_one=np.sum(s >= 1.0, axis=1))


def rel_grad_distance(pair: NetworkPair, x_batch: np.ndarray, variant: EstimatorVariant, K_values: Sequence[int],
                      seed: int = 0, kind: Union[str, NoiseKind] = NoiseKind.ORTHOGONALIZED) -> List[Tuple[int, float]]:
    """
    ‖∇surrogate(K) − ∇exact‖₂ / ‖∇exact‖₂ for each K, where ∇exact is the surrogate
    gradient with the trace taken exactly.

    Args:
        pair: Encoder/decoder pair
        x_batch: (B, D) inputs
        variant: Estimator variant
        K_values: Probe counts (each <= probe dim for orthogonalized probes)
        seed: Probe seed
        kind: Probe distribution

    Returns:
        [(K, distance), ...]
    """
    X = np.atleast_2d(np.asarray(x_batch, dtype=np.float64))
    target = variant.grad_target.value
    n_params = pair.side(target).n_params
    exact = exact_surrogate_grad(pair, X, variant)
    norm = np.linalg.norm(exact)
    if norm == 0.0:
        raise DataError("exact surrogate gradient is zero; relative distance undefined")
    dim = variant.probe_dim(pair)
    curve = []
    for K in K_values:
        rng = np.random.default_rng([seed, K])
        noise = hutchinson.sample(kind, dim, K, rng, batch=X.shape[0])
        est = surrogate_logdet(pair, X, noise, variant).value.grad(target, n_params)
        curve.append((int(K), float(np.linalg.norm(est - exact) / norm)))
    return curve


def _abs_corr(a: np.ndarray, b: np.ndarray) -> float:
    if np.std(a) == 0.0 or np.std(b) == 0.0:
        return 0.0
    return float(abs(np.corrcoef(a, b)[0, 1]))


def manifold_alignment(pair: NetworkPair, dataset: Dataset, split: str = "test") -> Dict[str, float]:
    """
    |corr(z, arc position)| and |corr(z, signed orthogonal offset)| on the sinusoid.

    Arc position is the arc length of the clean point from t = 0; the offset is the
    added noise projected on the curve normal.
    """
    if pair.D != 2 or pair.d != 1:
        raise DimensionError(f"alignment needs a D=2, d=1 pair, got D={pair.D}, d={pair.d}")
    if 't' not in dataset.aux or 'noise' not in dataset.aux:
        raise DataError("alignment needs a generated sinusoid dataset (aux 't' and 'noise')")
    X = dataset.part(split)
    t = dataset.aux_part('t', split)
    noise = dataset.aux_part('noise', split)
    z = pair.encoder(X)[:, 0]
    arc = sinusoid_arc_length(t)
    offset = np.einsum("ij,ij->i", noise, sinusoid_normal(t))
    return {'corr_curve': _abs_corr(z, arc), 'corr_noise': _abs_corr(z, offset)}


def curvature_proxy(pair: NetworkPair, t_grid: np.ndarray, h: float = 1e-3) -> float:
    """
    Mean curvature |x′y″ − y′x″| / |c′|³ of the decoder curve c(t) = g(t) (d=1, D=2),
    by central second differences.
    """
    if pair.D != 2 or pair.d != 1:
        raise DimensionError(f"curvature proxy needs a D=2, d=1 pair, got D={pair.D}, d={pair.d}")
    t = np.asarray(t_grid, dtype=np.float64).reshape(-1, 1)
    c0 = pair.decoder(t)
    cp = pair.decoder(t + h)
    cm = pair.decoder(t - h)
    d1 = (cp - cm) / (2.0 * h)
    d2 = (cp - 2.0 * c0 + cm) / (h * h)
    speed = np.linalg.norm(d1, axis=1)
    cross = np.abs(d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
    kappa = cross / np.maximum(speed ** 3, 1e-300)
    return float(np.mean(kappa))


def arc_projection_study(radii: Sequence[float], n: int = 2000, beta: float = 1.0, seed: int = 0) -> List[Dict]:
    """
    Project flat data on [-1, 1] × {0} onto circular arcs of radius R tangent at the origin.

    As R shrinks the projected arc coordinates concentrate, so their entropy drops,
    while the reconstruction error stays bounded by the data spread.

    Returns:
        Rows with radius, projected_entropy, recon, total (= entropy + beta·recon)
    """
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1.0, 1.0, size=n)
    points = np.stack([x, np.zeros(n)], axis=1)
    rows = []
    for R in radii:
        center = np.array([0.0, R])
        rel = points - center
        dist = np.linalg.norm(rel, axis=1)
        projected = center + R * rel / dist[:, None]
        arc_coord = R * np.arctan2(rel[:, 0], -rel[:, 1])
        recon = float(np.mean(np.sum((points - projected) ** 2, axis=1)))
        entropy = float(differential_entropy(arc_coord))
        rows.append({'radius': float(R), 'projected_entropy': entropy, 'recon': recon, 'total': entropy + beta * recon})
    return rows


class MetricsWriter:
    """Append-only CSV of (run_id, step, metric, value) rows."""

    def __init__(self, path: Union[str, Path], run_id: str):
        self.path = Path(path)
        self.run_id = run_id
        self.rows_written = 0
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists():
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(METRIC_COLUMNS)
        else:
            with open(self.path, newline="") as fh:
                self.rows_written = max(0, sum(1 for _ in fh) - 1)

    def truncate(self, rows: int) -> None:
        """Keep only the first `rows` data rows (used when resuming)."""
        with open(self.path, newline="") as fh:
            lines = list(csv.reader(fh))
        header, data = lines[0], lines[1:1 + rows]
        with open(self.path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(data)
        self.rows_written = len(data)

    def write(self, step: int, metrics: Dict[str, float]) -> None:
        with open(self.path, "a", newline="") as fh:
            writer = csv.writer(fh)
            for name in sorted(metrics):
                writer.writerow([self.run_id, step, name, repr(float(metrics[name]))])
                self.rows_written += 1


def read_metrics(path: Union[str, Path]) -> List[Dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
