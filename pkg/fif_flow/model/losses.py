"""Training objectives: FIF, naive NLL, rectangular-flow (CG) baseline and reconstruction-only."""

from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from fif_flow.errors import DimensionError, NonFiniteLossError
from fif_flow.model.nets import NetworkPair
from fif_flow.model.surrogate import (
    EstimatorVariant,
    GradTarget,
    JacobianSite,
    cg_logdet_grad,
    exact_logdet,
    exact_logdet_grad,
    surrogate_logdet,
)
from fif_flow.numerics import hutchinson
from fif_flow.numerics.autodiff import Traced, eval, vjp
from fif_flow.numerics.hutchinson import NoiseKind

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class LatentPrior:
    """Standard normal latent density."""

    kind: str = "standard_normal"

    def __post_init__(self):
        if self.kind != "standard_normal":
            raise ValueError(f"Unsupported latent prior '{self.kind}'. Only 'standard_normal' is available")

    def neg_log_prob(self, z: np.ndarray) -> np.ndarray:
        """Per-row −log p_Z(z), including the d/2·log 2π constant."""
        z = np.atleast_2d(z)
        return 0.5 * np.sum(z * z, axis=1) + 0.5 * z.shape[1] * LOG_2PI

    def neg_log_prob_grad(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64)


@dataclass(frozen=True)
class LossConfig:
    """
    Objective hyperparameters.

    pinv_partner replaces the stop-gradient partner of the log-det surrogate
    with the exact pseudoinverse of the target network's Jacobian, so the
    target receives the exact log-det gradient instead of the probe estimate.
    Costs d Jacobian-vector products and a dense pseudoinverse per row.
    """

    beta: float = 1.0
    K: int = 1
    variant: EstimatorVariant = field(default_factory=EstimatorVariant)
    prior: LatentPrior = field(default_factory=LatentPrior)
    noise_std: float = 0.0
    noise_kind: Optional[NoiseKind] = None
    pinv_partner: bool = False

    def __post_init__(self):
        if not np.isfinite(self.beta) or self.beta < 0:
            raise ValueError(f"beta must be finite and >= 0, got {self.beta}")
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be >= 0, got {self.noise_std}")

    @property
    def probe_kind(self) -> NoiseKind:
        return self.noise_kind if self.noise_kind is not None else hutchinson.default_kind(self.K)


@dataclass
class LossBreakdown:
    """Batch-mean loss terms. `surrogate` is the unsigned probe average."""

    nll_prior: float
    surrogate: float
    recon: float
    total: float

    def as_dict(self) -> Dict[str, float]:
        return asdict(self)


def _batch(x_batch: np.ndarray, D: int) -> np.ndarray:
    X = np.asarray(x_batch, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != D or X.shape[0] == 0:
        raise DimensionError(f"expected a nonempty (B, {D}) batch, got shape {np.shape(x_batch)}")
    return X


def _augment(X: np.ndarray, cfg: LossConfig, rng: Optional[np.random.Generator]) -> np.ndarray:
    if cfg.noise_std > 0 and rng is not None:
        return X + cfg.noise_std * rng.standard_normal(X.shape)
    return X


def _check_finite(**terms: float) -> None:
    for name, value in terms.items():
        if not np.isfinite(value):
            raise NonFiniteLossError(name, value)


def _prior_and_recon(pair: NetworkPair, X: np.ndarray, cfg: LossConfig) -> Tuple[Traced, float, float]:
    """
    −log p_Z(z) + β‖x̂ − x‖², batch mean, with gradients for both sides.

    Returns:
        (traced value, nll_prior, recon)
    """
    B = X.shape[0]
    z, tape_f = eval(pair.encoder, X)
    x_hat, tape_g = eval(pair.decoder, z)
    residual = x_hat - X
    nll = float(np.mean(cfg.prior.neg_log_prob(z)))
    recon = float(np.mean(np.sum(residual * residual, axis=1)))

    grad_z, grad_theta = vjp(tape_g, (2.0 * cfg.beta / B) * residual)
    _, grad_phi = vjp(tape_f, cfg.prior.neg_log_prob_grad(z) / B + grad_z)
    traced = Traced(nll + cfg.beta * recon, {'encoder': grad_phi, 'decoder': grad_theta})
    return traced, nll, recon


def _probes(cfg: LossConfig, B: int, rng: np.random.Generator, dim: int) -> hutchinson.NoiseBatch:
    return hutchinson.sample(cfg.probe_kind, dim, cfg.K, rng, batch=B)


def _pinv_term(pair: NetworkPair, X: np.ndarray, variant: EstimatorVariant) -> Tuple[Traced, float]:
    # tr(J J†) = d, so the detached value is constant
    target = variant.grad_target
    grad = exact_logdet_grad(pair, X, target, variant.jacobian_site)
    return Traced(variant.sign * pair.d, {target.value: grad}), float(pair.d)


def fif_loss(pair: NetworkPair, x_batch: np.ndarray, cfg: LossConfig, rng: np.random.Generator) -> Tuple[Traced, LossBreakdown]:
    """
    Free-form injective flow objective, batch mean of

        −log p_Z(f(x)) ∓ (1/K) Σ surrogate_k + β‖g(f(x)) − x‖²

    Data noise (cfg.noise_std) is added before encoding and probes are drawn
    independently for every batch element.
    With cfg.pinv_partner the probe average is replaced by the exact trace
    against the Jacobian pseudoinverse.

    Args:
        pair: Encoder/decoder pair
        x_batch: (B, D) batch
        cfg: Loss configuration
        rng: Generator for data noise and probes

    Returns:
        (traced total, LossBreakdown)
    """
    X = _augment(_batch(x_batch, pair.D), cfg, rng)
    base, nll, recon = _prior_and_recon(pair, X, cfg)
    if cfg.pinv_partner:
        value, surrogate = _pinv_term(pair, X, cfg.variant)
    else:
        noise = _probes(cfg, X.shape[0], rng, cfg.variant.probe_dim(pair))
        term = surrogate_logdet(pair, X, noise, cfg.variant)
        value, surrogate = term.value, term.detached_value
    total = base + value
    _check_finite(nll_prior=nll, surrogate=surrogate, recon=recon)
    return total, LossBreakdown(nll_prior=nll, surrogate=surrogate, recon=recon, total=total.value)


def naive_nll_loss(pair: NetworkPair, x_batch: np.ndarray, cfg: LossConfig, rng: np.random.Generator = None) -> Tuple[Traced, LossBreakdown]:
    """
    Naive decoder-side NLL: −log p_Z(z) + ½ log det(g′(z)ᵀg′(z)) (+ β recon).

    The value uses the exact log-determinant. The decoder receives the exact
    log-det gradient at z = f(x); the encoder receives the surrogate with its
    Jacobian evaluated on the manifold. With cfg.beta = 0 this is exactly the
    naive NLL, which is invariant to projecting x onto the decoder manifold.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    X = _augment(_batch(x_batch, pair.D), cfg, rng)
    base, nll, recon = _prior_and_recon(pair, X, cfg)
    logdet = float(np.mean(exact_logdet(pair, pair.encoder(X))))

    variant = cfg.variant.with_site(JacobianSite.ON_MANIFOLD)
    noise = _probes(cfg, X.shape[0], rng, variant.probe_dim(pair))
    term = surrogate_logdet(pair, X, noise, variant)
    grads = {
        'encoder': term.value.grad('encoder', pair.encoder.n_params),
        'decoder': exact_logdet_grad(pair, X, GradTarget.DECODER),
    }
    total = base + Traced(logdet, grads)
    _check_finite(nll_prior=nll, surrogate=logdet, recon=recon)
    return total, LossBreakdown(nll_prior=nll, surrogate=logdet, recon=recon, total=total.value)


def rf_loss(pair: NetworkPair, x_batch: np.ndarray, cfg: LossConfig, rng: np.random.Generator,
            cg_tol: float = 1e-6, cg_max_iter: int = None) -> Tuple[Traced, LossBreakdown]:
    """Rectangular-flow baseline: same three terms with the CG log-det surrogate."""
    X = _augment(_batch(x_batch, pair.D), cfg, rng)
    base, nll, recon = _prior_and_recon(pair, X, cfg)
    noise = _probes(cfg, X.shape[0], rng, pair.d)
    term = cg_logdet_grad(pair, X, noise, tol=cg_tol, max_iter=cg_max_iter)
    total = base + term.value
    _check_finite(nll_prior=nll, surrogate=term.detached_value, recon=recon)
    return total, LossBreakdown(nll_prior=nll, surrogate=term.detached_value, recon=recon, total=total.value)


def recon_only_loss(pair: NetworkPair, x_batch: np.ndarray, cfg: LossConfig, rng: np.random.Generator = None) -> Tuple[Traced, LossBreakdown]:
    """β‖x̂ − x‖² alone (autoencoder baseline for cost comparisons)."""
    X = _augment(_batch(x_batch, pair.D), cfg, rng)
    B = X.shape[0]
    z, tape_f = eval(pair.encoder, X)
    x_hat, tape_g = eval(pair.decoder, z)
    residual = x_hat - X
    recon = float(np.mean(np.sum(residual * residual, axis=1)))
    grad_z, grad_theta = vjp(tape_g, (2.0 * cfg.beta / B) * residual)
    _, grad_phi = vjp(tape_f, grad_z)
    _check_finite(recon=recon)
    total = Traced(cfg.beta * recon, {'encoder': grad_phi, 'decoder': grad_theta})
    return total, LossBreakdown(nll_prior=0.0, surrogate=0.0, recon=recon, total=total.value)


LOSSES = {
    'fif': fif_loss,
    'naive': naive_nll_loss,
    'rf': rf_loss,
    'recon': recon_only_loss,
}


def get_loss(name: str):
    """Look up an objective by config name."""
    if name not in LOSSES:
        raise ValueError(f"Unknown loss '{name}'. Must be one of {sorted(LOSSES)}")
    return LOSSES[name]
