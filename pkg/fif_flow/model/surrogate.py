"""
Log-determinant gradient estimators.

All estimators return a SurrogateTerm whose gradient (not its value) estimates the
parameter gradient of ±½ log det(g′ᵀg′). Encoder-target terms carry a leading minus
sign; decoder-target terms a plus sign. The decoder Jacobian is always evaluated at
z = f(x); the Jacobian site only moves the encoder Jacobian between x and x̂ = g(z).
"""

from dataclasses import dataclass
from enum import Enum
from typing import Tuple, Union

import numpy as np

from fif_flow.errors import DimensionError, RankCollapseError
from fif_flow.model.nets import NetworkPair
from fif_flow.numerics import linalg
from fif_flow.numerics.autodiff import Traced, eval, eval_dual, full_jacobian, jvp, vjp
from fif_flow.numerics.hutchinson import NoiseBatch, basis_probes

RANK_TOL = 1e-14


class GradTarget(str, Enum):
    ENCODER = "encoder"
    DECODER = "decoder"


class TraceSpace(str, Enum):
    LATENT = "latent"
    DATA = "data"


class JacobianSite(str, Enum):
    OFF_MANIFOLD = "off_manifold"
    ON_MANIFOLD = "on_manifold"


@dataclass(frozen=True)
class EstimatorVariant:
    """Gradient target × trace space × encoder-Jacobian site."""

    grad_target: GradTarget = GradTarget.ENCODER
    trace_space: TraceSpace = TraceSpace.LATENT
    jacobian_site: JacobianSite = JacobianSite.OFF_MANIFOLD

    @property
    def sign(self) -> float:
        return -1.0 if self.grad_target is GradTarget.ENCODER else 1.0

    @property
    def label(self) -> str:
        site = "off" if self.jacobian_site is JacobianSite.OFF_MANIFOLD else "on"
        return f"{self.grad_target.value}-{self.trace_space.value}-{site}"

    def probe_dim(self, pair: NetworkPair) -> int:
        return pair.d if self.trace_space is TraceSpace.LATENT else pair.D

    def with_site(self, site: JacobianSite) -> "EstimatorVariant":
        return EstimatorVariant(self.grad_target, self.trace_space, site)

    @classmethod
    def parse(cls, label: Union[str, "EstimatorVariant"]) -> "EstimatorVariant":
        """Parse labels like 'encoder-latent-off' or 'decoder-data-on'."""
        if isinstance(label, EstimatorVariant):
            return label
        parts = label.strip().lower().split("-")
        if len(parts) != 3 or parts[2] not in ("on", "off"):
            raise ValueError(f"Invalid estimator variant '{label}'. Expected <encoder|decoder>-<latent|data>-<on|off>")
        try:
            site = JacobianSite.ON_MANIFOLD if parts[2] == "on" else JacobianSite.OFF_MANIFOLD
            return cls(GradTarget(parts[0]), TraceSpace(parts[1]), site)
        except ValueError:
            raise ValueError(f"Invalid estimator variant '{label}'. Expected <encoder|decoder>-<latent|data>-<on|off>")

    def __str__(self) -> str:
        return self.label


ALL_VARIANTS = tuple(
    EstimatorVariant(t, s, j) for t in GradTarget for s in TraceSpace for j in JacobianSite
)


@dataclass
class SurrogateTerm:
    """
    Loss-ready surrogate.

    value: signed term with gradients keyed by 'encoder' / 'decoder'
    detached_value: unsigned probe average, an estimate of tr(f′g′) (or of the CG form)
    """

    value: Traced
    detached_value: float
    sign: float = 1.0


def _rows(x: np.ndarray, dim: int) -> np.ndarray:
    X = np.asarray(x, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != dim:
        raise DimensionError(f"expected inputs of dim {dim}, got shape {np.shape(x)}")
    return X


def _probe_rows(noise: NoiseBatch, B: int, dim: int) -> Tuple[np.ndarray, int]:
    """Flatten probes to (B*K, dim) with row b*K + k holding probe k of sample b."""
    eps = noise.eps
    if eps.shape[-1] != dim:
        raise DimensionError(f"probe dim {eps.shape[-1]} does not match trace-space dim {dim}")
    if eps.ndim == 2:
        eps = np.broadcast_to(eps, (B,) + eps.shape)
    if eps.shape[0] != B:
        raise DimensionError(f"probe batch {eps.shape[0]} does not match input batch {B}")
    K = eps.shape[1]
    return np.ascontiguousarray(eps).reshape(B * K, dim), K


def _site(pair: NetworkPair, X: np.ndarray, Z: np.ndarray, site: JacobianSite) -> np.ndarray:
    return X if site is JacobianSite.OFF_MANIFOLD else pair.decoder(Z)


def surrogate_logdet(pair: NetworkPair, x: np.ndarray, noise: NoiseBatch, variant: EstimatorVariant = EstimatorVariant()) -> SurrogateTerm:
    """
    Single-pass log-determinant surrogate.

    Encoder target, latent space (default):  −(1/K) Σ ε_kᵀ f′(site) sg(g′(z) ε_k)
    Decoder target, latent space:            +(1/K) Σ sg(ε_kᵀ f′(site)) g′(z) ε_k
    Encoder target, data space:              −(1/K) Σ sg(η_kᵀ g′(z)) f′(site) η_k
    Decoder target, data space:              +(1/K) Σ η_kᵀ g′(z) sg(f′(site) η_k)

    Each form costs one product through each network plus one reverse pass.

    Args:
        pair: Encoder/decoder pair
        x: Sample (D,) or batch (B, D)
        noise: Probes with dim d (latent space) or D (data space), per sample or shared
        variant: Estimator variant

    Returns:
        SurrogateTerm averaged over batch and probes
    """
    f, g = pair.encoder, pair.decoder
    X = _rows(x, pair.D)
    B = X.shape[0]
    E, K = _probe_rows(noise, B, variant.probe_dim(pair))
    Z = f(X)
    site = np.repeat(_site(pair, X, Z, variant.jacobian_site), K, axis=0)
    Zr = np.repeat(Z, K, axis=0)
    scale = variant.sign / (B * K)
    latent = variant.trace_space is TraceSpace.LATENT

    if variant.grad_target is GradTarget.ENCODER:
        if latent:
            _, cot = jvp(g, Zr, E)              # g′(z) ε, held constant
            dual, tape = eval_dual(f, site, cot)
            cot_out = E
        else:
            _, tape_g = eval(g, Zr)
            cot_out, _ = vjp(tape_g, E)         # g′(z)ᵀ η, held constant
            dual, tape = eval_dual(f, site, E)
        values = np.einsum("ij,ij->i", cot_out, dual.tangent)
        _, grad = vjp(tape, np.zeros_like(dual.primal), scale * cot_out)
    else:
        if latent:
            _, tape_f = eval(f, site)
            cot_out, _ = vjp(tape_f, E)         # f′(site)ᵀ ε, held constant
            dual, tape = eval_dual(g, Zr, E)
        else:
            _, tangent = jvp(f, site, E)        # f′(site) η, held constant
            dual, tape = eval_dual(g, Zr, tangent)
            cot_out = E
        values = np.einsum("ij,ij->i", cot_out, dual.tangent)
        _, grad = vjp(tape, np.zeros_like(dual.primal), scale * cot_out)

    detached = float(np.mean(values))
    value = Traced(variant.sign * detached, {variant.grad_target.value: grad})
    return SurrogateTerm(value=value, detached_value=detached, sign=variant.sign)


def cg_logdet_grad(pair: NetworkPair, x: np.ndarray, noise: NoiseBatch, tol: float = 1e-6, max_iter: int = None) -> SurrogateTerm:
    """
    Conjugate-gradient surrogate ½(1/K) Σ sg(CG(JᵀJ; ε_k))ᵀ JᵀJ ε_k with J = g′(z).

    JᵀJ is applied matrix-free through a jvp followed by a vjp. The gradient targets
    the decoder.

    Args:
        pair: Encoder/decoder pair
        x: Sample (D,) or batch (B, D)
        noise: Latent-space probes (dim d)
        tol: CG relative residual tolerance
        max_iter: CG iteration cap (default 2(d+1))

    Returns:
        SurrogateTerm with decoder gradients
    """
    g = pair.decoder
    X = _rows(x, pair.D)
    B = X.shape[0]
    E, K = _probe_rows(noise, B, pair.d)
    Zr = np.repeat(pair.encoder(X), K, axis=0)
    if max_iter is None:
        max_iter = 2 * (pair.d + 1)

    def gram(V: np.ndarray) -> np.ndarray:
        _, JV = jvp(g, Zr, V)
        _, tape = eval(g, Zr)
        out, _ = vjp(tape, JV)
        return out

    U = linalg.cg_solve(gram, E, tol=tol, max_iter=max_iter)

    n = Zr.shape[0]
    dual, tape = eval_dual(g, np.vstack([Zr, Zr]), np.vstack([U, E]))
    JU, JE = dual.tangent[:n], dual.tangent[n:]
    values = 0.5 * np.einsum("ij,ij->i", JU, JE)
    scale = 0.5 / (B * K)
    _, grad = vjp(tape, np.zeros_like(dual.primal), scale * np.vstack([JE, JU]))
    detached = float(np.mean(values))
    return SurrogateTerm(value=Traced(detached, {'decoder': grad}), detached_value=detached, sign=1.0)


def _check_rank(J: np.ndarray, what: str) -> np.ndarray:
    s = np.linalg.svd(J, compute_uv=False)
    s_max = s[..., :1]
    if np.any(~np.isfinite(s)) or np.any(s[..., -1:] <= RANK_TOL * np.maximum(s_max, 1e-300)):
        raise RankCollapseError(f"{what} Jacobian has a zero singular value")
    return s


def exact_logdet(pair: NetworkPair, z: np.ndarray) -> Union[float, np.ndarray]:
    """
    ½ log det(g′(z)ᵀ g′(z)) = Σ log s_i from the full decoder Jacobian.

    Returns a float for a single z, an array for a batch.
    """
    J = full_jacobian(pair.decoder, z)
    s = _check_rank(J, "decoder")
    out = np.sum(np.log(s), axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def _batched_pinv(J: np.ndarray) -> np.ndarray:
    return np.stack([linalg.pinv(j) for j in J])


def exact_logdet_grad(pair: NetworkPair, x: np.ndarray, target: Union[str, GradTarget] = GradTarget.DECODER,
                      site: Union[str, JacobianSite] = JacobianSite.OFF_MANIFOLD) -> np.ndarray:
    """
    Exact parameter gradient of the log-determinant term, averaged over the batch.

    decoder: ∂/∂θ ½ log det(JᵀJ) = tr(J† ∂J) with J = g′(z)
    encoder: −∂/∂φ ½ log det(FFᵀ) = −tr(∂F F†) with F = f′(site)

    Cost is d Jacobian-vector products plus dense pseudoinverses; small nets only.
    """
    target = GradTarget(target)
    site = JacobianSite(site)
    f, g = pair.encoder, pair.decoder
    X = _rows(x, pair.D)
    B, d = X.shape[0], pair.d
    Z = f(X)
    basis = np.tile(np.eye(d), (B, 1))

    if target is GradTarget.DECODER:
        J = full_jacobian(g, Z, mode="jvp").reshape(B, pair.D, d)
        _check_rank(J, "decoder")
        P = _batched_pinv(J)                               # (B, d, D)
        dual, tape = eval_dual(g, np.repeat(Z, d, axis=0), basis)
        _, grad = vjp(tape, np.zeros_like(dual.primal), P.reshape(B * d, pair.D) / B)
        return grad

    S = _site(pair, X, Z, site)
    F = full_jacobian(f, S, mode="jvp").reshape(B, d, pair.D)
    _check_rank(F, "encoder")
    Fp = _batched_pinv(F)                                  # (B, D, d)
    tangents = Fp.transpose(0, 2, 1).reshape(B * d, pair.D)
    dual, tape = eval_dual(f, np.repeat(S, d, axis=0), tangents)
    _, grad = vjp(tape, np.zeros_like(dual.primal), -basis / B)
    return grad


def exact_surrogate_grad(pair: NetworkPair, x: np.ndarray, variant: EstimatorVariant = EstimatorVariant()) -> np.ndarray:
    """Surrogate gradient with the trace computed exactly (probes √n·e_i, K = n)."""
    X = _rows(x, pair.D)
    noise = basis_probes(variant.probe_dim(pair), batch=X.shape[0])
    term = surrogate_logdet(pair, X, noise, variant)
    side = pair.side(variant.grad_target.value)
    return term.value.grad(variant.grad_target.value, side.n_params)


def consistency_gap(pair: NetworkPair, x: np.ndarray) -> np.ndarray:
    """Per-sample ‖f′(x̂) − pinv(g′(z))‖_F; zero for an exactly consistent pair."""
    X = _rows(x, pair.D)
    B = X.shape[0]
    Z = pair.encoder(X)
    X_hat = pair.decoder(Z)
    F = full_jacobian(pair.encoder, X_hat).reshape(B, pair.d, pair.D)
    J = full_jacobian(pair.decoder, Z).reshape(B, pair.D, pair.d)
    return np.linalg.norm(F - _batched_pinv(J), axis=(1, 2))
