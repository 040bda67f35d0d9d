"""Encoder/decoder construction, initialization and flat parameter management."""

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from fif_flow.errors import DimensionError, InvalidArchError, RankCollapseError
from fif_flow.numerics import linalg
from fif_flow.numerics.autodiff import ACTIVATIONS, Activation, Affine, Layer, Network, Residual

BLOCK_TYPES = ("mlp", "residual", "tabular")
FINAL_ENCODER_SCALE = 0.1


@dataclass(frozen=True)
class ArchSpec:
    """
    Architecture of an encoder/decoder pair.

    block:
        mlp      - plain MLP D -> hidden... -> d
        residual - n_blocks residual blocks in data space, then an MLP to d
        tabular  - MLP to d, then n_blocks residual blocks in latent space
    The decoder mirrors the encoder with independent parameters, unless `tied`
    (linear mlp only) makes it the pseudoinverse of the encoder.
    """

    D: int
    d: int
    hidden: Tuple[int, ...] = ()
    block: str = "mlp"
    activation: str = "relu"
    n_blocks: int = 0
    block_hidden: Tuple[int, ...] = (256,)
    tied: bool = False
    encoder_scale: float = FINAL_ENCODER_SCALE
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "block_hidden", tuple(int(h) for h in self.block_hidden))
        self.validate()

    def validate(self) -> None:
        if self.D < 1 or self.d < 1:
            raise InvalidArchError(f"dimensions must be positive, got D={self.D}, d={self.d}")
        if self.d > self.D:
            raise InvalidArchError(f"latent dim d={self.d} exceeds data dim D={self.D}")
        if any(w < 1 for w in self.hidden + self.block_hidden):
            raise InvalidArchError(f"widths must be positive, got hidden={self.hidden}, block_hidden={self.block_hidden}")
        if self.block not in BLOCK_TYPES:
            raise InvalidArchError(f"unknown block type '{self.block}'. Must be one of {BLOCK_TYPES}")
        if self.activation not in ACTIVATIONS:
            raise InvalidArchError(f"unknown activation '{self.activation}'. Must be one of {sorted(ACTIVATIONS)}")
        if self.n_blocks < 0:
            raise InvalidArchError(f"n_blocks must be >= 0, got {self.n_blocks}")
        if not self.encoder_scale > 0:
            raise InvalidArchError(f"encoder_scale must be positive, got {self.encoder_scale}")
        if self.block != "mlp" and self.n_blocks > 0 and not self.block_hidden:
            raise InvalidArchError("residual blocks need at least one inner width")
        if self.tied and (self.block != "mlp" or self.hidden):
            raise InvalidArchError("a tied decoder needs a linear encoder (block = mlp, no hidden layers)")

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["hidden"] = list(self.hidden)
        data["block_hidden"] = list(self.block_hidden)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "ArchSpec":
        return cls(**{**data, "hidden": tuple(data.get("hidden", ())), "block_hidden": tuple(data.get("block_hidden", (256,)))})


def _mlp(widths: List[int], activation: str) -> List[Layer]:
    layers: List[Layer] = []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        layers.append(Affine(a, b))
        if i < len(widths) - 2:
            layers.append(Activation(b, activation))
    return layers


def _blocks(dim: int, inner_widths: Tuple[int, ...], n_blocks: int, activation: str) -> List[Layer]:
    return [Residual(_mlp([dim, *inner_widths, dim], activation)) for _ in range(n_blocks)]


def _encoder_layers(spec: ArchSpec) -> List[Layer]:
    mlp = _mlp([spec.D, *spec.hidden, spec.d], spec.activation)
    if spec.block == "residual":
        return _blocks(spec.D, spec.block_hidden, spec.n_blocks, spec.activation) + mlp
    if spec.block == "tabular":
        return mlp + _blocks(spec.d, spec.block_hidden, spec.n_blocks, spec.activation)
    return mlp


def _decoder_layers(spec: ArchSpec) -> List[Layer]:
    mlp = _mlp([spec.d, *reversed(spec.hidden), spec.D], spec.activation)
    if spec.block == "residual":
        return mlp + _blocks(spec.D, spec.block_hidden, spec.n_blocks, spec.activation)
    if spec.block == "tabular":
        return _blocks(spec.d, spec.block_hidden, spec.n_blocks, spec.activation) + mlp
    return mlp


def _affine_layers(layers: List[Layer], offset: int = 0) -> List[Tuple[Affine, int]]:
    """Affine layers with absolute parameter offsets, in forward order."""
    found = []
    pos = offset
    for layer in layers:
        if isinstance(layer, Affine):
            found.append((layer, pos))
        elif isinstance(layer, Residual):
            found.extend(_affine_layers(layer.inner, pos))
        pos += layer.n_params
    return found


def _init_params(net: Network, activation: str, rng: np.random.Generator, final_scale: float) -> np.ndarray:
    params = np.zeros(net.n_params)
    affines = _affine_layers(net.layers)
    for i, (layer, start) in enumerate(affines):
        fan_in, fan_out = layer.in_dim, layer.out_dim
        if activation == "relu":
            bound = np.sqrt(6.0 / fan_in)
        else:
            bound = np.sqrt(6.0 / (fan_in + fan_out))
        W = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        if i == len(affines) - 1:
            W *= final_scale
        params[start:start + fan_out * fan_in] = W.ravel()
    return params


@dataclass
class NetworkPair:
    """Encoder f: R^D -> R^d and decoder g: R^d -> R^D."""

    encoder: Network
    decoder: Network
    arch: ArchSpec

    def __post_init__(self):
        f, g = self.encoder, self.decoder
        if f.in_dim != g.out_dim or f.out_dim != g.in_dim:
            raise DimensionError(f"encoder {f.in_dim}->{f.out_dim} and decoder {g.in_dim}->{g.out_dim} do not pair")
        if f.out_dim > f.in_dim:
            raise DimensionError(f"latent dim {f.out_dim} exceeds data dim {f.in_dim}")

    @property
    def D(self) -> int:
        return self.encoder.in_dim

    @property
    def d(self) -> int:
        return self.encoder.out_dim

    def side(self, which: str) -> Network:
        if which == "encoder":
            return self.encoder
        if which == "decoder":
            return self.decoder
        raise ValueError(f"Unknown network side '{which}'. Must be 'encoder' or 'decoder'")

    def encode(self, x: np.ndarray) -> np.ndarray:
        return self.encoder(x)

    def decode(self, z: np.ndarray) -> np.ndarray:
        return self.decoder(z)

    def reconstruct(self, x: np.ndarray) -> np.ndarray:
        return self.decoder(self.encoder(x))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Decode n standard-normal latents."""
        return self.decoder(rng.standard_normal((n, self.d)))


def build(spec: ArchSpec) -> NetworkPair:
    """
    Build and initialize an encoder/decoder pair.

    Weights: Kaiming-uniform (fan-in) for ReLU, Xavier-uniform otherwise; biases zero.
    The final encoder layer is scaled by spec.encoder_scale (0.1 by default, so initial
    latents sit in the prior bulk).
    A tied pair draws A with N(0, 1/D) entries and sets the decoder to its pseudoinverse.

    Args:
        spec: Architecture

    Returns:
        NetworkPair, deterministic given spec.seed
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    encoder = Network(_encoder_layers(spec), name="encoder")
    decoder = Network(_decoder_layers(spec), name="decoder")
    if spec.tied:
        A = rng.standard_normal((spec.d, spec.D)) / np.sqrt(spec.D)
        encoder.set_params(np.concatenate([A.ravel(), np.zeros(spec.d)]))
        pair = NetworkPair(encoder=encoder, decoder=decoder, arch=spec)
        tie_linear_decoder(pair)
        return pair
    encoder.set_params(_init_params(encoder, spec.activation, rng, spec.encoder_scale))
    decoder.set_params(_init_params(decoder, spec.activation, rng, 1.0))
    return NetworkPair(encoder=encoder, decoder=decoder, arch=spec)


def linear_pair(A: np.ndarray, rank_tol: float = 1e-12) -> NetworkPair:
    """
    Linear pair f(x) = A x, g(z) = A† z (zero biases).

    Args:
        A: d×D full-rank matrix
        rank_tol: Relative singular value threshold for rank deficiency

    Returns:
        NetworkPair with mlp ArchSpec and no hidden layers
    """
    A = linalg.as_matrix(A, "A")
    d, D = A.shape
    spec = ArchSpec(D=D, d=d, hidden=(), block="mlp", activation="relu")
    _, s, _ = linalg.svd(A)
    if s[-1] <= rank_tol * s[0]:
        raise RankCollapseError(f"linear encoder is rank deficient (s_min/s_max = {s[-1] / s[0]:.3e})")
    encoder = Network([Affine(D, d)], name="encoder")
    decoder = Network([Affine(d, D)], name="decoder")
    encoder.set_params(np.concatenate([A.ravel(), np.zeros(d)]))
    decoder.set_params(np.concatenate([linalg.pinv(A).ravel(), np.zeros(D)]))
    return NetworkPair(encoder=encoder, decoder=decoder, arch=spec)


def _affine(net: Network) -> Tuple[np.ndarray, np.ndarray]:
    if len(net.layers) != 1 or not isinstance(net.layers[0], Affine):
        raise DimensionError(f"'{net.name}' is not a single affine layer")
    W, b = net.layers[0].split(net.params[net.layer_slice(0)])
    return W.copy(), b.copy()


def linear_weights(net: Network) -> np.ndarray:
    """Weight matrix of a single-affine network."""
    return _affine(net)[0]


def tie_linear_decoder(pair: NetworkPair) -> None:
    """Set g(z) = A†(z − a) for the linear encoder f(x) = A x + a, so f∘g is the identity."""
    A, a = _affine(pair.encoder)
    B = linalg.pinv(A)
    pair.decoder.set_params(np.concatenate([B.ravel(), -B @ a]))


def tied_linear_grads(pair: NetworkPair, grads: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """
    Fold decoder gradients into the encoder through the tie B = A†, c = −A† a.

    Uses dA† = −A† dA A† + (I − A†A) dAᵀ (AAᵀ)⁻¹ for full-row-rank A. The
    returned decoder gradient is zero; the decoder only moves by re-tying.
    """
    A, a = _affine(pair.encoder)
    d, D = A.shape
    B = linalg.pinv(A)
    G_B = grads['decoder'][:D * d].reshape(D, d)
    G_c = grads['decoder'][D * d:]
    G = G_B - np.outer(G_c, a)
    grad_A = -B.T @ G @ B.T + np.linalg.solve(A @ A.T, G.T) @ (np.eye(D) - B @ A)
    grad_a = -B.T @ G_c
    return {
        'encoder': grads['encoder'] + np.concatenate([grad_A.ravel(), grad_a]),
        'decoder': np.zeros_like(grads['decoder']),
    }


def get_params(pair: NetworkPair, which: str) -> np.ndarray:
    """Copy of the flat parameter vector of one side."""
    return pair.side(which).get_params()


def set_params(pair: NetworkPair, which: str, v: np.ndarray) -> None:
    """Replace the flat parameter vector of one side."""
    pair.side(which).set_params(v)


def param_count(spec: ArchSpec) -> Dict[str, int]:
    """Parameter counts per side without initializing weights."""
    return {
        'encoder': sum(layer.n_params for layer in _encoder_layers(spec)),
        'decoder': sum(layer.n_params for layer in _decoder_layers(spec)),
    }
