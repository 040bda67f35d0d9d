"""
Reverse- and forward-mode differentiation for layered dense networks.

Inputs are batched row-wise: a single vector has shape (n,), a batch has shape (B, n).
A forward pass may carry a tangent alongside the primal (forward mode); the recorded
tape then supports a reverse pass that takes cotangents for both the primal output and
the tangent output, which yields parameter gradients of expressions like c·(J v).
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from fif_flow.errors import DimensionError, NumericalError, StaleTapeError


# ---------------------------------------------------------------------------
# Activations: value, first and second derivative
# ---------------------------------------------------------------------------

def _relu(a):
    return np.maximum(a, 0.0), (a > 0).astype(a.dtype), np.zeros_like(a)


def _tanh(a):
    t = np.tanh(a)
    d1 = 1.0 - t * t
    return t, d1, -2.0 * t * d1


def _silu(a):
    s = 0.5 * (1.0 + np.tanh(0.5 * a))
    d1 = s * (1.0 + a * (1.0 - s))
    d2 = s * (1.0 - s) * (2.0 + a * (1.0 - 2.0 * s))
    return a * s, d1, d2


def _identity(a):
    return a, np.ones_like(a), np.zeros_like(a)


ACTIVATIONS: Dict[str, Callable] = {
    "relu": _relu,
    "tanh": _tanh,
    "silu": _silu,
    "identity": _identity,
}


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

class Layer:
    """Primitive with a flat parameter slice, forward (primal + tangent) and reverse rules."""

    name = "layer"
    n_params = 0

    def __init__(self, in_dim: int, out_dim: int):
        self.in_dim = in_dim
        self.out_dim = out_dim

    def forward(self, p, h, t):
        raise NotImplementedError

    def backward(self, p, cache, gy, gty):
        raise NotImplementedError


class Affine(Layer):
    """y = W h + b with W stored row-major, followed by b, in the parameter slice."""

    name = "affine"

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__(in_dim, out_dim)
        self.n_params = out_dim * in_dim + out_dim

    def split(self, p: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        n_w = self.out_dim * self.in_dim
        return p[:n_w].reshape(self.out_dim, self.in_dim), p[n_w:]

    def forward(self, p, h, t):
        W, b = self.split(p)
        y = h @ W.T + b
        ty = None if t is None else t @ W.T
        return y, ty, (h, t)

    def backward(self, p, cache, gy, gty):
        W, _ = self.split(p)
        h, t = cache
        gW = gy.T @ h
        if gty is not None and t is not None:
            gW = gW + gty.T @ t
        gb = gy.sum(axis=0)
        gh = gy @ W
        gth = None if gty is None else gty @ W
        return gh, gth, np.concatenate([gW.ravel(), gb])


class Activation(Layer):
    """Elementwise nonlinearity."""

    name = "activation"

    def __init__(self, dim: int, kind: str):
        if kind not in ACTIVATIONS:
            raise ValueError(f"Unknown activation '{kind}'. Must be one of {sorted(ACTIVATIONS)}")
        super().__init__(dim, dim)
        self.kind = kind
        self.fn = ACTIVATIONS[kind]

    def forward(self, p, h, t):
        y, d1, d2 = self.fn(h)
        ty = None if t is None else d1 * t
        return y, ty, (t, d1, d2)

    def backward(self, p, cache, gy, gty):
        t, d1, d2 = cache
        gh = gy * d1
        gth = None
        if gty is not None:
            if t is not None:
                gh = gh + gty * d2 * t
            gth = gty * d1
        return gh, gth, np.zeros(0)


class StopGradient(Layer):
    """Identity in the forward pass; blocks tangents and cotangents."""

    name = "stop_gradient"

    def __init__(self, dim: int):
        super().__init__(dim, dim)

    def forward(self, p, h, t):
        ty = None if t is None else np.zeros_like(t)
        return h, ty, h.shape

    def backward(self, p, cache, gy, gty):
        gth = None if gty is None else np.zeros(cache)
        return np.zeros(cache), gth, np.zeros(0)


class Slice(Layer):
    """Keep columns [start, stop) of the input."""

    name = "slice"

    def __init__(self, in_dim: int, start: int, stop: int):
        if not 0 <= start < stop <= in_dim:
            raise DimensionError(f"invalid slice [{start}, {stop}) of dim {in_dim}")
        super().__init__(in_dim, stop - start)
        self.start = start
        self.stop = stop

    def forward(self, p, h, t):
        ty = None if t is None else t[:, self.start:self.stop]
        return h[:, self.start:self.stop], ty, h.shape[0]

    def backward(self, p, cache, gy, gty):
        gh = np.zeros((cache, self.in_dim))
        gh[:, self.start:self.stop] = gy
        gth = None
        if gty is not None:
            gth = np.zeros((cache, self.in_dim))
            gth[:, self.start:self.stop] = gty
        return gh, gth, np.zeros(0)


class Pad(Layer):
    """Concatenate `extra` zero columns to the input."""

    name = "pad"

    def __init__(self, in_dim: int, extra: int):
        super().__init__(in_dim, in_dim + extra)
        self.extra = extra

    def forward(self, p, h, t):
        zeros = np.zeros((h.shape[0], self.extra))
        y = np.concatenate([h, zeros], axis=1)
        ty = None if t is None else np.concatenate([t, zeros], axis=1)
        return y, ty, None

    def backward(self, p, cache, gy, gty):
        gth = None if gty is None else gty[:, :self.in_dim]
        return gy[:, :self.in_dim], gth, np.zeros(0)


def _layout(layers: Sequence[Layer]) -> List[Tuple[int, int]]:
    offsets, pos = [], 0
    for layer in layers:
        offsets.append((pos, pos + layer.n_params))
        pos += layer.n_params
    return offsets


def _forward_seq(layers, offsets, params, h, t):
    records = []
    for layer, (a, b) in zip(layers, offsets):
        h, t, cache = layer.forward(params[a:b], h, t)
        records.append(cache)
    return h, t, records


def _backward_seq(layers, offsets, params, records, gy, gty):
    grad = np.zeros(offsets[-1][1] if offsets else 0)
    for layer, (a, b), cache in zip(reversed(layers), reversed(offsets), reversed(records)):
        gy, gty, g = layer.backward(params[a:b], cache, gy, gty)
        if b > a:
            grad[a:b] += g
    return gy, gty, grad


class Residual(Layer):
    """y = h + inner(h), with `inner` a sequence of layers mapping dim -> dim."""

    name = "residual"

    def __init__(self, inner: Sequence[Layer]):
        dim = inner[0].in_dim
        if inner[-1].out_dim != dim:
            raise DimensionError(f"residual inner path maps {dim} -> {inner[-1].out_dim}")
        super().__init__(dim, dim)
        self.inner = list(inner)
        self.offsets = _layout(self.inner)
        self.n_params = self.offsets[-1][1]

    def forward(self, p, h, t):
        y, ty, records = _forward_seq(self.inner, self.offsets, p, h, t)
        return h + y, (None if t is None else t + ty), records

    def backward(self, p, cache, gy, gty):
        gh, gth, grad = _backward_seq(self.inner, self.offsets, p, cache, gy, gty)
        return gy + gh, (None if gty is None else gty + gth), grad


# ---------------------------------------------------------------------------
# Networks and tapes
# ---------------------------------------------------------------------------

class Network:
    """A chain of layers with a single flat parameter vector."""

    def __init__(self, layers: Sequence[Layer], name: str = "network"):
        if not layers:
            raise DimensionError("a network needs at least one layer")
        for prev, nxt in zip(layers[:-1], layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise DimensionError(f"layer dims do not chain: {prev.out_dim} -> {nxt.in_dim}")
        self.layers = list(layers)
        self.name = name
        self.offsets = _layout(self.layers)
        self.in_dim = self.layers[0].in_dim
        self.out_dim = self.layers[-1].out_dim
        self.n_params = self.offsets[-1][1]
        self._params = np.zeros(self.n_params)
        self.version = 0

    @property
    def params(self) -> np.ndarray:
        return self._params

    def get_params(self) -> np.ndarray:
        return self._params.copy()

    def set_params(self, v: np.ndarray) -> None:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.n_params,):
            raise DimensionError(f"{self.name} expects {self.n_params} parameters, got shape {v.shape}")
        self._params = v.copy()
        self.version += 1

    def layer_slice(self, index: int) -> slice:
        a, b = self.offsets[index]
        return slice(a, b)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        X, single = _as_batch(x, self.in_dim, "input")
        y, _, _ = _forward_seq(self.layers, self.offsets, self._params, X, None)
        return y[0] if single else y


@dataclass
class DualVector:
    """Primal value paired with a tangent of the same shape."""

    primal: np.ndarray
    tangent: np.ndarray

    def __post_init__(self):
        if np.shape(self.primal) != np.shape(self.tangent):
            raise DimensionError(f"primal {np.shape(self.primal)} and tangent {np.shape(self.tangent)} differ")


@dataclass
class Tape:
    """Recorded forward pass; consumed by exactly one reverse pass."""

    network: Network
    nodes: List[str]
    values: List[object]
    params: np.ndarray
    version: int
    single: bool
    batch_size: int
    has_tangent: bool
    consumed: bool = field(default=False)


def _as_batch(x, dim: int, what: str) -> Tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr, single = arr[None, :], True
    elif arr.ndim == 2:
        single = False
    else:
        raise DimensionError(f"{what} must be 1-D or 2-D, got shape {arr.shape}")
    if arr.shape[1] != dim:
        raise DimensionError(f"{what} has dim {arr.shape[1]}, expected {dim}")
    return arr, single


def _record(net: Network, x, tangent) -> Tuple[np.ndarray, Optional[np.ndarray], Tape]:
    X, single = _as_batch(x, net.in_dim, "input")
    T = None
    if tangent is not None:
        T, _ = _as_batch(tangent, net.in_dim, "tangent")
        if T.shape != X.shape:
            raise DimensionError(f"tangent shape {T.shape} does not match input {X.shape}")
    y, ty, records = _forward_seq(net.layers, net.offsets, net.params, X, T)
    tape = Tape(
        network=net,
        nodes=[layer.name for layer in net.layers],
        values=records,
        params=net.params,
        version=net.version,
        single=single,
        batch_size=X.shape[0],
        has_tangent=T is not None,
    )
    return y, ty, tape


def eval(net: Network, x: np.ndarray) -> Tuple[np.ndarray, Tape]:
    """
    Forward pass with recording.

    Args:
        net: Network side (encoder or decoder)
        x: Input vector (n,) or batch (B, n)

    Returns:
        (y, tape) with y shaped like x along the leading axis
    """
    y, _, tape = _record(net, x, None)
    return (y[0] if tape.single else y), tape


def eval_dual(net: Network, x: np.ndarray, tangent: np.ndarray) -> Tuple[DualVector, Tape]:
    """Forward pass carrying a tangent; the tape accepts tangent cotangents in vjp."""
    y, ty, tape = _record(net, x, tangent)
    if tape.single:
        y, ty = y[0], ty[0]
    return DualVector(primal=y, tangent=ty), tape


def vjp(tape: Tape, cotangent: np.ndarray, tangent_cotangent: np.ndarray = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Reverse pass over a recorded tape.

    For a plain tape this returns (cᵀ J_input, cᵀ J_params) summed over batch rows.
    For a dual tape, `tangent_cotangent` u adds the parameter gradient of uᵀ(J v),
    where v is the tangent recorded in eval_dual.

    Args:
        tape: Tape from eval or eval_dual (single use)
        cotangent: Cotangent for the primal output (zeros allowed)
        tangent_cotangent: Cotangent for the tangent output (dual tapes only)

    Returns:
        (input_grad, param_grad)
    """
    if tape.consumed:
        raise StaleTapeError("tape has already been consumed by a reverse pass")
    if tape.version != tape.network.version:
        raise StaleTapeError(f"parameters of '{tape.network.name}' changed after the tape was recorded")
    if tangent_cotangent is not None and not tape.has_tangent:
        raise StaleTapeError("tangent cotangent given for a tape recorded without a tangent")
    net = tape.network
    G, _ = _as_batch(cotangent, net.out_dim, "cotangent")
    if G.shape[0] != tape.batch_size:
        raise DimensionError(f"cotangent batch {G.shape[0]} does not match tape batch {tape.batch_size}")
    GT = None
    if tangent_cotangent is not None:
        GT, _ = _as_batch(tangent_cotangent, net.out_dim, "tangent cotangent")
        if GT.shape != G.shape:
            raise DimensionError(f"tangent cotangent shape {GT.shape} does not match {G.shape}")
    tape.consumed = True
    gx, _, grad = _backward_seq(net.layers, net.offsets, tape.params, tape.values, G, GT)
    return (gx[0] if tape.single else gx), grad


def jvp(net: Network, x: np.ndarray, tangent: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Forward-mode product: returns (y, J v)."""
    dual, _ = eval_dual(net, x, tangent)
    return dual.primal, dual.tangent


def full_jacobian(net: Network, x: np.ndarray, mode: str = "jvp") -> np.ndarray:
    """
    Dense input Jacobian.

    Args:
        net: Network side
        x: Point (n,) or batch (B, n)
        mode: 'jvp' assembles columns from basis tangents, 'vjp' assembles rows

    Returns:
        (m, n) Jacobian, or (B, m, n) for a batch
    """
    X, single = _as_batch(x, net.in_dim, "input")
    B, n, m = X.shape[0], net.in_dim, net.out_dim
    if mode == "jvp":
        reps = np.repeat(X, n, axis=0)
        basis = np.tile(np.eye(n), (B, 1))
        _, cols = jvp(net, reps, basis)
        J = cols.reshape(B, n, m).transpose(0, 2, 1)
    elif mode == "vjp":
        reps = np.repeat(X, m, axis=0)
        _, tape = eval(net, reps)
        rows, _ = vjp(tape, np.tile(np.eye(m), (B, 1)))
        J = rows.reshape(B, m, n)
    else:
        raise ValueError(f"Unknown Jacobian mode '{mode}'. Must be 'jvp' or 'vjp'")
    return J[0] if single else J


def finite_diff_grad(scalar_fn: Callable[[np.ndarray], float], params: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """
    Central-difference gradient of a deterministic scalar function.

    Args:
        scalar_fn: Function of a flat parameter vector
        params: Evaluation point
        h: Step size

    Returns:
        Gradient vector of the same length as params
    """
    p = np.array(params, dtype=np.float64)
    grad = np.zeros_like(p)
    for i in range(p.size):
        orig = p[i]
        p[i] = orig + h
        up = float(scalar_fn(p))
        p[i] = orig - h
        down = float(scalar_fn(p))
        p[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericalError(f"non-finite function value at parameter index {i}")
        grad[i] = (up - down) / (2.0 * h)
    return grad


# ---------------------------------------------------------------------------
# Scalar values with attached parameter gradients
# ---------------------------------------------------------------------------

Number = Union[int, float]


class Traced:
    """
    Scalar value carrying gradients with respect to named parameter groups.

    Arithmetic follows the usual rules (product rule for *); stop_gradient drops
    every gradient while keeping the value.
    """

    __slots__ = ("value", "grads")

    def __init__(self, value: float, grads: Optional[Dict[str, np.ndarray]] = None):
        self.value = float(value)
        self.grads = {k: np.asarray(v, dtype=np.float64) for k, v in (grads or {}).items()}

    @classmethod
    def constant(cls, value: float) -> "Traced":
        return cls(value)

    def grad(self, group: str, size: int) -> np.ndarray:
        """Gradient for a group, zeros when the value does not depend on it."""
        g = self.grads.get(group)
        return np.zeros(size) if g is None else g

    def _merge(self, other: "Traced", a: float, b: float) -> Dict[str, np.ndarray]:
        out = {}
        for k in set(self.grads) | set(other.grads):
            g = 0.0
            if k in self.grads:
                g = g + a * self.grads[k]
            if k in other.grads:
                g = g + b * other.grads[k]
            out[k] = g
        return out

    def __add__(self, other):
        if not isinstance(other, Traced):
            return Traced(self.value + float(other), self.grads)
        return Traced(self.value + other.value, self._merge(other, 1.0, 1.0))

    __radd__ = __add__

    def __neg__(self):
        return Traced(-self.value, {k: -g for k, g in self.grads.items()})

    def __sub__(self, other):
        return self + (-other if isinstance(other, Traced) else -float(other))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if not isinstance(other, Traced):
            c = float(other)
            return Traced(self.value * c, {k: c * g for k, g in self.grads.items()})
        return Traced(self.value * other.value, self._merge(other, other.value, self.value))

    __rmul__ = __mul__

    def __truediv__(self, other: Number):
        return self * (1.0 / float(other))

    def __float__(self):
        return self.value

    def __repr__(self):
        return f"Traced(value={self.value!r}, groups={sorted(self.grads)})"


def stop_gradient(v: Union[Traced, np.ndarray, Number]):
    """Identity on values; a Traced input loses all gradients."""
    if isinstance(v, Traced):
        return Traced(v.value)
    return np.array(v, dtype=np.float64, copy=True)
