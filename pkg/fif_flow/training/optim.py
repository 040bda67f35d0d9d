"""Adam with decoupled weight decay and the one-cycle learning-rate schedule."""

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from fif_flow.errors import DimensionError

SCHEDULES = ("onecycle", "constant")


@dataclass(frozen=True)
class AdamHyper:
    """Optimizer hyperparameters. `lr` is the peak rate under the one-cycle schedule."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    schedule: str = "onecycle"
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    max_grad_norm: Optional[float] = None

    def __post_init__(self):
        if self.schedule not in SCHEDULES:
            raise ValueError(f"Unknown schedule '{self.schedule}'. Must be one of {SCHEDULES}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0.0 < self.pct_start < 1.0:
            raise ValueError(f"pct_start must be in (0, 1), got {self.pct_start}")

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class OptimState:
    """Step counter, Adam moments per parameter group and schedule length."""

    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    total_steps: int = 1

    @classmethod
    def zeros_like(cls, params: Dict[str, np.ndarray], total_steps: int) -> "OptimState":
        return cls(
            step=0,
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            total_steps=max(1, int(total_steps)),
        )


def _annealing_cos(start: float, end: float, pct: float) -> float:
    return end + (start - end) / 2.0 * (math.cos(math.pi * pct) + 1.0)


def one_cycle_lr(step: int, total_steps: int, max_lr: float, pct_start: float = 0.3,
                 div_factor: float = 25.0, final_div_factor: float = 1e4) -> float:
    """
    Learning rate at `step` of a cosine one-cycle schedule.

    Warm up from max_lr/div_factor to max_lr over the first pct_start of the steps,
    then anneal to max_lr/(div_factor·final_div_factor) at the last step.
    """
    initial_lr = max_lr / div_factor
    min_lr = initial_lr / final_div_factor
    warm_end = float(pct_start * total_steps) - 1.0
    last = float(total_steps - 1)
    if warm_end <= 0.0:
        if last <= 0.0:
            return max_lr
        return _annealing_cos(max_lr, min_lr, min(step, last) / last)
    if step <= warm_end:
        return _annealing_cos(initial_lr, max_lr, step / warm_end)
    span = max(last - warm_end, 1e-12)
    return _annealing_cos(max_lr, min_lr, min((step - warm_end) / span, 1.0))


def current_lr(state: OptimState, hyper: AdamHyper) -> float:
    if hyper.schedule == "constant":
        return hyper.lr
    return one_cycle_lr(state.step, state.total_steps, hyper.lr, hyper.pct_start,
                        hyper.div_factor, hyper.final_div_factor)


def clip_by_global_norm(grads: Dict[str, np.ndarray], max_norm: Optional[float]) -> Tuple[Dict[str, np.ndarray], float]:
    """Scale all groups together so the joint L2 norm is at most max_norm."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: OptimState,
              hyper: AdamHyper) -> Tuple[Dict[str, np.ndarray], OptimState]:
    """
    One Adam update with decoupled weight decay.

    Args:
        params: Parameter vectors per group
        grads: Gradients with matching shapes
        state: Current optimizer state (not modified)
        hyper: Hyperparameters

    Returns:
        (new params, new state)
    """
    if set(params) != set(grads):
        raise DimensionError(f"parameter groups {sorted(params)} do not match gradient groups {sorted(grads)}")
    lr = current_lr(state, hyper)
    t = state.step + 1
    bc1 = 1.0 - hyper.beta1 ** t
    bc2 = 1.0 - hyper.beta2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for k in sorted(params):
        p, g = params[k], grads[k]
        if p.shape != g.shape:
            raise DimensionError(f"group '{k}': params {p.shape} vs grads {g.shape}")
        m = state.m.get(k, np.zeros_like(p))
        v = state.v.get(k, np.zeros_like(p))
        m = hyper.beta1 * m + (1.0 - hyper.beta1) * g
        v = hyper.beta2 * v + (1.0 - hyper.beta2) * g * g
        p = p * (1.0 - lr * hyper.weight_decay)
        p = p - lr * (m / bc1) / (np.sqrt(v / bc2) + hyper.eps)
        new_params[k], new_m[k], new_v[k] = p, m, v
    return new_params, OptimState(step=t, m=new_m, v=new_v, total_steps=state.total_steps)
