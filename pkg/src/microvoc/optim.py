"""Adam optimizer, L2 weight regularization and the plateau LR schedule.

The update uses the canonical bias-corrected efficient form:

    m <- b1*m + (1-b1)*g
    v <- b2*v + (1-b2)*g^2
    W <- W - alpha_t * m / (sqrt(v) + eps),   alpha_t = alpha * sqrt(1-b2^t) / (1-b1^t)

with t incremented once per step before computing alpha_t.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, StateError
from .tensor import Tensor4

# t is serialized as uint64 in checkpoints
MAX_STEPS = 2**64 - 1


@dataclass(frozen=True)
class AdamConfig:
    alpha: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    lam: float = 5e-4  # L2 strength; applied to weights only by default

    def __post_init__(self):
        if not 0.0 <= self.beta1 < 1.0:
            raise ValueError(f"beta1 must be in [0, 1), got {self.beta1}")
        if not 0.0 <= self.beta2 < 1.0:
            raise ValueError(f"beta2 must be in [0, 1), got {self.beta2}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")


@dataclass
class AdamState:
    """First/second moment accumulators per parameter tensor, plus the
    shared step counter. Keys identify parameter tensors."""

    m: dict[str, Tensor4] = field(default_factory=dict)
    v: dict[str, Tensor4] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, params: dict[str, Tensor4]) -> "AdamState":
        state = cls()
        for key, p in params.items():
            state.m[key] = Tensor4(np.zeros(p.dims, dtype=np.float64))
            state.v[key] = Tensor4(np.zeros(p.dims, dtype=np.float64))
        return state


def adam_step(params: dict[str, Tensor4], grads: dict[str, Tensor4],
              state: AdamState, cfg: AdamConfig) -> None:
    """One Adam step over every tensor in ``params``, in place.

    Moments are kept in float64 regardless of parameter precision so the
    update arithmetic is identical between precisions.
    """
    if state.t >= MAX_STEPS:
        raise StateError("Adam step counter exhausted")
    missing = set(params) - set(grads)
    if missing:
        raise ShapeError(f"no gradient supplied for params {sorted(missing)}")
    state.t += 1
    t = state.t
    alpha_t = cfg.alpha * math.sqrt(1.0 - cfg.beta2**t) / (1.0 - cfg.beta1**t)
    for key, p in params.items():
        g = grads[key]
        if g.dims != p.dims:
            raise ShapeError(f"grad dims {g.dims} != param dims {p.dims} for {key!r}")
        if key not in state.m:
            state.m[key] = Tensor4(np.zeros(p.dims, dtype=np.float64))
            state.v[key] = Tensor4(np.zeros(p.dims, dtype=np.float64))
        m, v = state.m[key].data, state.v[key].data
        if m.shape != p.dims:
            raise ShapeError(f"state dims {m.shape} != param dims {p.dims} for {key!r}")
        gd = g.data.astype(np.float64, copy=False)
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * gd
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (gd * gd)
        update = alpha_t * m / (np.sqrt(v) + cfg.epsilon)
        p.data -= update.astype(p.data.dtype, copy=False)


def apply_l2(params: dict[str, Tensor4], grads: dict[str, Tensor4], lam: float,
             include_biases: bool = False) -> float:
    """Add 2*lam*W to each weight gradient in place and return the loss
    penalty lam * sum ||W||^2.

    Bias tensors (keys ending in '.b') are skipped unless
    ``include_biases`` is set.
    """
    if lam < 0:
        raise ValueError(f"lam must be >= 0, got {lam}")
    if lam == 0.0:
        return 0.0
    penalty = 0.0
    for key, p in params.items():
        if not include_biases and key.endswith(".b"):
            continue
        w = p.data
        penalty += lam * float(np.dot(w.ravel(), w.ravel()))
        if key in grads:
            grads[key].data += (2.0 * lam * w).astype(grads[key].data.dtype, copy=False)
    return penalty


@dataclass
class SchedulerConfig:
    metric: str = "val_acc"  # 'val_acc' (higher is better) or 'train_loss' (lower)
    patience: int = 5
    min_delta: float = 1e-3
    factor: float = 10.0
    floor: float = 1e-8

    def __post_init__(self):
        if self.metric not in ("val_acc", "train_loss"):
            raise ValueError(f"unknown scheduler metric {self.metric!r}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if not self.factor > 1:
            raise ValueError(f"factor must be > 1, got {self.factor}")


class PlateauScheduler:
    """Divides the learning rate by ``factor`` after ``patience``
    consecutive observations without an improvement of more than
    ``min_delta``, never dropping below ``floor``. The first observation
    only sets the baseline."""

    def __init__(self, cfg: SchedulerConfig):
        self.cfg = cfg
        self.best: float | None = None
        self.bad_count: int = 0

    def _improved(self, value: float) -> bool:
        if self.cfg.metric == "val_acc":
            return value > self.best + self.cfg.min_delta
        return value < self.best - self.cfg.min_delta

    def observe(self, metric_value: float, current_alpha: float) -> float:
        """Feed one metric observation; returns the (possibly reduced) alpha."""
        if self.best is None:
            self.best = metric_value
            return current_alpha
        if self._improved(metric_value):
            self.best = metric_value
            self.bad_count = 0
            return current_alpha
        self.bad_count += 1
        if self.bad_count >= self.cfg.patience:
            # reset the improvement window so a stalled metric triggers
            # exactly one drop per patience window
            self.bad_count = 0
            self.best = metric_value
            return max(current_alpha / self.cfg.factor, self.cfg.floor)
        return current_alpha
