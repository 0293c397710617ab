# features/optim.py

"""AdamW with decoupled weight decay and the two-group cosine schedule."""

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from util.errors import NonFiniteError, ShapeError, ValidationError

logger = logging.getLogger(__name__)

GROUPS = ("backbone", "head")


@dataclass(frozen=True)
class Schedule:
    total_steps: int
    lr_backbone_0: float = 1e-4
    lr_head_0: float = 1e-3
    lr_min: float = 1e-6

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValidationError(f"total_steps must be >= 1, got {self.total_steps}")
        if min(self.lr_backbone_0, self.lr_head_0, self.lr_min) < 0:
            raise ValidationError("learning rates must be non-negative")
        if self.lr_min > min(self.lr_backbone_0, self.lr_head_0):
            raise ValidationError(f"lr_min {self.lr_min} exceeds a group's initial rate")

    def initial(self, group: str) -> float:
        if group == "backbone":
            return self.lr_backbone_0
        if group == "head":
            return self.lr_head_0
        raise ValidationError(f"unknown parameter group {group!r}; expected one of {GROUPS}")

    def to_dict(self) -> dict:
        return asdict(self)


def anneal_fraction(t: int, total: int) -> float:
    """(1 + cos(pi t / T)) / 2: 1 at t = 0, 0 at t = T, shared by every group."""
    if t < 0 or t > total:
        raise ValidationError(f"step {t} outside the schedule [0, {total}]")
    return 0.5 * (1.0 + math.cos(math.pi * t / total))


def cosine_lr(t: int, s: Schedule, group: str) -> float:
    lr0 = s.initial(group)
    f = anneal_fraction(t, s.total_steps)
    return lr0 * f + s.lr_min * (1.0 - f)


@dataclass(frozen=True)
class AdamWConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.1

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValidationError(f"betas must lie in [0, 1), got ({self.beta1}, {self.beta2})")
        if self.eps <= 0 or self.weight_decay < 0:
            raise ValidationError("eps must be > 0 and weight_decay >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamWState":
        return cls(0, {k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adamw_step(params: dict, grads: dict, state: AdamWState, lr, cfg: AdamWConfig = AdamWConfig()):
    """
    One AdamW update over named parameter arrays, in place. `lr` is a float or a
    {name: lr} mapping (per-group rates). The decay p <- p - lr*wd*p is applied
    on its own, before the moment-based step. A non-finite gradient aborts the
    step before anything is modified.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None or g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} missing or shaped {None if g is None else g.shape}, expected {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name!r} at step {state.step + 1}", param=name,
                                 step=state.step + 1)
    if not state.m:
        state.m = {k: np.zeros_like(p) for k, p in params.items()}
        state.v = {k: np.zeros_like(p) for k, p in params.items()}

    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        rate = lr[name] if isinstance(lr, dict) else lr
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        if cfg.weight_decay:
            p -= rate * cfg.weight_decay * p
        p -= rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
    return params, state


def global_grad_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
