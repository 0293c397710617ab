# features/losses.py

"""
Loss kernels with analytic gradients: High-Fidelity Logit Projection (smoothed
cross-entropy on logits upsampled to label resolution), Query Entropy
Regularization, and the label-downsampling cross-entropy baseline.
All arithmetic is float64.
"""

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from config import Config
from util.errors import EmptySupervisionError, ShapeError, ValidationError
from util.numerics import (
    ceil_div, check_finite, downsample_nearest, log_softmax,
    upsample_bilinear, upsample_bilinear_backward,
)
from util.sample import validate_mask

logger = logging.getLogger(__name__)

QER_DIRECTIONS = ("entropy-max", "reverse")


@dataclass(frozen=True)
class LogitMap:
    """Per-pixel class scores (C, h, w) at 1/stride of the label resolution."""
    tensor: np.ndarray
    stride: int = 4

    def __post_init__(self):
        if self.tensor.ndim != 3:
            raise ShapeError(f"logit map must be (C, h, w), got {self.tensor.shape}")
        if self.tensor.shape[0] < 2:
            raise ShapeError(f"logit map needs at least 2 classes, got {self.tensor.shape[0]}")
        if self.stride < 1:
            raise ValidationError(f"stride must be >= 1, got {self.stride}")

    @property
    def classes(self) -> int:
        return self.tensor.shape[0]

    def check_compatible(self, label_shape: tuple[int, int]):
        H, W = label_shape
        _, h, w = self.tensor.shape
        if h != ceil_div(H, self.stride) or w != ceil_div(W, self.stride):
            raise ShapeError(
                f"logits {h}x{w} at stride {self.stride} do not match labels {H}x{W}",
                logits=(h, w), labels=(H, W), stride=self.stride,
            )


@dataclass(frozen=True)
class HflpConfig:
    epsilon: float = 0.1
    ignore_label: int = Config.IGNORE_LABEL
    align_corners: bool = False

    def __post_init__(self):
        if not 0.0 <= self.epsilon < 1.0:
            raise ValidationError(f"epsilon must lie in [0, 1), got {self.epsilon}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class QerConfig:
    lam: float = 0.1
    direction: str = "entropy-max"

    def __post_init__(self):
        if self.lam < 0:
            raise ValidationError(f"QER weight must be >= 0, got {self.lam}")
        if self.direction not in QER_DIRECTIONS:
            raise ValidationError(f"QER direction must be one of {QER_DIRECTIONS}, got {self.direction!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def smoothed_cross_entropy(logits: np.ndarray, labels: np.ndarray, epsilon: float, ignore_label: int):
    """
    Label-smoothed cross-entropy over every non-ignored pixel of a (C, H, W)
    logit tensor whose spatial size already equals the labels'. Returns the
    mean loss and its gradient w.r.t. the logits. The normalizer is the number
    of supervised pixels.
    """
    C = logits.shape[0]
    if logits.shape[1:] != labels.shape:
        raise ShapeError(f"logits {logits.shape[1:]} and labels {labels.shape} differ spatially")
    validate_mask(labels, C, ignore_label)
    valid = labels != ignore_label
    n = int(np.count_nonzero(valid))
    if n == 0:
        raise EmptySupervisionError("every pixel carries the ignore label; nothing to supervise")

    logp = log_softmax(logits.astype(np.float64, copy=False), axis=0)
    target = np.full(logits.shape, epsilon / C, dtype=np.float64)
    ys, xs = np.nonzero(valid)
    target[labels[ys, xs], ys, xs] += 1.0 - epsilon
    target[:, ~valid] = 0.0

    loss = -float(np.sum(target * logp)) / n
    grad = (np.exp(logp) - target) / n
    grad[:, ~valid] = 0.0
    return loss, grad


def hflp_loss(z: LogitMap, y: np.ndarray, cfg: HflpConfig = HflpConfig()):
    """
    Smoothed cross-entropy computed on logits bilinearly projected to the label
    grid. The gradient flows back to the low-resolution logits through the
    transposed interpolation weights.
    """
    z.check_compatible(y.shape)
    check_finite(z.tensor, "logits")
    H, W = y.shape
    _, h, w = z.tensor.shape
    up = upsample_bilinear(z.tensor.astype(np.float64, copy=False), H, W, cfg.align_corners)
    loss, grad_up = smoothed_cross_entropy(up, y, cfg.epsilon, cfg.ignore_label)
    grad_z = upsample_bilinear_backward(grad_up, h, w, cfg.align_corners)
    return max(loss, 0.0), grad_z


def cross_entropy_downsampled(z: LogitMap, y: np.ndarray, ignore_label: int = Config.IGNORE_LABEL):
    """Baseline: labels nearest-downsampled to the logit grid, plain cross-entropy."""
    z.check_compatible(y.shape)
    check_finite(z.tensor, "logits")
    _, h, w = z.tensor.shape
    y_small = downsample_nearest(y, h, w)
    loss, grad_z = smoothed_cross_entropy(z.tensor, y_small, 0.0, ignore_label)
    return max(loss, 0.0), grad_z


def qer_loss(q: np.ndarray, cfg: QerConfig = QerConfig()):
    """
    Query Entropy Regularization over (N_queries, K) class logits.
    entropy-max: lam * mean_n KL(P_n || U) = lam * mean_n (ln K - H(P_n)).
    reverse:     lam * mean_n KL(U || P_n).
    """
    if q.ndim != 2:
        raise ShapeError(f"query logits must be (N, K), got {q.shape}")
    N, K = q.shape
    if K < 2:
        raise ValidationError(f"QER needs K >= 2 classes, got {K}")
    if N == 0:
        return 0.0, np.zeros_like(q, dtype=np.float64)
    check_finite(q, "query logits")
    if cfg.lam == 0:
        return 0.0, np.zeros_like(q, dtype=np.float64)

    logp = log_softmax(q.astype(np.float64, copy=False), axis=1)
    p = np.exp(logp)
    log_k = math.log(K)
    if cfg.direction == "entropy-max":
        neg_entropy = np.sum(p * logp, axis=1)
        per_query = log_k + neg_entropy
        grad = p * (logp - neg_entropy[:, None])
        upper = cfg.lam * log_k
    else:
        per_query = -log_k - np.mean(logp, axis=1)
        grad = p - 1.0 / K
        upper = math.inf

    loss = cfg.lam * float(np.mean(per_query))
    loss = min(max(loss, 0.0), upper)
    return loss, grad * (cfg.lam / N)
