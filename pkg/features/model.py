# features/model.py

"""
Desk-scale segmentation model with hand-written backprop.

    image (3, H, W)
      -> conv3x3/2 + tanh -> conv3x3/2 + tanh      backbone, features F at stride 4
      -> 1x1 pixel classifier                       LogitMap (C, ceil(H/4), ceil(W/4))
      -> N_q query embeddings E                     class logits (E * mean(F)) Wc + bc, K = C + 1
                                                    mask logits E . F at feature resolution

Everything is float64 so the full model can be gradient-checked.
"""

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from config import Config
from features.losses import HflpConfig, LogitMap, QerConfig, cross_entropy_downsampled, hflp_loss, qer_loss
from features.matching import Assignment, hungarian, matching_cost, segments_from_mask
from util.errors import ValidationError
from util.numerics import downsample_nearest, finite_difference, log_softmax, relative_error, softmax, upsample_bilinear
from util.sample import Sample

logger = logging.getLogger(__name__)

LOSS_MODES = ("hflp", "downsampled-ce", "hflp+qer")
STRIDE = 4

PARAM_GROUPS = {
    "conv1.w": "backbone",
    "conv1.b": "backbone",
    "conv2.w": "backbone",
    "conv2.b": "backbone",
    "pixel.w": "head",
    "pixel.b": "head",
    "query.embed": "head",
    "query.cls_w": "head",
    "query.cls_b": "head",
}


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 2
    hidden: tuple[int, int] = (8, 16)
    num_queries: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValidationError(f"num_classes must be >= 2, got {self.num_classes}")
        if min(self.hidden) < 1 or self.num_queries < 1:
            raise ValidationError("hidden widths and num_queries must be >= 1")

    def to_dict(self) -> dict:
        return {**asdict(self), "hidden": list(self.hidden)}

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        data = dict(data)
        if "hidden" in data:
            data["hidden"] = tuple(data["hidden"])
        return cls(**data)


# gradient-check size: a few hundred parameters
TINY = ModelConfig(num_classes=3, hidden=(3, 4), num_queries=3)


@dataclass(frozen=True)
class LossConfig:
    mode: str = "hflp"
    hflp: HflpConfig = HflpConfig()
    qer: QerConfig = QerConfig()
    query_weight: float = 1.0
    w_class: float = 1.0
    w_dice: float = 1.0
    no_object_weight: float = 0.1

    def __post_init__(self):
        if self.mode not in LOSS_MODES:
            raise ValidationError(f"loss mode must be one of {LOSS_MODES}, got {self.mode!r}")
        if min(self.query_weight, self.w_class, self.w_dice, self.no_object_weight) < 0:
            raise ValidationError("loss weights must be non-negative")

    @property
    def ignore_label(self) -> int:
        return self.hflp.ignore_label

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "LossConfig":
        data = dict(data)
        if "hflp" in data:
            data["hflp"] = HflpConfig(**data["hflp"])
        if "qer" in data:
            data["qer"] = QerConfig(**data["qer"])
        return cls(**data)


# --- conv kernels ---

def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 2, pad: int = 1):
    """x (Cin, H, W), w (Cout, Cin, k, k) -> (Cout, Ho, Wo) plus the window view kept for backward."""
    k = w.shape[-1]
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    out = np.einsum("cijkl,ockl->oij", windows, w, optimize=True) + b[:, None, None]
    return out, windows


def conv2d_backward(dout: np.ndarray, windows: np.ndarray, w: np.ndarray, x_shape, stride: int = 2, pad: int = 1):
    dw = np.einsum("oij,cijkl->ockl", dout, windows, optimize=True)
    db = dout.sum(axis=(1, 2))
    cin, H, W = x_shape
    k = w.shape[-1]
    ho, wo = dout.shape[1:]
    dxp = np.zeros((cin, H + 2 * pad, W + 2 * pad))
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += np.einsum("oij,oc->cij", dout, w[:, :, i, j])
    return dxp[:, pad:pad + H, pad:pad + W], dw, db


@dataclass
class Forward:
    image: np.ndarray
    a1: np.ndarray
    windows1: np.ndarray
    windows2: np.ndarray
    features: np.ndarray
    pooled: np.ndarray
    logits: LogitMap
    class_logits: np.ndarray
    mask_logits: np.ndarray


@dataclass
class StepResult:
    loss: float
    grads: dict
    parts: dict
    assignment: Assignment | None
    matched_classes: list = field(default_factory=list)
    recognized_classes: list = field(default_factory=list)
    class_mass: np.ndarray | None = None  # (C,) summed query probability per real class


class ToyModel:
    def __init__(self, cfg: ModelConfig = ModelConfig(), params: dict | None = None):
        self.cfg = cfg
        self.params = params if params is not None else self.init_params(cfg)
        missing = set(PARAM_GROUPS) - set(self.params)
        if missing:
            raise ValidationError(f"parameters missing: {sorted(missing)}")

    @staticmethod
    def init_params(cfg: ModelConfig) -> dict:
        rng = np.random.default_rng(cfg.seed)
        f1, f2 = cfg.hidden
        C, K, nq = cfg.num_classes, cfg.num_classes + 1, cfg.num_queries

        def normal(shape, fan_in):
            return np.ascontiguousarray(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape))

        return {
            "conv1.w": normal((f1, 3, 3, 3), 27),
            "conv1.b": np.zeros(f1),
            "conv2.w": normal((f2, f1, 3, 3), 9 * f1),
            "conv2.b": np.zeros(f2),
            "pixel.w": normal((C, f2), f2),
            "pixel.b": np.zeros(C),
            "query.embed": normal((nq, f2), 1),
            "query.cls_w": normal((f2, K), f2),
            "query.cls_b": np.zeros(K),
        }

    @property
    def num_classes(self) -> int:
        return self.cfg.num_classes

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def group_of(self, name: str) -> str:
        return PARAM_GROUPS[name]

    def forward(self, image: np.ndarray) -> Forward:
        p = self.params
        x = image.astype(np.float64)
        z1, win1 = conv2d_forward(x, p["conv1.w"], p["conv1.b"])
        a1 = np.tanh(z1)
        z2, win2 = conv2d_forward(a1, p["conv2.w"], p["conv2.b"])
        feats = np.tanh(z2)
        logits = np.einsum("cf,fhw->chw", p["pixel.w"], feats) + p["pixel.b"][:, None, None]
        pooled = feats.mean(axis=(1, 2))
        class_logits = (p["query.embed"] * pooled) @ p["query.cls_w"] + p["query.cls_b"]
        mask_logits = np.einsum("qf,fhw->qhw", p["query.embed"], feats)
        return Forward(x, a1, win1, win2, feats, pooled, LogitMap(logits, STRIDE), class_logits, mask_logits)

    def predict(self, image: np.ndarray) -> np.ndarray:
        """Per-pixel argmax of the pixel logits projected to the image resolution."""
        fw = self.forward(image)
        H, W = image.shape[1:]
        return np.argmax(upsample_bilinear(fw.logits.tensor, H, W), axis=0).astype(np.int64)

    def _query_loss(self, fw: Forward, mask: np.ndarray, cfg: LossConfig, assignment: Assignment | None):
        C = self.num_classes
        nq = fw.class_logits.shape[0]
        h, w = fw.features.shape[1:]
        segments = segments_from_mask(downsample_nearest(mask, h, w), cfg.ignore_label)
        probs = softmax(fw.class_logits, axis=1)
        soft_masks = expit(fw.mask_logits)

        if segments and assignment is None:
            assignment = hungarian(matching_cost(probs, soft_masks, segments, cfg.w_class, cfg.w_dice))
        pairs = assignment.pairs if segments and assignment is not None else ()

        target = np.full(nq, C, dtype=np.int64)
        weight = np.full(nq, cfg.no_object_weight)
        for q, t in pairs:
            target[q] = segments[t][0]
            weight[q] = 1.0
        logp = log_softmax(fw.class_logits, axis=1)
        wsum = float(weight.sum())
        loss_cls = 0.0
        d_class = np.zeros_like(fw.class_logits)
        if wsum > 0:
            loss_cls = -float(np.sum(weight * logp[np.arange(nq), target])) / wsum
            onehot = np.zeros_like(probs)
            onehot[np.arange(nq), target] = 1.0
            d_class = weight[:, None] * (probs - onehot) / wsum

        loss_dice = 0.0
        d_mask = np.zeros_like(fw.mask_logits)
        if pairs:
            n_m = len(pairs)
            for q, t in pairs:
                m = soft_masks[q]
                r = segments[t][1].astype(np.float64)
                inter = float(np.sum(m * r))
                s = float(m.sum() + r.sum())
                loss_dice += (1.0 - 2.0 * inter / s) / n_m
                d_m = -(2.0 * r / s - 2.0 * inter / (s * s)) / n_m
                d_mask[q] = d_m * m * (1.0 - m)

        scale = cfg.query_weight
        loss = scale * (cfg.w_class * loss_cls + cfg.w_dice * loss_dice)
        d_class *= scale * cfg.w_class
        d_mask *= scale * cfg.w_dice

        matched = [int(segments[t][0]) for _, t in pairs]
        recognized = [int(segments[t][0]) for q, t in pairs if int(np.argmax(probs[q])) == segments[t][0]]
        parts = {"query_class": loss_cls, "query_dice": loss_dice}
        return loss, d_class, d_mask, assignment, matched, recognized, probs[:, :C].sum(axis=0), parts

    def loss_and_grad(self, sample: Sample, cfg: LossConfig = LossConfig(), assignment: Assignment | None = None) -> StepResult:
        """
        Total loss of one sample and its gradient for every parameter. When
        `assignment` is given the query matching is held fixed (gradient checks).
        """
        p = self.params
        fw = self.forward(sample.image)
        y = sample.mask

        if cfg.mode == "downsampled-ce":
            loss_pix, d_logits = cross_entropy_downsampled(fw.logits, y, cfg.ignore_label)
        else:
            loss_pix, d_logits = hflp_loss(fw.logits, y, cfg.hflp)

        loss_q, d_class, d_mask, assignment, matched, recognized, mass, parts = self._query_loss(fw, y, cfg, assignment)
        loss_qer = 0.0
        if cfg.mode == "hflp+qer":
            loss_qer, d_qer = qer_loss(fw.class_logits, cfg.qer)
            d_class = d_class + d_qer

        feats = fw.features
        h, w = feats.shape[1:]
        grads = {
            "pixel.w": np.einsum("chw,fhw->cf", d_logits, feats),
            "pixel.b": d_logits.sum(axis=(1, 2)),
        }
        d_feats = np.einsum("cf,chw->fhw", p["pixel.w"], d_logits)

        embed = p["query.embed"]
        scaled = embed * fw.pooled
        grads["query.cls_w"] = scaled.T @ d_class
        grads["query.cls_b"] = d_class.sum(axis=0)
        d_scaled = d_class @ p["query.cls_w"].T
        grads["query.embed"] = d_scaled * fw.pooled + np.einsum("qhw,fhw->qf", d_mask, feats)
        d_pooled = (d_scaled * embed).sum(axis=0)
        d_feats += np.einsum("qf,qhw->fhw", embed, d_mask) + d_pooled[:, None, None] / (h * w)

        d_z2 = d_feats * (1.0 - feats * feats)
        d_a1, grads["conv2.w"], grads["conv2.b"] = conv2d_backward(d_z2, fw.windows2, p["conv2.w"], fw.a1.shape)
        d_z1 = d_a1 * (1.0 - fw.a1 * fw.a1)
        _, grads["conv1.w"], grads["conv1.b"] = conv2d_backward(d_z1, fw.windows1, p["conv1.w"], fw.image.shape)

        parts.update(pixel=loss_pix, query=loss_q, qer=loss_qer)
        return StepResult(loss_pix + loss_q + loss_qer, grads, parts, assignment, matched, recognized, mass)


def gradcheck(model: ToyModel, sample: Sample, cfg: LossConfig = LossConfig(mode="hflp+qer"), step: float = 1e-5) -> dict:
    """Max relative error between analytic and central-difference gradients, per parameter block."""
    ref = model.loss_and_grad(sample, cfg)
    errors = {}
    for name in PARAM_GROUPS:
        numeric = finite_difference(lambda: model.loss_and_grad(sample, cfg, ref.assignment).loss, model.params[name], step)
        errors[name] = relative_error(ref.grads[name], numeric)
        logger.debug(f"gradcheck {name}: rel-err {errors[name]:.3e}")
    return errors


def gradcheck_sample(seed: int = Config.SEED, size=(8, 8), num_classes: int = 3) -> Sample:
    """A random image with a random label mask containing every class."""
    rng = np.random.default_rng(seed)
    H, W = size
    mask = rng.integers(0, num_classes, size=(H, W))
    mask.reshape(-1)[:num_classes] = np.arange(num_classes)
    return Sample(rng.random((3, H, W)), mask.astype(np.int64), {"seed": seed})
