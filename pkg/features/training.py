# features/training.py

"""
The toy training loop: two-group AdamW under a shared cosine schedule, HFLP or
label-downsampling pixel loss, query matching with optional QER, per-step
gradient-norm logging and held-out evaluation on synthetic texture scenes.
"""

import copy
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from config import Config
from database.store import save_checkpoint
from features.augmentation import apply as augment_sample
from features.augmentation import preset as augment_preset_config
from features.metrics import BoundaryAccumulator, ConfusionMatrix, summarize
from features.model import LossConfig, ModelConfig, ToyModel
from features.optim import AdamWConfig, AdamWState, Schedule, adamw_step, cosine_lr, global_grad_norm
from features.scenes import make_dataset
from util.errors import DivergenceError, EmptySupervisionError, NonFiniteError, ValidationError

logger = logging.getLogger(__name__)

EPOCH_PRESETS = {"original": 20, "custom": 40}
REFERENCE_BATCH_SIZE = 256
DEFAULT_STEPS = 200
AUGMENT_PRESETS = ("none", "mask2former", "segformer")
BACKGROUND_CLASS = 0


@dataclass(frozen=True)
class DataConfig:
    kind: str = "voronoi"
    train_count: int = 32
    eval_count: int = 8
    size: tuple[int, int] = (64, 64)
    n_regions: int = 4
    class_set: tuple[int, ...] = (0, 1)
    class_weights: tuple[float, ...] | None = None
    easy: bool = True

    def __post_init__(self):
        if self.kind not in ("voronoi", "thin"):
            raise ValidationError(f"scene kind must be 'voronoi' or 'thin', got {self.kind!r}")
        if self.train_count < 1 or self.eval_count < 1:
            raise ValidationError("train_count and eval_count must be >= 1")
        if not self.class_set:
            raise ValidationError("class_set must name at least one class")

    def scene_kwargs(self) -> dict:
        kwargs = {"size": tuple(self.size), "class_set": tuple(self.class_set), "easy": self.easy}
        if self.kind == "voronoi":
            kwargs.update(n_regions=self.n_regions, class_weights=self.class_weights)
        return kwargs


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = ModelConfig()
    loss: LossConfig = LossConfig()
    adamw: AdamWConfig = AdamWConfig()
    data: DataConfig = DataConfig()
    lr_backbone: float = 1e-4
    lr_head: float = 1e-3
    lr_min: float = 1e-6
    batch_size: int = 8
    steps: int | None = None
    epochs: int | None = None
    epoch_preset: str | None = None
    augment_preset: str = "none"
    seed: int = Config.SEED
    checkpoint_every: int = 0
    boundary_dfrac: float = Config.BOUNDARY_DFRAC

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.augment_preset not in AUGMENT_PRESETS:
            raise ValidationError(f"augment_preset must be one of {AUGMENT_PRESETS}, got {self.augment_preset!r}")
        if self.epoch_preset is not None and self.epoch_preset not in EPOCH_PRESETS:
            raise ValidationError(f"epoch_preset must be one of {sorted(EPOCH_PRESETS)}, got {self.epoch_preset!r}")
        if self.steps is not None and (self.epochs is not None or self.epoch_preset is not None):
            raise ValidationError("set either steps or epochs/epoch_preset, not both")
        if self.epochs is not None and self.epoch_preset is not None:
            raise ValidationError("set either epochs or epoch_preset, not both")
        for name in ("steps", "epochs"):
            value = getattr(self, name)
            if value is not None and value < 1:
                raise ValidationError(f"{name} must be >= 1, got {value}")
        if max(self.data.class_set) >= self.model.num_classes:
            raise ValidationError(
                f"scene classes {list(self.data.class_set)} do not fit a {self.model.num_classes}-class model")

    @property
    def total_steps(self) -> int:
        if self.steps is not None:
            return self.steps
        if self.epoch_count is None:
            return DEFAULT_STEPS
        return self.epoch_count * math.ceil(self.data.train_count / self.batch_size)

    @property
    def epoch_count(self) -> int | None:
        if self.epochs is not None:
            return self.epochs
        return EPOCH_PRESETS.get(self.epoch_preset)

    def schedule(self) -> Schedule:
        return Schedule(total_steps=self.total_steps, lr_backbone_0=self.lr_backbone, lr_head_0=self.lr_head,
                        lr_min=self.lr_min)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["model"] = self.model.to_dict()
        out["data"]["size"] = list(self.data.size)
        out["data"]["class_set"] = list(self.data.class_set)
        out["data"]["class_weights"] = list(self.data.class_weights) if self.data.class_weights else None
        out["total_steps"] = self.total_steps
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        data.pop("total_steps", None)
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown training settings: {sorted(unknown)}")
        try:
            if "model" in data:
                data["model"] = ModelConfig.from_dict(data["model"])
            if "loss" in data:
                data["loss"] = LossConfig.from_dict(data["loss"])
            if "adamw" in data:
                data["adamw"] = AdamWConfig(**data["adamw"])
            if "data" in data:
                d = dict(data["data"])
                for key in ("size", "class_set", "class_weights"):
                    if d.get(key) is not None:
                        d[key] = tuple(d[key])
                data["data"] = DataConfig(**d)
            return cls(**data)
        except TypeError as e:
            raise ValidationError(f"invalid training config: {e}")


@dataclass
class QueryUsage:
    """
    Per-class query usage over training. `mass` sums every query's predicted
    probability for the class (an expected query count) and backs min_usage;
    `matched` and `recognized` count Hungarian-matched queries and the matched
    ones whose argmax class is right.
    """
    num_classes: int
    matched: np.ndarray = None
    recognized: np.ndarray = None
    mass: np.ndarray = None

    def __post_init__(self):
        if self.matched is None:
            self.matched = np.zeros(self.num_classes, dtype=np.int64)
        if self.recognized is None:
            self.recognized = np.zeros(self.num_classes, dtype=np.int64)
        if self.mass is None:
            self.mass = np.zeros(self.num_classes, dtype=np.float64)

    def update(self, matched: list, recognized: list, mass: np.ndarray | None = None):
        np.add.at(self.matched, np.asarray(matched, dtype=np.int64), 1)
        np.add.at(self.recognized, np.asarray(recognized, dtype=np.int64), 1)
        if mass is not None:
            self.mass += mass

    def min_usage(self, classes) -> float | None:
        classes = [c for c in classes if c != BACKGROUND_CLASS]
        if not classes:
            return None
        return float(min(self.mass[c] for c in classes))

    def to_dict(self) -> dict:
        return {"matched": self.matched.tolist(), "recognized": self.recognized.tolist(), "mass": self.mass.tolist()}


@dataclass
class TrainResult:
    metrics: dict
    loss_curve: list  # rows: step, loss, pixel, query, qer, lr_backbone, lr_head
    grad_norms: list  # rows: step, global, backbone, head
    query_usage: QueryUsage
    params: dict
    metadata: dict = field(default_factory=dict)


def evaluate(model: ToyModel, samples, ignore_label: int = Config.IGNORE_LABEL,
             d_frac: float = Config.BOUNDARY_DFRAC) -> dict:
    cm = ConfusionMatrix(model.num_classes, ignore_label)
    boundary = BoundaryAccumulator(model.num_classes, d_frac, ignore_label)
    for s in samples:
        pred = model.predict(s.image)
        cm.accumulate(pred, s.mask)
        boundary.accumulate(pred, s.mask)
    summary = summarize(cm)
    per_class_biou, mean_biou = boundary.summarize()
    return {**summary.to_dict(), "boundary_iou": mean_biou, "per_class_boundary_iou": per_class_biou}


def _group_norms(grads: dict, model: ToyModel) -> tuple[float, float]:
    norms = {"backbone": 0.0, "head": 0.0}
    for name, g in grads.items():
        norms[model.group_of(name)] += float(np.sum(g * g))
    return math.sqrt(norms["backbone"]), math.sqrt(norms["head"])


def _batch_order(rng: np.random.Generator, n: int):
    while True:
        yield from rng.permutation(n).tolist()


def _diverged(message: str, last_good: dict, step: int, out_dir: str | None, cfg: TrainConfig):
    path = None
    if out_dir:
        path = os.path.join(out_dir, "last_good.ckpt")
        save_checkpoint(path, last_good, step=step, meta={"reason": message, "seed": cfg.seed})
    logger.error(f"training diverged at step {step}: {message}")
    return DivergenceError(f"training diverged at step {step}: {message}", checkpoint=path, step=step)


def train(cfg: TrainConfig, out_dir: str | None = None) -> TrainResult:
    """
    Runs the full loop. Fully determined by cfg: scenes, batch order,
    augmentation draws and initial parameters all derive from cfg.seed.
    """
    model_cfg = replace(cfg.model, seed=cfg.seed)
    model = ToyModel(model_cfg)
    scenes = make_dataset(cfg.seed, cfg.data.train_count + cfg.data.eval_count, cfg.data.kind,
                          **cfg.data.scene_kwargs())
    train_set = scenes[:cfg.data.train_count]
    eval_set = scenes[cfg.data.train_count:]

    schedule = cfg.schedule()
    state = AdamWState.zeros_like(model.params)
    order = _batch_order(np.random.default_rng(cfg.seed), len(train_set))
    aug = None
    if cfg.augment_preset != "none":
        aug = augment_preset_config(cfg.augment_preset, crop=tuple(cfg.data.size), seed=cfg.seed,
                                    ignore_label=cfg.loss.ignore_label)

    usage = QueryUsage(model.num_classes)
    loss_curve, grad_norms = [], []
    last_good = copy.deepcopy(model.params)
    T = schedule.total_steps
    logger.info(f"training {model.num_parameters()} parameters for {T} steps, batch {cfg.batch_size}, "
                f"loss {cfg.loss.mode}, augment {cfg.augment_preset}")

    for t in range(T):
        lr_back = cosine_lr(t, schedule, "backbone")
        lr_head = cosine_lr(t, schedule, "head")
        lrs = {name: (lr_back if model.group_of(name) == "backbone" else lr_head) for name in model.params}

        grads = {k: np.zeros_like(v) for k, v in model.params.items()}
        totals = {"loss": 0.0, "pixel": 0.0, "query": 0.0, "qer": 0.0}
        used = 0
        for j in range(cfg.batch_size):
            idx = next(order)
            sample = train_set[idx]
            if aug is not None:
                sample = augment_sample(sample, aug, t * cfg.batch_size + j)
            try:
                res = model.loss_and_grad(sample, cfg.loss)
            except EmptySupervisionError:
                logger.debug(f"step {t}: sample {idx} has no supervised pixels after augmentation, skipped")
                continue
            except NonFiniteError as e:
                raise _diverged(str(e), last_good, t, out_dir, cfg)
            for k, g in res.grads.items():
                grads[k] += g
            totals["loss"] += res.loss
            for k in ("pixel", "query", "qer"):
                totals[k] += res.parts[k]
            usage.update(res.matched_classes, res.recognized_classes, res.class_mass)
            used += 1
        if used == 0:
            raise ValidationError(f"step {t}: no sample in the batch carries supervision")
        for g in grads.values():
            g /= used
        mean = {k: v / used for k, v in totals.items()}
        if not math.isfinite(mean["loss"]):
            raise _diverged("loss is not finite", last_good, t, out_dir, cfg)

        gnorm = global_grad_norm(grads)
        back_norm, head_norm = _group_norms(grads, model)
        loss_curve.append([t, mean["loss"], mean["pixel"], mean["query"], mean["qer"], lr_back, lr_head])
        grad_norms.append([t, gnorm, back_norm, head_norm])
        logger.debug(f"step {t}: loss {mean['loss']:.6f} grad-norm {gnorm:.4f}")
        if t % max(1, T // 10) == 0 or t == T - 1:
            logger.info(f"step {t}/{T}: loss {mean['loss']:.5f} (pixel {mean['pixel']:.5f}) grad-norm {gnorm:.4f} "
                        f"lr head {lr_head:.3e}")

        last_good = copy.deepcopy(model.params)
        try:
            adamw_step(model.params, grads, state, lrs, cfg.adamw)
        except NonFiniteError as e:
            raise _diverged(str(e), last_good, t, out_dir, cfg)
        if out_dir and cfg.checkpoint_every and (t + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(os.path.join(out_dir, f"step_{t + 1:06d}.ckpt"), model.params, step=t + 1,
                            meta={"seed": cfg.seed})

    metrics = evaluate(model, eval_set, cfg.loss.ignore_label, cfg.boundary_dfrac)
    metrics["min_query_usage"] = usage.min_usage(cfg.data.class_set)
    logger.info(f"held-out mIoU {metrics['miou']:.4f}, boundary IoU {metrics['boundary_iou']}")
    if out_dir:
        save_checkpoint(os.path.join(out_dir, "final.ckpt"), model.params, step=T, meta={"seed": cfg.seed})

    metadata = {
        "toolkit_version": Config.TOOLKIT_VERSION,
        "total_steps": T,
        "batch_size": cfg.batch_size,
        "reference_batch_size": REFERENCE_BATCH_SIZE,
        "epoch_preset": cfg.epoch_preset,
        "epochs": cfg.epoch_count,
        "num_parameters": model.num_parameters(),
    }
    return TrainResult(metrics, loss_curve, grad_norms, usage, model.params, metadata)
