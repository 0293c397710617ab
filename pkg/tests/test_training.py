import math
from dataclasses import replace

import numpy as np
import pytest

from database.store import load_checkpoint
from features.losses import QerConfig
from features.model import LossConfig, ModelConfig, ToyModel
from features.optim import AdamWConfig
from features.scenes import make_dataset
from features.training import DataConfig, QueryUsage, TrainConfig, evaluate, train
from util.errors import DivergenceError, ValidationError


def _small(**overrides) -> TrainConfig:
    cfg = TrainConfig(
        model=ModelConfig(num_classes=3, hidden=(4, 6), num_queries=3),
        data=DataConfig(train_count=4, eval_count=2, size=(16, 16), n_regions=3, class_set=(0, 1, 2)),
        batch_size=2,
        steps=6,
        seed=3,
    )
    return replace(cfg, **overrides)


def test_zero_learning_rate_leaves_parameters_untouched():
    cfg = _small(lr_backbone=0.0, lr_head=0.0, lr_min=0.0, adamw=AdamWConfig(weight_decay=0.0))
    result = train(cfg)
    initial = ToyModel(replace(cfg.model, seed=cfg.seed)).params
    for name, p in initial.items():
        assert np.array_equal(result.params[name], p)


def test_runs_are_reproducible():
    a = train(_small(loss=LossConfig(mode="hflp+qer")))
    b = train(_small(loss=LossConfig(mode="hflp+qer")))
    assert a.loss_curve == b.loss_curve
    assert a.grad_norms == b.grad_norms
    assert a.metrics == b.metrics


def test_curves_and_metadata():
    cfg = _small(augment_preset="segformer")
    result = train(cfg)
    assert [row[0] for row in result.loss_curve] == list(range(6))
    assert all(math.isfinite(v) for row in result.loss_curve for v in row)
    assert result.loss_curve[0][6] == cfg.lr_head
    assert result.loss_curve[0][5] == cfg.lr_backbone
    for _, total, back, head in result.grad_norms:
        assert total == pytest.approx(math.hypot(back, head))
    assert result.metadata["total_steps"] == 6
    assert result.metadata["reference_batch_size"] == 256
    assert 0.0 <= result.metrics["miou"] <= 1.0
    assert "min_query_usage" in result.metrics


def test_checkpoints_are_written(tmp_path):
    result = train(_small(checkpoint_every=3), str(tmp_path))
    params, step, meta = load_checkpoint(str(tmp_path / "final.ckpt"))
    assert step == 6
    assert meta["seed"] == 3
    assert all(np.array_equal(params[k], result.params[k]) for k in result.params)
    assert (tmp_path / "step_000003.ckpt").exists()


def test_nan_loss_aborts_with_last_good_checkpoint(tmp_path, monkeypatch):
    real = ToyModel.loss_and_grad
    calls = {"n": 0}

    def flaky(self, sample, cfg, assignment=None):
        res = real(self, sample, cfg, assignment)
        calls["n"] += 1
        if calls["n"] > 4:
            res.loss = float("nan")
        return res

    monkeypatch.setattr(ToyModel, "loss_and_grad", flaky)
    with pytest.raises(DivergenceError) as e:
        train(_small(), str(tmp_path))
    assert e.value.checkpoint == str(tmp_path / "last_good.ckpt")
    params, step, meta = load_checkpoint(e.value.checkpoint)
    assert step == 2
    assert "not finite" in meta["reason"]


def test_epoch_presets_set_the_step_budget():
    cfg = _small(steps=None, epoch_preset="custom")
    assert cfg.total_steps == 40 * math.ceil(4 / 2)
    assert _small(steps=None, epochs=3).total_steps == 6
    assert _small(steps=None).total_steps == 200


def test_epoch_preset_from_json_drives_the_step_budget():
    cfg = TrainConfig.from_dict({"epoch_preset": "original", "batch_size": 8, "data": {"train_count": 32}})
    assert cfg.steps is None
    assert cfg.total_steps == 20 * 4
    assert TrainConfig.from_dict(cfg.to_dict()).total_steps == 80
    assert TrainConfig.from_dict({}).total_steps == 200


def test_epoch_preset_is_recorded_in_metadata():
    result = train(_small(steps=None, epoch_preset="original"))
    assert result.metadata["epochs"] == 20
    assert result.metadata["total_steps"] == 20 * 2
    assert len(result.loss_curve) == 40


def test_steps_and_epochs_are_exclusive():
    with pytest.raises(ValidationError):
        TrainConfig(steps=10, epoch_preset="original")
    with pytest.raises(ValidationError):
        TrainConfig(steps=10, epochs=2)
    with pytest.raises(ValidationError):
        TrainConfig(epochs=2, epoch_preset="custom")
    with pytest.raises(ValidationError):
        TrainConfig(steps=0)


def test_config_round_trip_and_validation():
    cfg = _small(loss=LossConfig(mode="hflp+qer", qer=QerConfig(lam=0.2)))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValidationError):
        TrainConfig.from_dict({"learning_rate": 1.0})
    with pytest.raises(ValidationError):
        _small(augment_preset="randaugment")
    with pytest.raises(ValidationError):
        DataConfig(class_set=())
    with pytest.raises(ValidationError):
        TrainConfig.from_dict({"data": {"class_set": []}})
    with pytest.raises(ValidationError):
        TrainConfig(model=ModelConfig(num_classes=2), data=DataConfig(class_set=(0, 3)))


def test_query_usage_ignores_background():
    usage = QueryUsage(3)
    usage.update([0, 1, 1, 2], [1], np.array([0.1, 2.5, 0.75]))
    usage.update([1], [], np.array([0.0, 0.5, 0.5]))
    assert usage.matched.tolist() == [1, 3, 1]
    assert usage.recognized.tolist() == [0, 1, 0]
    assert usage.mass.tolist() == [0.1, 3.0, 1.25]
    assert usage.min_usage([0, 1, 2]) == 1.25
    assert usage.min_usage([0]) is None


def test_evaluate_on_perfect_predictor(monkeypatch):
    samples = make_dataset(0, 2, size=(16, 16))
    model = ToyModel(ModelConfig(num_classes=2))
    truth = {id(s.image): s.mask for s in samples}
    monkeypatch.setattr(model, "predict", lambda image: truth[id(image)])
    metrics = evaluate(model, samples)
    assert metrics["miou"] == 1.0
    assert metrics["boundary_iou"] == 1.0


@pytest.mark.slow
def test_hflp_reaches_high_miou_on_easy_scenes():
    cfg = TrainConfig(
        model=ModelConfig(num_classes=2, hidden=(8, 16), num_queries=4),
        data=DataConfig(train_count=32, eval_count=8, size=(96, 96), n_regions=3, class_set=(0, 1), easy=True),
        lr_backbone=1e-3, lr_head=1e-2, lr_min=1e-6, batch_size=8, steps=400, seed=0,
    )
    result = train(cfg)
    assert result.metrics["miou"] >= 0.90


@pytest.mark.slow
def test_hflp_keeps_thin_structures_better_than_downsampled_labels():
    base = TrainConfig(
        model=ModelConfig(num_classes=2, hidden=(8, 16), num_queries=4),
        data=DataConfig(kind="thin", train_count=32, eval_count=8, size=(64, 64), class_set=(0, 1), easy=True),
        lr_backbone=1e-3, lr_head=1e-2, lr_min=1e-6, batch_size=8, steps=300,
    )
    wins = 0
    for seed in range(5):
        hflp = train(replace(base, seed=seed, loss=LossConfig(mode="hflp")))
        coarse = train(replace(base, seed=seed, loss=LossConfig(mode="downsampled-ce")))
        wins += hflp.metrics["boundary_iou"] >= coarse.metrics["boundary_iou"]
    assert wins >= 4


@pytest.mark.slow
def test_qer_keeps_rare_classes_in_use():
    base = TrainConfig(
        model=ModelConfig(num_classes=4, hidden=(4, 8), num_queries=6),
        data=DataConfig(train_count=16, eval_count=4, size=(32, 32), n_regions=4, class_set=(0, 1, 2, 3),
                        class_weights=(0.55, 0.3, 0.1, 0.05)),
        lr_backbone=1e-3, lr_head=1e-2, lr_min=1e-6, batch_size=4, steps=60,
    )
    bound = 0.1 * math.log(base.model.num_classes + 1)
    wins = 0
    for seed in range(5):
        with_qer = train(replace(base, seed=seed, loss=LossConfig(mode="hflp+qer", qer=QerConfig(lam=0.1))))
        without = train(replace(base, seed=seed, loss=LossConfig(mode="hflp+qer", qer=QerConfig(lam=0.0))))
        assert all(row[4] <= bound for row in with_qer.loss_curve)
        assert all(row[4] == 0.0 for row in without.loss_curve)
        wins += with_qer.metrics["min_query_usage"] >= without.metrics["min_query_usage"]
    assert wins >= 4
