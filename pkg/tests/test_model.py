from dataclasses import replace

import numpy as np
import pytest

from features.losses import HflpConfig, QerConfig
from features.model import (
    LOSS_MODES, PARAM_GROUPS, TINY, LossConfig, ModelConfig, ToyModel, conv2d_backward, conv2d_forward, gradcheck,
    gradcheck_sample,
)
from util.errors import ValidationError


@pytest.mark.parametrize("size", [(16, 16), (13, 9), (8, 8)])
def test_logits_live_at_stride_four(size):
    model = ToyModel(TINY)
    fw = model.forward(np.zeros((3, *size)))
    H, W = size
    assert fw.logits.tensor.shape == (3, -(-H // 4), -(-W // 4))
    assert fw.class_logits.shape == (TINY.num_queries, TINY.num_classes + 1)
    assert fw.mask_logits.shape == (TINY.num_queries, *fw.features.shape[1:])


def test_every_parameter_has_a_group():
    model = ToyModel(TINY)
    assert set(model.params) == set(PARAM_GROUPS)
    assert {model.group_of(n) for n in model.params} == {"backbone", "head"}
    assert model.num_parameters() == sum(p.size for p in model.params.values())


def test_init_is_seeded():
    a, b = ToyModel(ModelConfig(seed=4)), ToyModel(ModelConfig(seed=4))
    c = ToyModel(ModelConfig(seed=5))
    assert all(np.array_equal(a.params[k], b.params[k]) for k in PARAM_GROUPS)
    assert not np.array_equal(a.params["conv1.w"], c.params["conv1.w"])


def test_conv_backward_is_the_adjoint(rng):
    x = rng.normal(size=(2, 7, 6))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    out, windows = conv2d_forward(x, w, b)
    g = rng.normal(size=out.shape)
    dx, dw, db = conv2d_backward(g, windows, w, x.shape)
    lhs = np.sum((out - b[:, None, None]) * g)
    assert np.sum(dx * x) == pytest.approx(lhs)
    assert np.sum(dw * w) == pytest.approx(lhs)
    assert db == pytest.approx(g.sum(axis=(1, 2)))


@pytest.mark.parametrize("seed", range(20))
def test_full_model_gradcheck(seed):
    model = ToyModel(replace(TINY, seed=seed))
    sample = gradcheck_sample(seed, (8, 8), TINY.num_classes)
    cfg = LossConfig(mode="hflp+qer", hflp=HflpConfig(epsilon=0.1), qer=QerConfig(lam=0.1))
    errors = gradcheck(model, sample, cfg)
    assert set(errors) == set(PARAM_GROUPS)
    assert max(errors.values()) < 1e-4


@pytest.mark.parametrize("mode", ["hflp", "downsampled-ce"])
@pytest.mark.parametrize("seed", range(3))
def test_gradcheck_other_modes(mode, seed):
    model = ToyModel(replace(TINY, seed=100 + seed))
    sample = gradcheck_sample(100 + seed, (12, 8), TINY.num_classes)
    errors = gradcheck(model, sample, LossConfig(mode=mode))
    assert max(errors.values()) < 1e-4


def test_gradcheck_with_reverse_qer_and_ignored_pixels():
    model = ToyModel(replace(TINY, seed=7))
    sample = gradcheck_sample(7, (8, 8), TINY.num_classes)
    sample.mask[5:, 5:] = 255
    cfg = LossConfig(mode="hflp+qer", qer=QerConfig(lam=0.5, direction="reverse"))
    assert max(gradcheck(model, sample, cfg).values()) < 1e-4


def test_loss_parts_by_mode():
    model = ToyModel(TINY)
    sample = gradcheck_sample(1, (8, 8), TINY.num_classes)
    plain = model.loss_and_grad(sample, LossConfig(mode="hflp"))
    with_qer = model.loss_and_grad(sample, LossConfig(mode="hflp+qer"))
    assert plain.parts["qer"] == 0.0
    assert with_qer.parts["qer"] > 0.0
    assert with_qer.loss == pytest.approx(plain.loss + with_qer.parts["qer"])
    assert plain.loss == pytest.approx(plain.parts["pixel"] + plain.parts["query"])
    assert set(plain.grads) == set(PARAM_GROUPS)
    assert plain.assignment is not None
    assert len(plain.matched_classes) == len(plain.assignment.pairs)
    assert plain.class_mass.shape == (TINY.num_classes,)
    assert np.all(plain.class_mass >= 0.0)
    assert plain.class_mass.sum() < TINY.num_queries


def test_qer_leaves_the_matching_alone():
    model = ToyModel(TINY)
    sample = gradcheck_sample(2, (8, 8), TINY.num_classes)
    a = model.loss_and_grad(sample, LossConfig(mode="hflp")).assignment
    b = model.loss_and_grad(sample, LossConfig(mode="hflp+qer", qer=QerConfig(lam=5.0))).assignment
    assert a == b


def test_predict_returns_labels_at_image_resolution():
    model = ToyModel(TINY)
    pred = model.predict(np.random.default_rng(0).random((3, 10, 14)))
    assert pred.shape == (10, 14)
    assert pred.min() >= 0 and pred.max() < TINY.num_classes


def test_config_validation():
    with pytest.raises(ValidationError):
        ModelConfig(num_classes=1)
    with pytest.raises(ValidationError):
        LossConfig(mode="focal")
    with pytest.raises(ValidationError):
        LossConfig(no_object_weight=-1.0)
    assert set(LOSS_MODES) == {"hflp", "downsampled-ce", "hflp+qer"}


def test_loss_config_from_dict_builds_nested_configs():
    cfg = LossConfig.from_dict({"mode": "hflp+qer", "hflp": {"epsilon": 0.2}, "qer": {"lam": 0.3}})
    assert cfg.hflp == HflpConfig(epsilon=0.2)
    assert cfg.qer.lam == 0.3
    assert ModelConfig.from_dict(TINY.to_dict()) == TINY
