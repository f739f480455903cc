"""Backprop correctness, loss/schedule arithmetic, and model lifecycle."""
import math

import numpy as np
import pytest

from finemine.errors import ValidationError
from finemine.model import (
    Classifier,
    TrainConfig,
    _backward_batch,
    _forward_batch,
    attention,
    fix_finetune,
    forward,
    grad_check,
    init,
    load_model,
    loss,
    lr_at,
    save_model,
    smooth_targets,
    softmax,
    train,
    with_new_head,
)

# cross-entropy of logits [1.25, -0.75, 0.5, 2.0] against the smoothed
# target [0.05, 0.05, 0.05, 0.85], evaluated at 50 decimal digits
LOSS_ORACLE = 0.81498680905511200849


def test_gradients_match_finite_differences_20_pairs():
    worst = 0.0
    rng = np.random.default_rng(2024)
    for trial in range(20):
        classes = int(rng.integers(2, 6))
        model = init(classes, seed=trial, input_resolution=16)
        image = rng.uniform(0, 1, size=(16, 16, 3)).astype(np.float32)
        target = smooth_targets(int(rng.integers(classes)), classes, 0.2)
        err = grad_check(model, image, target, epsilon=1e-4)
        worst = max(worst, err)
    assert worst < 1e-4


def test_grad_check_rejects_bad_epsilon():
    model = init(3, seed=0, input_resolution=16)
    img = np.zeros((16, 16, 3), dtype=np.float32)
    with pytest.raises(ValidationError):
        grad_check(model, img, smooth_targets(0, 3, 0.2), epsilon=1e-7)


def test_head_bias_gradient_closed_form_at_zero_parameters():
    model = init(4, seed=0, input_resolution=16)
    for p in model.parameters().values():
        p[...] = 0.0
    x = np.random.default_rng(1).uniform(0, 1, size=(1, 16, 16, 3))
    target = smooth_targets(2, 4, 0.2)
    logits, _, cache = _forward_batch(model, x, keep=True)
    np.testing.assert_array_equal(logits, np.zeros((1, 4)))
    grads = _backward_batch(model, cache, softmax(logits) - target[None])
    np.testing.assert_allclose(grads["head_b"], 0.25 - target, atol=1e-15)


def test_loss_matches_high_precision_oracle():
    got = loss(np.array([1.25, -0.75, 0.5, 2.0]),
               np.array([0.05, 0.05, 0.05, 0.85]))
    assert got == pytest.approx(LOSS_ORACLE, rel=1e-12)


def test_loss_shift_produces_same_softmax_gap():
    logits = np.array([0.3, -1.2, 2.2])
    target = smooth_targets(2, 3, 0.1)
    # adding a constant to logits raises lse and the dot by the same amount
    assert loss(logits + 7.0, target) == pytest.approx(loss(logits, target),
                                                       rel=1e-12)


def test_loss_is_stable_at_large_magnitudes():
    logits = np.array([1000.0, 999.0, 998.0])
    val = loss(logits, smooth_targets(0, 3, 0.0))
    assert math.isfinite(val)
    assert val == pytest.approx(
        math.log(1 + math.exp(-1) + math.exp(-2)), rel=1e-12
    )


def test_loss_rejects_shape_mismatch():
    with pytest.raises(ValidationError):
        loss(np.zeros(3), np.zeros(4))


def test_smooth_targets_examples():
    np.testing.assert_allclose(smooth_targets(0, 5, 0.2),
                               [0.84, 0.04, 0.04, 0.04, 0.04])
    np.testing.assert_allclose(smooth_targets(1, 2, 0.3), [0.15, 0.85])
    np.testing.assert_array_equal(smooth_targets(1, 3, 0.0), [0.0, 1.0, 0.0])


def test_smooth_targets_sum_to_one():
    for eps in (0.0, 0.1, 0.2, 0.5, 0.9):
        assert smooth_targets(3, 7, eps).sum() == pytest.approx(1.0, abs=1e-12)


def test_smooth_targets_rejects_bad_args():
    with pytest.raises(ValidationError):
        smooth_targets(0, 4, 1.0)
    with pytest.raises(ValidationError):
        smooth_targets(4, 4, 0.2)


def test_lr_schedule_warmup_and_cosine():
    cfg = TrainConfig(epochs=50, warmup_epochs=5, base_lr=0.025)
    total = 200  # 4 steps per epoch -> warmup covers the first 20 steps
    assert lr_at(0, total, cfg) == pytest.approx(0.025 / 20)
    assert lr_at(19, total, cfg) == pytest.approx(0.025)
    assert lr_at(20, total, cfg) == pytest.approx(0.025)  # cosine phase 0
    assert lr_at(65, total, cfg) == pytest.approx(0.021338834764831844055,
                                                  rel=1e-12)
    assert lr_at(110, total, cfg) == pytest.approx(0.0125, rel=1e-9)
    # endpoint sits within base_lr * pi / span of zero
    assert lr_at(199, total, cfg) < 0.025 * math.pi / 180


def test_lr_monotone_decay_after_warmup():
    cfg = TrainConfig(epochs=10, warmup_epochs=2, base_lr=0.1)
    vals = [lr_at(s, 100, cfg) for s in range(20, 100)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_lr_rejects_out_of_range_step():
    cfg = TrainConfig()
    with pytest.raises(ValidationError):
        lr_at(100, 100, cfg)


def test_train_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(epochs=0).validate()
    with pytest.raises(ValidationError):
        TrainConfig(base_lr=-0.1).validate()
    with pytest.raises(ValidationError):
        TrainConfig(warmup_epochs=50, epochs=50).validate()
    with pytest.raises(ValidationError):
        TrainConfig(rcm=True, crop_size=30, rcm_grid=4).validate()
    TrainConfig().validate()


def test_init_shapes_and_determinism():
    a = init(5, seed=9)
    b = init(5, seed=9)
    assert a.conv1_w.shape == (8, 3, 3, 3)
    assert a.conv2_w.shape == (16, 8, 3, 3)
    assert a.head_w.shape == (16, 5)
    assert a.head_b.shape == (5,)
    for k, p in a.parameters().items():
        np.testing.assert_array_equal(p, b.parameters()[k])
    c = init(5, seed=10)
    assert any(
        not np.array_equal(p, c.parameters()[k])
        for k, p in a.parameters().items()
    )


def test_forward_shapes_and_attention_resolutions():
    model = init(4, seed=0)
    img = np.random.default_rng(0).uniform(0, 1, (32, 32, 3)).astype(np.float32)
    logits, features = forward(model, img, 32)
    assert logits.shape == (4,)
    amap32 = attention(model, img, 32)
    assert amap32.shape == (7, 7)
    img64 = np.random.default_rng(1).uniform(0, 1, (64, 64, 3)).astype(np.float32)
    amap64 = attention(model, img64, 64)
    assert amap64.shape == (14, 14)
    assert amap64.max() == pytest.approx(1.0) or amap64.max() == 0.0


def test_at_resolution_keeps_parameters():
    model = init(3, seed=1)
    hi = model.at_resolution(64)
    assert hi.input_resolution == 64
    assert model.input_resolution == 32
    np.testing.assert_array_equal(hi.conv1_w, model.conv1_w)
    np.testing.assert_array_equal(hi.head_w, model.head_w)


def test_with_new_head_swaps_only_the_head():
    model = init(6, seed=2)
    swapped = with_new_head(model, 3, seed=5)
    assert swapped.head_w.shape == (16, 3)
    assert swapped.head_b.shape == (3,)
    np.testing.assert_array_equal(swapped.conv1_w, model.conv1_w)
    np.testing.assert_array_equal(swapped.conv2_w, model.conv2_w)


def _tiny_data(classes=3, n=12, size=16, seed=0, eps=0.2):
    rng = np.random.default_rng(seed)
    data = []
    for i in range(n):
        from finemine.synth import Example
        img = rng.uniform(0, 1, size=(size, size, 3)).astype(np.float32)
        label = i % classes
        data.append((Example(example_id=f"t{i}", image=img, label=label,
                             hidden_label=label, shot="Medium"),
                     smooth_targets(label, classes, eps)))
    return data


def test_train_vanishing_lr_leaves_parameters_untouched():
    model = init(3, seed=0, input_resolution=16)
    cfg = TrainConfig(epochs=1, batch_size=4, base_lr=1e-300,
                      warmup_epochs=0, crop_size=16, flip=False, seed=0)
    out, curve = train(model, _tiny_data(), cfg)
    assert len(curve) == 1
    for k, p in out.parameters().items():
        np.testing.assert_array_equal(p, model.parameters()[k])


def test_train_reduces_loss_and_is_deterministic():
    cfg = TrainConfig(epochs=6, batch_size=4, base_lr=0.2, warmup_epochs=1,
                      crop_size=16, seed=3)
    data = _tiny_data(n=24)
    a, curve_a = train(init(3, seed=1, input_resolution=16), data, cfg)
    b, curve_b = train(init(3, seed=1, input_resolution=16), data, cfg)
    assert curve_a[-1] < curve_a[0]
    assert curve_a == curve_b
    for k, p in a.parameters().items():
        np.testing.assert_array_equal(p, b.parameters()[k])


def test_train_does_not_mutate_input_model():
    model = init(3, seed=4, input_resolution=16)
    before = {k: p.copy() for k, p in model.parameters().items()}
    cfg = TrainConfig(epochs=2, batch_size=4, base_lr=0.2, warmup_epochs=0,
                      crop_size=16, seed=0)
    train(model, _tiny_data(), cfg)
    for k, p in model.parameters().items():
        np.testing.assert_array_equal(p, before[k])


def test_train_rejects_empty_data():
    with pytest.raises(ValidationError):
        train(init(3, seed=0), [], TrainConfig())


def test_train_aborts_on_divergence():
    cfg = TrainConfig(epochs=4, batch_size=4, base_lr=1e9, warmup_epochs=0,
                      crop_size=16, flip=False, seed=0)
    with pytest.raises(RuntimeError, match="non-finite"):
        train(init(3, seed=0, input_resolution=16), _tiny_data(), cfg)


def test_fix_finetune_freezes_conv_and_lifts_resolution():
    base = init(3, seed=6, input_resolution=16)
    conv1, conv2 = base.conv1_w.copy(), base.conv2_w.copy()
    cfg = TrainConfig(epochs=3, batch_size=4, base_lr=0.2, warmup_epochs=0,
                      crop_size=32, seed=1)
    tuned = fix_finetune(base, _tiny_data(size=32), 32, cfg)
    assert tuned.input_resolution == 32
    np.testing.assert_array_equal(tuned.conv1_w, conv1)
    np.testing.assert_array_equal(tuned.conv2_w, conv2)
    assert not np.array_equal(tuned.head_w, base.head_w)


def test_fix_finetune_rejects_non_increase():
    model = init(3, seed=0, input_resolution=32)
    with pytest.raises(ValidationError):
        fix_finetune(model, _tiny_data(size=32), 32, TrainConfig())


def test_save_load_round_trip(tmp_path):
    model = init(4, seed=7, input_resolution=64)
    save_model(model, tmp_path / "m")
    back = load_model(tmp_path / "m")
    assert back.input_resolution == 64
    assert back.num_classes == model.num_classes
    for k, p in model.parameters().items():
        np.testing.assert_array_equal(p, back.parameters()[k])


def test_load_rejects_corrupt_payload(tmp_path):
    model = init(4, seed=7)
    save_model(model, tmp_path / "m")
    target = tmp_path / "m" / "head_w.fmt1"
    target.write_bytes(target.read_bytes()[:-4])
    with pytest.raises(Exception):
        load_model(tmp_path / "m")


def test_softmax_rows_normalized():
    z = np.random.default_rng(0).normal(size=(5, 7))
    p = softmax(z)
    np.testing.assert_allclose(p.sum(axis=1), np.ones(5), atol=1e-12)
    assert p.min() > 0
