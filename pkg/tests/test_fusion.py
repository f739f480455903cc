"""Logit combination laws, attention-area routing, and the fusion plan."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from finemine.errors import ValidationError
from finemine.fusion import (
    FusionPlan,
    attention_area_ratio,
    classify_shot,
    fuse,
    route_by_attention,
    routed_fuse,
    tta_aggregate,
    weights_from_accuracy,
)
from finemine.model import softmax


def test_weights_symmetry():
    np.testing.assert_allclose(weights_from_accuracy([0.5, 0.5]), [0.5, 0.5])


def test_weights_proportional():
    np.testing.assert_allclose(weights_from_accuracy([0.8, 0.2]), [0.8, 0.2])


def test_weights_single_model():
    np.testing.assert_allclose(weights_from_accuracy([0.9]), [1.0])


def test_weights_reject_all_zero_and_negative():
    with pytest.raises(ValidationError):
        weights_from_accuracy([0.0, 0.0])
    with pytest.raises(ValidationError):
        weights_from_accuracy([0.5, -0.1])
    with pytest.raises(ValidationError):
        weights_from_accuracy([])


def test_fuse_identical_vectors_fixed_point(rng):
    z = rng.normal(size=7)
    out = fuse([z, z, z], weights_from_accuracy([0.3, 0.5, 0.9]))
    np.testing.assert_allclose(out, z, atol=1e-12)


def test_fuse_arithmetic():
    out = fuse([np.array([1.0, 0.0]), np.array([0.0, 1.0])], [0.9, 0.1])
    np.testing.assert_allclose(out, [0.9, 0.1])
    assert int(np.argmax(out)) == 0


def test_fuse_rejects_length_mismatch():
    with pytest.raises(ValidationError):
        fuse([np.zeros(3), np.zeros(4)], [0.5, 0.5])


def test_fuse_convexity_bounds_quantified(rng):
    for _ in range(120):
        n = int(rng.integers(2, 5))
        c = int(rng.integers(2, 8))
        zs = [rng.normal(size=c) * 10 for _ in range(n)]
        w = weights_from_accuracy(rng.uniform(0.05, 1.0, size=n))
        out = fuse(zs, w)
        stack = np.stack(zs)
        assert np.all(out >= stack.min(axis=0) - 1e-9)
        assert np.all(out <= stack.max(axis=0) + 1e-9)


def test_fuse_argmax_invariant_under_weight_rescaling(rng):
    for _ in range(120):
        n = int(rng.integers(2, 5))
        zs = [rng.normal(size=6) for _ in range(n)]
        accs = rng.uniform(0.1, 1.0, size=n)
        scale = float(rng.uniform(0.2, 50.0))
        a = fuse(zs, weights_from_accuracy(accs))
        b = fuse(zs, weights_from_accuracy(accs * scale))
        assert int(np.argmax(a)) == int(np.argmax(b))
        np.testing.assert_allclose(a, b, atol=1e-9)


def test_softmax_of_fusion_shift_invariant(rng):
    for _ in range(120):
        n = int(rng.integers(2, 5))
        zs = [rng.normal(size=5) for _ in range(n)]
        w = weights_from_accuracy(rng.uniform(0.1, 1.0, size=n))
        shift = float(rng.normal() * 30)
        base = softmax(fuse(zs, w))
        moved = softmax(fuse([z + shift for z in zs], w))
        np.testing.assert_allclose(base, moved, atol=1e-9)


def test_tta_aggregate_single_view_identity(rng):
    z = rng.normal(size=4)
    np.testing.assert_allclose(tta_aggregate([z]), z)


def test_tta_aggregate_mean():
    out = tta_aggregate([np.array([2.0, 0.0]), np.array([0.0, 2.0])])
    np.testing.assert_allclose(out, [1.0, 1.0])


def test_tta_aggregate_permutation_invariant(rng):
    views = [rng.normal(size=5) for _ in range(6)]
    perm = [views[i] for i in rng.permutation(6)]
    np.testing.assert_allclose(tta_aggregate(views), tta_aggregate(perm), atol=1e-12)


def test_tta_aggregate_rejects_empty():
    with pytest.raises(ValidationError):
        tta_aggregate([])


def test_area_ratio_uniform_map():
    assert attention_area_ratio(np.ones((4, 4)), 0.5) == 1.0


def test_area_ratio_single_peak():
    amap = np.zeros((4, 4))
    amap[1, 2] = 1.0
    assert attention_area_ratio(amap, 0.5) == pytest.approx(1 / 16)


def test_area_ratio_all_zero_map():
    assert attention_area_ratio(np.zeros((4, 4)), 0.5) == 0.0


def test_classify_shot_bands():
    assert classify_shot(0.05, 0.1, 0.6) == "long"
    assert classify_shot(0.3, 0.1, 0.6) == "medium"
    assert classify_shot(0.6, 0.1, 0.6) == "close"
    assert classify_shot(0.1, 0.1, 0.6) == "medium"


def test_classify_shot_monotone_quantified(rng):
    order = {"long": 0, "medium": 1, "close": 2}
    for _ in range(150):
        a, b = np.sort(rng.uniform(0, 1, size=2))
        assert order[classify_shot(a, 0.1, 0.6)] <= order[classify_shot(b, 0.1, 0.6)]


def test_routed_fuse_medium_defaults():
    plan = FusionPlan()
    zg = np.array([1.0, 0.0])
    zf = np.array([0.0, 1.0])
    out = routed_fuse(zg, zf, "medium", plan)
    np.testing.assert_allclose(out, 0.3 * zg + 0.7 * zf)


def test_routed_fuse_long_favors_generic():
    out = routed_fuse(np.array([1.0, 0.0]), np.array([0.0, 1.0]),
                      "long", FusionPlan())
    np.testing.assert_allclose(out, [0.7, 0.3])
    assert int(np.argmax(out)) == 0


def test_routed_fuse_equal_inputs_fixed_point(rng):
    z = rng.normal(size=5)
    for shot in ("long", "medium", "close"):
        np.testing.assert_allclose(routed_fuse(z, z, shot, FusionPlan()), z,
                                   atol=1e-12)


def test_routed_fuse_rejects_mismatch_and_unknown_shot():
    plan = FusionPlan()
    with pytest.raises(ValidationError):
        routed_fuse(np.zeros(3), np.zeros(4), "medium", plan)
    with pytest.raises(ValidationError):
        routed_fuse(np.zeros(3), np.zeros(3), "wide", plan)


def test_route_by_attention_composes(rng):
    plan = FusionPlan()
    zg = rng.normal(size=6)
    zf = rng.normal(size=6)
    amap = np.zeros((7, 7))
    amap[3, 3] = 1.0
    out, shot = route_by_attention(zg, zf, amap, plan)
    ratio = attention_area_ratio(amap, plan.binarize)
    expected_shot = classify_shot(ratio, plan.t_long, plan.t_close)
    assert shot == expected_shot
    np.testing.assert_allclose(out, routed_fuse(zg, zf, shot, plan))


def test_plan_validates_routing_and_thresholds():
    with pytest.raises(ValidationError):
        FusionPlan(routing={"long": (0.5, 0.5)}).validate()
    with pytest.raises(ValidationError):
        FusionPlan(t_long=0.7, t_close=0.6).validate()
    with pytest.raises(ValidationError):
        FusionPlan(binarize=0.0).validate()
    bad = FusionPlan()
    bad.routing = dict(bad.routing)
    bad.routing["medium"] = (0.6, 0.6)
    with pytest.raises(ValidationError):
        bad.validate()
    FusionPlan().validate()


@settings(max_examples=100, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1))
def test_routed_fuse_convexity_property(seed):
    r = np.random.default_rng(seed)
    zg = r.normal(size=4)
    zf = r.normal(size=4)
    shot = ("long", "medium", "close")[seed % 3]
    out = routed_fuse(zg, zf, shot, FusionPlan())
    lo = np.minimum(zg, zf)
    hi = np.maximum(zg, zf)
    assert np.all(out >= lo - 1e-12)
    assert np.all(out <= hi + 1e-12)
