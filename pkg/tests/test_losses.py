import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ifnet import ops
from ifnet.errors import EmptyBatch, InvalidConfig, NegativeDistance
from ifnet.losses import (LossConfig, batch_weights, hard_positive_triplet_loss, margin_loss,
                          roi_loss, sigmoid, triplet_margin_loss)
from ifnet.mining import MinedTriplets, mine
from ifnet.tensor import Graph, Tensor


def fixed_triplets(d_M, d_m, requires_grad=False):
    n = len(d_M)
    return MinedTriplets(np.zeros(n, int), np.zeros(n, int), np.array(["x"] * n),
                         Tensor(np.asarray(d_M, float), requires_grad=requires_grad),
                         Tensor(np.asarray(d_m, float), requires_grad=requires_grad))


def test_triplet_margin_examples():
    assert triplet_margin_loss(0.5, 2.0, 1.0) == 0.0
    assert triplet_margin_loss(1.2, 0.8, 1.0) == pytest.approx(1.4)
    for x in (0.0, 0.3, 7.0):
        assert triplet_margin_loss(x, x, 0.0) == 0.0
    with pytest.raises(NegativeDistance):
        triplet_margin_loss(-0.1, 1.0, 1.0)


def test_hard_positive_loss_examples():
    assert hard_positive_triplet_loss(fixed_triplets([0.1, 0.2], [3.0, 4.0]), 1.0).item() == 0.0
    val = hard_positive_triplet_loss(fixed_triplets([0.4, 0.1], [0.9, 1.5]), 1.0).item()
    assert val == pytest.approx(0.25, abs=1e-12)


def test_hard_positive_loss_is_mean_of_margin_losses():
    rng = np.random.default_rng(0)
    d_M, d_m = rng.uniform(0, 2, 8), rng.uniform(0, 2, 8)
    want = np.mean([triplet_margin_loss(a, b, 0.7) for a, b in zip(d_M, d_m)])
    assert hard_positive_triplet_loss(fixed_triplets(d_M, d_m), 0.7).item() == pytest.approx(want)


def test_weights_unit_and_sigmoid():
    w = batch_weights([0.3, 2.0], [1.0, 0.1], LossConfig(weight_mode="unit"))
    assert w.w_p.tolist() == [1, 1] and w.w_n.tolist() == [1, 1]
    w = batch_weights([0.0, 0.0, 0.0], [1.0, 1.0, 1.0], LossConfig(weight_mode="batch-sigmoid"))
    assert w.w_p.tolist() == [0.5, 0.5, 0.5]
    w = batch_weights([0.7] * 4, [1.3] * 4, LossConfig(weight_mode="relative"))
    assert w.w_p.tolist() == [1.0] * 4 and w.w_n.tolist() == [1.0] * 4
    with pytest.raises(EmptyBatch):
        batch_weights([], [], LossConfig())


def test_loss_config_validation():
    with pytest.raises(InvalidConfig):
        LossConfig(margin=-1)
    with pytest.raises(InvalidConfig):
        LossConfig(weight_mode="softmax")


def test_roi_unit_equals_hard_positive():
    tri = fixed_triplets([0.4, 0.1, 1.1], [0.9, 1.5, 0.2])
    a = roi_loss(tri, LossConfig(weight_mode="unit")).item()
    b = hard_positive_triplet_loss(tri, 1.0).item()
    assert a == b


def test_roi_batch_sigmoid_hand_example():
    assert sigmoid(1.0) == pytest.approx(0.731059, abs=1e-6)
    assert sigmoid(2.0) == pytest.approx(0.880797, abs=1e-6)
    tri = fixed_triplets([1.0, 1.0], [2.0, 2.0])
    assert roi_loss(tri, LossConfig(1.0, "batch-sigmoid")).item() == 0.0


def test_roi_weights_detached():
    rng = np.random.default_rng(1)
    d_M, d_m = rng.uniform(0.2, 1.5, 6), rng.uniform(0.2, 1.5, 6)
    for mode in ("batch-sigmoid", "relative"):
        cfg = LossConfig(1.0, mode)
        tri = fixed_triplets(d_M, d_m, requires_grad=True)
        g = Graph()
        loss = g.forward(lambda: roi_loss(tri, cfg), [])
        g.backward(loss)
        w = batch_weights(d_M, d_m, cfg)
        active = (1.0 + w.w_p * d_M - w.w_n * d_m) > 0
        np.testing.assert_allclose(tri.d_pos.grad, w.w_p * active / 6, atol=1e-15)
        np.testing.assert_allclose(tri.d_neg.grad, -w.w_n * active / 6, atol=1e-15)


def test_relative_outlier_gets_largest_weight():
    rng = np.random.default_rng(2)
    for _ in range(200):
        d_M = rng.uniform(0, 2, 7)
        w = batch_weights(d_M, rng.uniform(0, 2, 7), LossConfig(weight_mode="relative"))
        assert np.argmax(w.w_p) == np.argmax(d_M)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 5), st.floats(0, 5)), min_size=2, max_size=10),
       st.floats(0, 2), st.sampled_from(["unit", "batch-sigmoid", "relative"]),
       st.integers(0, 9), st.floats(0.01, 1.0))
def test_roi_nonnegative_and_monotone(pairs, m, mode, which, bump):
    d_M = np.array([p[0] for p in pairs])
    d_m = np.array([p[1] for p in pairs])
    cfg = LossConfig(m, mode)
    base = roi_loss(fixed_triplets(d_M, d_m), cfg).item()
    assert base >= 0
    w = batch_weights(d_M, d_m, cfg)
    i = which % len(pairs)

    def frozen(dM, dm):
        return np.mean(np.maximum(m + w.w_p * dM - w.w_n * dm, 0))

    up_neg = d_m.copy()
    up_neg[i] += bump
    up_pos = d_M.copy()
    up_pos[i] += bump
    assert frozen(d_M, up_neg) <= frozen(d_M, d_m) + 1e-12
    assert frozen(up_pos, d_m) >= frozen(d_M, d_m) - 1e-12


def test_margin_loss_taped():
    d_ap = Tensor(np.array([0.5, 1.2]))
    d_an = Tensor(np.array([2.0, 0.8]))
    assert margin_loss(d_ap, d_an, 1.0).item() == pytest.approx(0.7)


def test_roi_on_mined_descriptors_unit_bitwise():
    rng = np.random.default_rng(3)
    desc = Tensor(rng.normal(size=(15, 4)))
    tri = mine(desc, 5, 2, np.arange(5))
    a = roi_loss(tri, LossConfig(0.5, "unit")).item()
    assert a == hard_positive_triplet_loss(tri, 0.5).item()
    assert ops.mean(tri.d_pos).item() > 0
