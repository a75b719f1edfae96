import os

import numpy as np
import pytest

from ifnet.errors import CheckpointMismatch, InvalidConfig, WrongPatchSize
from ifnet.gradcheck import grad_check
from ifnet.losses import LossConfig, batch_weights, roi_loss
from ifnet.mining import mine
from ifnet.net import (NetConfig, describe, describe_array, init, load_checkpoint, prepare_patches,
                       save_checkpoint)
from ifnet.tensor import Tensor

GOLDEN = os.path.join(os.path.dirname(__file__), "data", "toy_descriptor_golden.txt")


def golden_inputs():
    rng = np.random.default_rng(2024)
    patches = rng.integers(0, 256, size=(3, 64, 64)).astype(np.uint8)
    return patches, NetConfig.toy(descriptor_dim=8, rng_seed=11)


def toy_param_count(plan, dim, side, strides):
    total, c_in = 0, 1
    for c in plan:
        total += c * c_in * 9
        c_in = c
    final = side // int(np.prod(strides))
    return total + dim * c_in * final * final


def test_same_seed_same_parameters():
    a = init(NetConfig.toy(rng_seed=5))
    b = init(NetConfig.toy(rng_seed=5))
    for x, y in zip(a.weights, b.weights):
        assert x.values.tobytes() == y.values.tobytes()
    assert a.digest() == b.digest()
    assert init(NetConfig.toy(rng_seed=6)).digest() != a.digest()


def test_toy_network_parameter_budget():
    cfg = NetConfig.toy(descriptor_dim=4)
    net = init(cfg)
    want = toy_param_count(cfg.channel_plan, 4, 32, cfg.strides)
    assert want == 8596
    assert net.n_parameters() == want < 10_000
    out = describe(net, prepare_patches(np.zeros((2, 64, 64), np.uint8)), train_mode=True)
    assert out.shape == (2, 4)


def test_invalid_configs():
    with pytest.raises(InvalidConfig):
        init(NetConfig(input_side=30))
    with pytest.raises(InvalidConfig):
        init(NetConfig(descriptor_dim=1))
    with pytest.raises(InvalidConfig):
        init(NetConfig(channel_plan=(4, 4), strides=(1,)))


def test_identical_patches_identical_rows():
    net = init(NetConfig.toy(rng_seed=1))
    p = np.random.default_rng(0).integers(0, 256, size=(1, 64, 64)).astype(np.uint8)
    d = describe_array(net, np.repeat(p, 4, axis=0))
    assert np.all(d == d[0])


@pytest.mark.parametrize("train_mode", [True, False])
def test_rows_unit_norm(train_mode):
    net = init(NetConfig.toy(rng_seed=2))
    rng = np.random.default_rng(1)
    x = prepare_patches(rng.integers(0, 256, size=(7, 64, 64)).astype(np.uint8))
    d = describe(net, x, train_mode=train_mode).values
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-6)


def test_wrong_patch_size():
    net = init(NetConfig.toy())
    with pytest.raises(WrongPatchSize):
        describe(net, np.zeros((2, 1, 16, 16), np.float32))


def test_prepare_patches_downsample_and_normalise():
    p = np.zeros((1, 64, 64), np.uint8)
    p[0, :, 32:] = 200
    x = prepare_patches(p)
    assert x.shape == (1, 1, 32, 32)
    np.testing.assert_allclose(x.mean(), 0, atol=1e-6)
    np.testing.assert_allclose(x.std(), 1, atol=1e-5)
    const = prepare_patches(np.full((1, 64, 64), 77, np.uint8))
    assert np.all(const == 0)


def test_golden_descriptor():
    patches, cfg = golden_inputs()
    d = describe_array(init(cfg), patches)
    golden = np.loadtxt(GOLDEN)
    np.testing.assert_allclose(d, golden, atol=1e-5)


def test_shared_weights_across_two_forwards():
    net = init(NetConfig.toy(rng_seed=3))
    ids = [id(w) for w in net.weights]
    before = net.digest()
    rng = np.random.default_rng(2)
    for _ in range(2):
        describe(net, prepare_patches(rng.integers(0, 256, (4, 64, 64)).astype(np.uint8)), True)
    assert [id(w) for w in net.weights] == ids
    assert net.digest() == before


def test_patch_to_roi_loss_gradient_toy():
    net = init(NetConfig.toy(descriptor_dim=8, rng_seed=4, dtype="float64"))
    rng = np.random.default_rng(3)
    raw = rng.integers(0, 256, size=(9, 64, 64)).astype(np.uint8)
    point = prepare_patches(raw).astype(np.float64)

    cfg = LossConfig(1.0, "batch-sigmoid")
    base = mine(describe(net, Tensor(point), train_mode=True), 3, 2, np.arange(3))
    frozen = batch_weights(base.d_M, base.d_m, cfg)  # the weights are constants of the loss

    def fn(x):
        return roi_loss(mine(describe(net, x, train_mode=True), 3, 2, np.arange(3)), cfg, frozen)

    coords = rng.choice(point.size, 60, replace=False)
    assert grad_check(fn, point, coords=coords, kink_tol=1e-7) < 1e-4


def test_parameter_gradient_toy():
    net = init(NetConfig.toy(descriptor_dim=8, rng_seed=5, dtype="float64"))
    rng = np.random.default_rng(4)
    x = prepare_patches(rng.integers(0, 256, size=(6, 64, 64)).astype(np.uint8)).astype(np.float64)
    w = net.weights[2]

    def fn(wt, weights=None):
        saved = net.weights[2]
        net.weights[2] = wt
        try:
            return roi_loss(mine(describe(net, x, True), 3, 1, np.arange(3)), LossConfig(), weights)
        finally:
            net.weights[2] = saved

    base = mine(describe(net, x, True), 3, 1, np.arange(3))
    frozen = batch_weights(base.d_M, base.d_m, LossConfig())

    coords = rng.choice(w.size, 40, replace=False)
    assert grad_check(lambda wt: fn(wt, frozen), w.values, coords=coords, kink_tol=1e-7) < 1e-4


def test_checkpoint_round_trip(tmp_path):
    net = init(NetConfig.toy(descriptor_dim=16, rng_seed=7))
    # move running statistics away from their initial values
    describe(net, prepare_patches(np.random.default_rng(5).integers(0, 256, (4, 64, 64)).astype(np.uint8)), True)
    path = tmp_path / "net.ckpt"
    save_checkpoint(net, path)
    text = path.read_text().splitlines()
    assert text[0] == "IFNETCKPT1"
    assert "descriptor_dim=16" in text
    back = load_checkpoint(path)
    assert back.config == net.config
    for a, b in zip(net.weights, back.weights):
        np.testing.assert_array_equal(a.values, b.values)
    for (m1, v1), (m2, v2) in zip(net.running, back.running):
        np.testing.assert_array_equal(m1, m2)
        np.testing.assert_array_equal(v1, v2)


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_text("NOPE\n")
    with pytest.raises(CheckpointMismatch):
        load_checkpoint(p)


def test_float64_network_matches_float32_closely():
    net = init(NetConfig.toy(rng_seed=8))
    x = prepare_patches(np.random.default_rng(6).integers(0, 256, (3, 64, 64)).astype(np.uint8))
    d32 = describe(net, x).values
    d64 = describe(net.astype(np.float64), Tensor(x.astype(np.float64))).values
    np.testing.assert_allclose(d32, d64, atol=1e-5)


def test_flat_patch_still_unit_descriptor():
    net = init(NetConfig.toy(rng_seed=9))
    flat = np.full((2, 64, 64), 128, np.uint8)
    for d in (describe_array(net, flat), describe(net, prepare_patches(flat), True).values):
        np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-6)
