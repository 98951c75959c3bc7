import numpy as np
import pytest

from rslab import nets
from rslab.errors import BadMagicError, ShapeError, TruncatedError, VersionError


def finite_diff_param_grads(net, batch, step=1e-5, stride=7):
    """Central finite differences on a strided subset of each tensor."""
    loss0, grads, _ = nets.loss_and_grad(net, batch)
    worst = 0.0
    for li, p in enumerate(net.params):
        for key, arr in p.items():
            flat = arr.ravel()
            for k in range(0, flat.size, stride):
                orig = flat[k]
                flat[k] = orig + step
                lp, _, _ = nets.loss_and_grad(net, batch, False, False)
                flat[k] = orig - step
                lm, _, _ = nets.loss_and_grad(net, batch, False, False)
                flat[k] = orig
                fd = (lp - lm) / (2 * step)
                bp = grads[li][key].ravel()[k]
                denom = max(1e-6, abs(fd) + abs(bp))
                worst = max(worst, abs(fd - bp) / denom)
    return worst


def finite_diff_input_grad(net, batch, step=1e-5, stride=11):
    _, _, dx = nets.loss_and_grad(net, batch, need_param_grads=False)
    x = batch.inputs
    flat = x.ravel()
    worst = 0.0
    for k in range(0, flat.size, stride):
        orig = flat[k]
        flat[k] = orig + step
        lp, _, _ = nets.loss_and_grad(net, nets.Batch(x, batch.labels), False, False)
        flat[k] = orig - step
        lm, _, _ = nets.loss_and_grad(net, nets.Batch(x, batch.labels), False, False)
        flat[k] = orig
        fd = (lp - lm) / (2 * step)
        bp = dx.ravel()[k]
        worst = max(worst, abs(fd - bp) / max(1e-6, abs(fd) + abs(bp)))
    return worst


# ---------------------------------------------------------------------------
# forward trivials


def test_dense_identity_forward():
    net = nets.NetworkGraph([nets.Flatten(), nets.Dense(4, 4)], (1, 2, 2))
    net.params = nets.init_params(net, 0)
    net.params[1]["w"] = np.eye(4)
    net.params[1]["b"] = np.zeros(4)
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 1, (3, 1, 2, 2))
    logits, _ = nets.forward(net, x)
    assert np.allclose(logits, x.reshape(3, 4))


def test_conv_one_hot_center_kernel_is_identity():
    net = nets.NetworkGraph([nets.Conv2d(1, 1, 3, 1, 1)], (1, 5, 5))
    net.params = nets.init_params(net, 0)
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    net.params[0]["w"] = w
    net.params[0]["b"] = np.zeros(1)
    rng = np.random.default_rng(1)
    x = rng.uniform(0, 1, (2, 1, 5, 5))
    out, _ = nets.forward(net, x)
    assert np.allclose(out, x)


def test_forward_deterministic_replay():
    net = nets.make_network("miniresnet", (1, 8, 8), classes=3, seed=4)
    rng = np.random.default_rng(2)
    x = rng.uniform(0, 1, (4, 1, 8, 8))
    a, taps_a = nets.forward(net, x, taps=net.taps)
    b, taps_b = nets.forward(net, x, taps=net.taps)
    assert np.array_equal(a, b)
    for t in net.taps:
        assert np.array_equal(taps_a[t], taps_b[t])


def test_forward_shape_mismatch():
    net = nets.make_network("mlp-3", (1, 4, 4), classes=2, seed=0)
    with pytest.raises(ShapeError):
        nets.forward(net, np.zeros((2, 1, 5, 5)))


def test_tap_shapes_match_declared():
    net = nets.make_network("miniresnet", (1, 8, 8), classes=3, seed=5)
    x = np.random.default_rng(3).uniform(0, 1, (2, 1, 8, 8))
    _, tapped = nets.forward(net, x, taps=net.taps)
    for t in net.taps:
        declared = int(np.prod(net.output_shapes[t]))
        assert tapped[t].shape == (2, declared)


# ---------------------------------------------------------------------------
# loss and gradients


def test_loss_saturated_softmax_near_zero():
    net = nets.NetworkGraph([nets.Flatten(), nets.Dense(4, 2)], (1, 2, 2))
    net.params = nets.init_params(net, 0)
    rng = np.random.default_rng(4)
    x = rng.uniform(0, 1, (5, 1, 2, 2))
    labels = rng.integers(0, 2, 5)
    logits, state = nets.forward_cache(net, x.reshape(5, 1, 2, 2))
    # force one-hot-correct logits with a huge margin via the bias
    net.params[1]["w"] = np.zeros((4, 2))
    net.params[1]["b"] = np.zeros(2)
    big = np.zeros((5, 2))
    big[np.arange(5), labels] = 50.0
    loss, dlogits = nets.cross_entropy(big, labels)
    assert loss < 1e-8
    assert np.abs(dlogits).max() < 1e-8


def test_single_linear_layer_analytic_gradient():
    net = nets.NetworkGraph([nets.Flatten(), nets.Dense(6, 2)], (1, 2, 3))
    net.params = nets.init_params(net, 1)
    rng = np.random.default_rng(5)
    x = rng.uniform(0, 1, (4, 1, 2, 3))
    labels = rng.integers(0, 2, 4)
    loss, grads, _ = nets.loss_and_grad(net, nets.Batch(x, labels))
    flat = x.reshape(4, 6)
    logits = flat @ net.params[1]["w"] + net.params[1]["b"]
    probs = nets.softmax(logits)
    onehot = np.eye(2)[labels]
    expected_w = flat.T @ (probs - onehot) / 4
    assert np.abs(grads[1]["w"] - expected_w).max() <= 1e-10


@pytest.mark.parametrize(
    "layers,shape",
    [
        ([nets.Flatten(), nets.Dense(16, 3)], (1, 4, 4)),
        ([nets.Conv2d(2, 3, 3, 1, 1), nets.Relu(), nets.Flatten(), nets.Dense(48, 2)], (2, 4, 4)),
        ([nets.Conv2d(1, 2, 3, 2, 1), nets.Flatten(), nets.Dense(18, 2)], (1, 5, 5)),
        ([nets.Conv2d(1, 2, 3, 1, 0), nets.AvgPool(2), nets.Flatten(), nets.Dense(2, 2)], (1, 4, 4)),
        (
            [
                nets.Conv2d(1, 2, 3, 1, 1), nets.Relu(),
                nets.Conv2d(2, 2, 3, 1, 1), nets.ResidualAdd(1), nets.Relu(),
                nets.AvgPool(2), nets.Flatten(), nets.Dense(8, 3),
            ],
            (1, 4, 4),
        ),
    ],
    ids=["dense", "conv-relu", "conv-stride2", "conv-avgpool", "residual"],
)
def test_gradcheck_every_layer_kind(layers, shape):
    net = nets.NetworkGraph(layers, shape)
    net.params = nets.init_params(net, 7)
    rng = np.random.default_rng(6)
    x = rng.uniform(0.05, 0.95, (3,) + shape)
    classes = net.output_shapes[-1][0]
    batch = nets.Batch(x, rng.integers(0, classes, 3))
    assert finite_diff_param_grads(net, batch, stride=3) < 1e-4
    assert finite_diff_input_grad(net, batch, stride=5) < 1e-4


def test_gradcheck_full_miniresnet():
    net = nets.make_network("miniresnet", (1, 8, 8), classes=3, seed=8)
    rng = np.random.default_rng(7)
    batch = nets.Batch(rng.uniform(0, 1, (3, 1, 8, 8)), rng.integers(0, 3, 3))
    assert finite_diff_param_grads(net, batch, stride=29) < 1e-4
    assert finite_diff_input_grad(net, batch, stride=17) < 1e-4


# ---------------------------------------------------------------------------
# init


def test_init_deterministic_per_seed():
    net = nets.make_network("mlp-3", (1, 4, 4), classes=2)
    a = nets.init_params(net, 3)
    b = nets.init_params(net, 3)
    c = nets.init_params(net, 4)
    for pa, pb in zip(a, b):
        for k in pa:
            assert np.array_equal(pa[k], pb[k])
    assert any(
        not np.array_equal(pa[k], pc[k]) for pa, pc in zip(a, c) for k in pa
    )


def test_init_fan_in_scaling():
    net = nets.NetworkGraph([nets.Flatten(), nets.Dense(64, 64)], (1, 8, 8))
    params = nets.init_params(net, 0)
    w = params[1]["w"]  # 4096 samples
    expected = np.sqrt(2.0 / 64)
    assert abs(w.std() - expected) / expected < 0.2


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip(tmp_path):
    net = nets.make_network("miniresnet", (1, 8, 8), classes=3, width_factor=2, seed=9)
    path = tmp_path / "net.rsck"
    nets.save_checkpoint(net, path, epoch=5)
    loaded = nets.load_checkpoint(path)
    assert loaded.arch == net.arch
    assert loaded.width_factor == 2
    assert loaded.input_shape == net.input_shape
    assert loaded.taps == net.taps
    assert len(loaded.params) == len(net.params)
    for pa, pb in zip(net.params, loaded.params):
        for k in pa:
            assert np.array_equal(pb[k], pa[k].astype(np.float32).astype(np.float64))


def test_checkpoint_roundtrip_preserves_f32_forward(tmp_path):
    net = nets.make_network("mlp-3", (1, 4, 4), classes=2, seed=10)
    snap = nets.round_params_f32(net)
    path = tmp_path / "n.rsck"
    nets.save_checkpoint(net, path)
    loaded = nets.load_checkpoint(path)
    rng = np.random.default_rng(8)
    x = rng.uniform(0, 1, (4, 1, 4, 4))
    a, _ = nets.forward(snap, x)
    b, _ = nets.forward(loaded, x)
    assert np.array_equal(a, b)


def test_checkpoint_bad_files(tmp_path):
    net = nets.make_network("mlp-3", (1, 4, 4), classes=2, seed=11)
    path = tmp_path / "x.rsck"
    nets.save_checkpoint(net, path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"ABCD"
    bad = tmp_path / "bad.rsck"
    bad.write_bytes(bytes(raw))
    with pytest.raises(BadMagicError):
        nets.load_checkpoint(bad)
    import struct

    raw = bytearray(path.read_bytes())
    raw[4:6] = struct.pack("<H", 9)
    bad.write_bytes(bytes(raw))
    with pytest.raises(VersionError):
        nets.load_checkpoint(bad)
    bad.write_bytes(path.read_bytes()[:40])
    with pytest.raises(TruncatedError):
        nets.load_checkpoint(bad)


def test_checkpoint_roundtrip_many_random(tmp_path):
    rng = np.random.default_rng(9)
    for i in range(20):
        width = int(rng.integers(1, 3))
        net = nets.make_network("mlp-3", (1, 4, 4), classes=2, width_factor=width, seed=i)
        path = tmp_path / f"r{i}.rsck"
        nets.save_checkpoint(net, path, epoch=i)
        loaded = nets.load_checkpoint(path)
        for pa, pb in zip(net.params, loaded.params):
            for k in pa:
                assert np.array_equal(pb[k], pa[k].astype(np.float32).astype(np.float64))


# ---------------------------------------------------------------------------
# graph validation


def test_residual_shape_mismatch_rejected():
    with pytest.raises(ShapeError):
        nets.NetworkGraph(
            [nets.Conv2d(1, 2, 3, 1, 1), nets.AvgPool(2), nets.ResidualAdd(0)],
            (1, 4, 4),
        )
    with pytest.raises(ShapeError):
        nets.NetworkGraph([nets.ResidualAdd(0)], (1, 4, 4))


def test_conv_geometry_rejected():
    with pytest.raises(ShapeError):
        nets.NetworkGraph([nets.Conv2d(1, 2, 3, 2, 0)], (1, 4, 4))
    with pytest.raises(ShapeError):
        nets.NetworkGraph([nets.AvgPool(3)], (1, 4, 4))
