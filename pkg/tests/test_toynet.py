import numpy as np
import pytest

from palletdet.dense import HEAD_NAMES, HEADS, SIGMOID_HEADS, SOFTMAX_HEADS, TOTAL_CHANNELS
from palletdet.geometry import OrthoCamera, RigidTransform
from palletdet.losses import central_difference, max_relative_error
from palletdet.toynet import (LINEAR_SCALES, Adam, Conv2D, HeadDecoder, NetConfig, ReLU, SampleContext, ToyNet,
                              load_checkpoint, save_checkpoint)

LAYER_CASES = [
    dict(cin=3, cout=4, k=3, stride=1, dilation=1),
    dict(cin=2, cout=3, k=3, stride=2, dilation=1),
    dict(cin=3, cout=2, k=3, stride=1, dilation=2),
    dict(cin=2, cout=2, k=3, stride=1, dilation=4),
    dict(cin=4, cout=5, k=1, stride=1, dilation=1),
]


def layer_check(layer, x, rng):
    """Relative error of input, weight and bias gradients of <r, layer(x)>."""
    out = layer.forward(x)
    r = rng.normal(size=out.shape)
    layer.dw[...] = 0
    layer.db[...] = 0
    dx = layer.backward(r)

    def value_x(v):
        return float(np.sum(layer.forward(v) * r))

    def value_p(p):
        def fn(v):
            old = p.copy()
            p[...] = v
            val = float(np.sum(layer.forward(x) * r))
            p[...] = old
            return val
        return fn

    errs = [max_relative_error(dx, central_difference(value_x, x, 1e-6))]
    errs.append(max_relative_error(layer.dw, central_difference(value_p(layer.w), layer.w, 1e-6)))
    errs.append(max_relative_error(layer.db, central_difference(value_p(layer.b), layer.b, 1e-6)))
    return max(errs)


@pytest.mark.parametrize("case", LAYER_CASES, ids=lambda c: "k{k}s{stride}d{dilation}".format(**c))
def test_conv_gradients(case):
    rng = np.random.default_rng(0)
    for trial in range(20):
        layer = Conv2D(**case, rng=rng, dtype=np.float64)
        layer.b[...] = rng.normal(size=layer.b.shape)
        h, w = rng.integers(3, 9, size=2)
        x = rng.normal(size=(2, h, w, case["cin"]))
        assert layer_check(layer, x, rng) < 1e-4


def test_conv_matches_direct_convolution():
    rng = np.random.default_rng(1)
    layer = Conv2D(2, 3, 3, stride=2, dilation=1, rng=rng, dtype=np.float64)
    x = rng.normal(size=(1, 7, 6, 2))
    out = layer.forward(x)
    wk = layer.w.reshape(3, 3, 2, 3)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    for i in range(out.shape[1]):
        for j in range(out.shape[2]):
            patch = xp[0, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
            assert np.allclose(out[0, i, j], np.einsum("abc,abcd->d", patch, wk) + layer.b)


def test_conv_shapes_and_validation():
    layer = Conv2D(8, 4, 3, stride=2)
    assert layer.forward(np.zeros((1, 80, 128, 8), np.float32)).shape == (1, 40, 64, 4)
    assert Conv2D(4, 4, 3, dilation=4).forward(np.zeros((1, 20, 32, 4))).shape == (1, 20, 32, 4)
    with pytest.raises(ValueError):
        layer.forward(np.zeros((1, 8, 8, 3)))
    with pytest.raises(ValueError):
        Conv2D(0, 4)


def test_relu_gradient():
    rng = np.random.default_rng(2)
    relu = ReLU()
    for _ in range(20):
        x = rng.normal(size=(2, 4, 4, 3))
        x = np.where(np.abs(x) < 1e-3, 0.1, x)   # stay away from the kink
        r = rng.normal(size=x.shape)
        relu.forward(x)
        dx = relu.backward(r)
        num = central_difference(lambda v: float(np.sum(ReLU().forward(v) * r)), x, 1e-6)
        assert max_relative_error(dx, num) < 1e-4


def camera():
    return OrthoCamera(32, 24, 64.0, 15.5, 11.5, RigidTransform(np.eye(3), np.zeros(3)))


def test_decoder_gradients():
    rng = np.random.default_rng(3)
    dec = HeadDecoder(stride=4)
    for _ in range(20):
        raw = rng.normal(size=(2, 3, 4, TOTAL_CHANNELS))
        anchors = dec.anchors([SampleContext(camera()), None], (3, 4))
        r = {n: rng.normal(size=(2, 3, 4, k)) for n, k in HEADS.items()}

        def value(v):
            pred = dec.decode(v, anchors)
            return float(sum(np.sum(pred[n] * r[n]) for n in HEAD_NAMES))
        draw = dec.backward(dec.decode(raw, anchors), r)
        # smooth everywhere, so a wider step keeps round-off of the large sum small
        assert max_relative_error(draw, central_difference(value, raw, 1e-4)) < 1e-4


def test_decoder_head_ranges_and_anchors():
    dec = HeadDecoder(stride=4)
    raw = np.zeros((1, 3, 4, TOTAL_CHANNELS))
    ctx = SampleContext(camera(), prior=(0.3, 0.4, 0.2))
    pred = dec.decode(raw, dec.anchors([ctx], (3, 4)))
    for n in SOFTMAX_HEADS:
        assert np.allclose(pred[n].sum(-1), 1.0)
    for n in SIGMOID_HEADS:
        assert np.all(pred[n] == 0.5)
    assert np.allclose(pred["dims_slh"], [0.3, 0.4, 0.2])
    assert np.allclose(pred["position"][0, 1, 2], [(8 - 15.5) / 64, (4 - 11.5) / 64, 2.5])
    assert np.allclose(pred["front_distance"], 2.5)
    bare = dec.decode(raw)
    for n in LINEAR_SCALES:
        assert np.all(bare[n] == 0)
    assert set(LINEAR_SCALES) | set(SOFTMAX_HEADS) | set(SIGMOID_HEADS) == set(HEAD_NAMES)


def micro_net(seed=1):
    return ToyNet(NetConfig(in_channels=2, widths=(1, 1, 1, 1), out_channels=4), seed=seed, dtype=np.float64)


def test_micro_net_end_to_end_gradient():
    rng = np.random.default_rng(4)
    worst = 0.0
    for trial in range(10):
        net = micro_net(trial)
        assert net.n_params() < 300
        for layer in net.layers:
            if isinstance(layer, Conv2D):
                layer.b[...] = rng.uniform(0.05, 0.3, layer.b.shape)
        x = rng.normal(size=(2, 12, 16, 2))
        r = rng.normal(size=(2, 3, 4, 4))
        net.zero_grad()
        net.forward(x)
        net.backward(r)
        analytic = net.flat_grad()
        w0 = net.get_flat().copy()

        def value(w):
            net.set_flat(w)
            return float(np.sum(net.forward(x) * r))
        numeric = central_difference(value, w0, 1e-6)
        net.set_flat(w0)
        worst = max(worst, max_relative_error(analytic, numeric))
    assert worst < 1e-3


def test_zero_fixed_points():
    net = ToyNet(NetConfig(in_channels=3, widths=(4, 4, 4, 4), out_channels=5), seed=0)
    assert np.all(net.forward(np.zeros((1, 16, 16, 3))) == 0)   # biases start at zero
    net.set_flat(np.zeros(net.n_params()))
    x = np.random.default_rng(0).normal(size=(2, 16, 16, 3))
    assert np.all(net.forward(x) == 0)


def test_default_architecture():
    net = ToyNet(NetConfig())
    assert net.n_params() == 61206
    out = net.forward(np.zeros((2, 80, 128, 8), np.float32))
    assert out.shape == (2, 20, 32, TOTAL_CHANNELS)
    with pytest.raises(ValueError):
        NetConfig(widths=(8, 8))


def test_determinism_and_batch_independence():
    a, b = ToyNet(seed=3), ToyNet(seed=3)
    assert np.array_equal(a.get_flat(), b.get_flat())
    assert not np.array_equal(a.get_flat(), ToyNet(seed=4).get_flat())
    x = np.random.default_rng(5).normal(size=(1, 32, 48, 8)).astype(np.float32)
    single = a.forward(x)
    double = a.forward(np.concatenate([x, x]))
    assert np.array_equal(double[0], double[1])
    assert np.allclose(double[:1], single, atol=1e-6)


def test_flat_parameter_round_trip():
    net = micro_net()
    w = np.arange(net.n_params(), dtype=np.float64)
    net.set_flat(w)
    assert np.array_equal(net.get_flat(), w)
    with pytest.raises(ValueError):
        net.set_flat(w[:-1])


def test_adam_first_step_and_convergence():
    p = np.array([1.0, -2.0])
    opt = Adam([p])
    opt.step([np.array([0.5, -3.0])], lr=0.1)
    # the bias-corrected first step moves each coordinate by lr against the gradient sign
    assert np.allclose(p, [0.9, -1.9], atol=1e-6)
    q = np.array([3.0])
    opt = Adam([q])
    for _ in range(2000):
        opt.step([2 * (q - 1.0)], lr=0.01)
    assert abs(q[0] - 1.0) < 1e-3


def test_checkpoint_round_trip(tmp_path):
    net = ToyNet(NetConfig(widths=(8, 8, 8, 8)), seed=2)
    path = tmp_path / "net.ckpt"
    save_checkpoint(net, path)
    back = load_checkpoint(path)
    assert back.cfg == net.cfg
    assert np.array_equal(back.get_flat(), net.get_flat().astype(np.float32))
    raw = path.read_bytes()
    assert raw[:8] == b"PDNET001"
    (tmp_path / "bad.ckpt").write_bytes(b"NOTANET0" + raw[8:])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "short.ckpt").write_bytes(raw[:-4])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "short.ckpt")
    (tmp_path / "long.ckpt").write_bytes(raw + b"\0")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "long.ckpt")
