import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from remi.core import SGD, Conv2d, Dense, Flatten, MaxPool2d, Network, ReLU, Softmax, Tensor, cross_entropy
from remi.core import checkpoint
from remi.core import tensor as T
from remi.core.nn import EPS, nll
from remi.errors import DimensionError, FormatError, InputError, NumericError, StateError

from helpers import gradcheck, tiny_cnn, tiny_mlp


# forward ------------------------------------------------------------------------

def test_lone_softmax_on_zeros_is_uniform():
    net = Network([Softmax()], (4,))
    out = net.forward(np.zeros((3, 4))).data
    np.testing.assert_allclose(out, 0.25)


def test_identity_dense_softmax_hand_value():
    net = Network([Dense(2, 2), Softmax()], (2,))
    net.set_flat(np.array([1.0, 0.0, 0.0, 1.0, 0.0, 0.0]))
    out = net.forward(np.array([[10.0, 0.0]])).data[0]
    e = math.exp(-10.0)
    np.testing.assert_allclose(out, [1 / (1 + e), e / (1 + e)], rtol=1e-12)
    np.testing.assert_allclose(out, [0.9999546, 0.0000454], atol=1e-7)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (5, 6), elements=st.floats(-1e3, 1e3)))
def test_softmax_rows_sum_to_one(x):
    p = T.softmax(Tensor(x)).data
    assert np.all(p >= 0) and np.all(p <= 1)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


def test_forward_rejects_bad_shape_and_nonfinite():
    net = tiny_mlp()
    with pytest.raises(DimensionError):
        net.forward(np.zeros((2, 7)))
    x = np.zeros((2, 6))
    x[0, 0] = np.nan
    with pytest.raises(NumericError):
        net.forward(x)


def test_network_requires_final_softmax():
    with pytest.raises(InputError):
        Network([Dense(3, 2)], (3,))


def test_layer_shapes_must_compose():
    with pytest.raises(DimensionError):
        Network([Dense(3, 4), Dense(5, 2), Softmax()], (3,))


def test_parametric_layers_own_weight_and_bias():
    net = tiny_cnn()
    for layer in net.layers:
        expected = 2 if isinstance(layer, (Dense, Conv2d)) else 0
        assert len(layer.params) == expected


def test_cnn_output_is_probability():
    net = tiny_cnn()
    p = net.forward(np.random.default_rng(0).normal(size=(4, 16))).data
    assert p.shape == (4, 3)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


# cross-entropy ------------------------------------------------------------------

def test_cross_entropy_closed_forms():
    assert cross_entropy(Tensor([[0.5, 0.5]]), [0]).item() == pytest.approx(math.log(2), abs=1e-12)
    uniform = Tensor(np.full((7, 10), 0.1))
    assert cross_entropy(uniform, np.arange(7)).item() == pytest.approx(math.log(10), abs=1e-12)


def test_cross_entropy_perfect_and_zero_probability():
    assert 0.0 <= cross_entropy(Tensor([[0.0, 1.0, 0.0]]), [1]).item() <= -math.log(1 - EPS)
    loss = cross_entropy(Tensor([[1.0, 0.0]]), [1]).item()
    assert loss == pytest.approx(-math.log(EPS))


def test_cross_entropy_label_range():
    with pytest.raises(InputError):
        cross_entropy(Tensor([[0.5, 0.5]]), [2])
    with pytest.raises(InputError):
        cross_entropy(Tensor([[0.5, 0.5]]), [-1])


def test_nll_stays_accurate_when_probability_rounds_to_one():
    # p[y] == 1.0 in float64, the off-label mass is still representable
    logits = Tensor(np.array([[50.0, 0.0, 0.0]]))
    loss = nll(T.softmax(logits), [0]).item()
    assert loss == pytest.approx(2 * math.exp(-50.0), rel=1e-9)


# backward ---------------------------------------------------------------------

def test_gradcheck_cnn_every_layer_kind():
    rng = np.random.default_rng(0)
    X, y = rng.normal(size=(8, 16)), rng.integers(0, 3, 8)
    assert gradcheck(tiny_cnn(), X, y) <= 1e-4


def test_gradcheck_two_layer_dense():
    rng = np.random.default_rng(3)
    X, y = rng.normal(size=(8, 6)), rng.integers(0, 3, 8)
    assert gradcheck(tiny_mlp(seed=4), X, y) <= 1e-4


def test_gradcheck_strided_conv_and_overlapping_pool():
    net = Network([Conv2d(2, 2, 3, stride=2, padding=1), ReLU(), MaxPool2d(2, 1), Flatten(), Dense(2, 2),
                   Softmax()], (2, 4, 4), seed=5)
    rng = np.random.default_rng(5)
    X, y = rng.normal(size=(8, 32)), rng.integers(0, 2, 8)
    assert gradcheck(net, X, y) <= 1e-4


def test_unused_parameter_gets_zero_gradient():
    a = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    T.sum_(T.mul(a, 2.0)).backward()
    np.testing.assert_array_equal(a.grad, 2.0)
    assert b.grad is None


def test_dead_hidden_unit_weights_get_zero_gradient():
    net = tiny_mlp()
    first = net.layers[0]
    first.bias.data[0] = -1e3  # unit 0 never activates
    rng = np.random.default_rng(0)
    net.backward(cross_entropy(net.forward(rng.normal(size=(8, 6))), rng.integers(0, 3, 8)))
    assert not np.any(first.weight.grad[:, 0])
    assert not np.any(net.layers[2].weight.grad[0])


def test_gradient_linearity():
    net = tiny_cnn()
    rng = np.random.default_rng(1)
    X, y = rng.normal(size=(4, 16)), rng.integers(0, 3, 4)
    g1 = net.backward(cross_entropy(net.forward(X), y)).copy()
    g3 = net.backward(T.mul(cross_entropy(net.forward(X), y), 3.0))
    np.testing.assert_allclose(g3, 3.0 * g1, rtol=1e-6)


def test_backward_without_forward_is_state_error():
    with pytest.raises(StateError):
        Tensor(np.ones(1), requires_grad=True).backward()


def test_backward_is_deterministic():
    rng = np.random.default_rng(2)
    X, y = rng.normal(size=(5, 16)), rng.integers(0, 3, 5)
    n1, n2 = tiny_cnn(), tiny_cnn()
    g1 = n1.backward(cross_entropy(n1.forward(X), y))
    g2 = n2.backward(cross_entropy(n2.forward(X), y))
    assert np.array_equal(g1, g2)


# SGD ---------------------------------------------------------------------------

def _quadratic_steps(momentum, lr, max_steps=5000):
    w = Tensor(np.zeros(1), requires_grad=True)
    opt = SGD([w], lr=lr, momentum=momentum)
    for step in range(1, max_steps + 1):
        opt.step(2.0 * (w.data - 3.0))
        if abs(w.data[0] - 3.0) < 1e-6:
            return step, w.data[0]
    return max_steps + 1, w.data[0]


def test_sgd_zero_lr_is_noop():
    net = tiny_mlp()
    before = net.get_flat()
    SGD(net.params, lr=0.0, momentum=0.9).step(np.ones(net.param_count))
    assert np.array_equal(net.get_flat(), before)


def test_sgd_quadratic_converges():
    w = Tensor(np.zeros(1), requires_grad=True)
    opt = SGD([w], lr=0.1)
    for _ in range(100):
        opt.step(2.0 * (w.data - 3.0))
    assert abs(w.data[0] - 3.0) < 1e-6


def test_plain_gd_step_count_matches_closed_form():
    # error contracts by |1 - 2 lr| = 0.8 per step: first k with 3 * 0.8**k < 1e-6
    steps, _ = _quadratic_steps(0.0, 0.1)
    assert steps == math.ceil(math.log(3e6) / math.log(1.25)) == 67


def test_momentum_speedup_depends_on_conditioning():
    # at lr=0.1 heavy-ball (beta=0.9) is underdamped, |eigenvalue| = sqrt(0.9) > 0.8
    plain, _ = _quadratic_steps(0.0, 0.1)
    heavy, w = _quadratic_steps(0.9, 0.1)
    assert abs(w - 3.0) < 1e-6 and heavy > plain
    # small steps (contraction 0.98 without momentum) are where momentum pays off
    plain, _ = _quadratic_steps(0.0, 0.01)
    heavy, w = _quadratic_steps(0.9, 0.01)
    assert abs(w - 3.0) < 1e-6 and heavy < plain


def test_sgd_weight_decay_and_momentum_update():
    w = Tensor(np.array([1.0]), requires_grad=True)
    opt = SGD([w], lr=0.5, momentum=0.9, weight_decay=0.1)
    opt.step(np.array([1.0]))  # v = 1.1
    assert w.data[0] == pytest.approx(1.0 - 0.55)
    opt.step(np.array([1.0]))  # v = 0.9 * 1.1 + 1 + 0.1 * 0.45
    assert w.data[0] == pytest.approx(0.45 - 0.5 * (0.99 + 1.045))


def test_sgd_refuses_nonfinite_gradient():
    net = tiny_mlp()
    before = net.get_flat()
    g = np.zeros(net.param_count)
    g[3] = np.inf
    with pytest.raises(NumericError):
        SGD(net.params, lr=0.1).step(g)
    assert np.array_equal(net.get_flat(), before)


def test_sgd_rejects_wrong_gradient_length():
    net = tiny_mlp()
    with pytest.raises(InputError):
        SGD(net.params, lr=0.1).step(np.zeros(3))


def test_training_steps_are_bit_identical_per_seed():
    rng = np.random.default_rng(0)
    X, y = rng.normal(size=(16, 16)), rng.integers(0, 3, 16)

    def run():
        net = tiny_cnn(seed=11)
        opt = SGD(net.params, lr=0.05, momentum=0.9, weight_decay=5e-4)
        for _ in range(5):
            net.backward(cross_entropy(net.forward(X), y))
            opt.step()
        return net.get_flat()

    assert np.array_equal(run(), run())


# flat params and checkpoints -------------------------------------------------------

def test_flatten_unflatten_identity():
    net = tiny_cnn()
    flat = net.get_flat()
    other = tiny_cnn(seed=99)
    other.set_flat(flat)
    assert np.array_equal(other.get_flat(), flat)


def test_checkpoint_round_trip(tmp_path):
    net = tiny_cnn(seed=7)
    checkpoint.save(net, tmp_path / "m.remi")
    back = checkpoint.load(tmp_path / "m.remi")
    assert back.rng_seed == 7 and back.input_shape == net.input_shape
    assert [type(layer) for layer in back.layers] == [type(layer) for layer in net.layers]
    assert [layer.hyper for layer in back.layers] == [layer.hyper for layer in net.layers]
    assert np.array_equal(back.get_flat(), net.get_flat())
    X = np.random.default_rng(0).normal(size=(3, 16))
    assert np.array_equal(back.forward(X).data, net.forward(X).data)


def test_checkpoint_header_bytes():
    buf = checkpoint.dumps(tiny_mlp())
    assert buf[:4] == b"REMI"
    assert struct.unpack_from("<IQ", buf, 4) == (1, 1)


def test_checkpoint_rejects_bad_magic_version_truncation():
    buf = checkpoint.dumps(tiny_mlp())
    with pytest.raises(FormatError):
        checkpoint.loads(b"XXXX" + buf[4:])
    with pytest.raises(FormatError):
        checkpoint.loads(buf[:4] + struct.pack("<I", 2) + buf[8:])
    with pytest.raises(FormatError):
        checkpoint.loads(buf[:-3])
    with pytest.raises(FormatError):
        checkpoint.loads(buf + b"\x00")
    with pytest.raises(FormatError):
        checkpoint.loads(b"")
