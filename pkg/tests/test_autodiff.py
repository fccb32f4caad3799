import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mbam.autodiff import (
    LayerSpec,
    Network,
    conv_output_size,
    grad_check,
    mse_loss,
    sgd_step,
    softmax,
    softmax_ce_loss,
)
from mbam.errors import FreezeError, LabelError, NumericalError, ShapeError, StateError


def conv(k, s, p, i=1, o=1):
    return LayerSpec("conv2d", (k, k), (s, s), (p, p), in_maps=i, out_maps=o)


# -- shapes -----------------------------------------------------------------


def test_conv_preserves_shape():
    net = Network([conv(5, 1, 2, 3, 4)], (3, 11, 40))
    assert net.output_shape == (4, 11, 40)


@pytest.mark.parametrize("stride, expected", [(2, (1, 5, 20)), (1, (1, 10, 39))])
def test_maxpool_shapes(stride, expected):
    net = Network([LayerSpec("maxpool2d", (2, 2), (stride, stride))], (1, 11, 40))
    assert net.output_shape == expected


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(1, 3), st.integers(0, 2), st.integers(5, 12), st.integers(5, 12))
def test_conv_shape_formula(k, s, p, h, w):
    net = Network([conv(k, s, p)], (1, h, w), dtype=np.float64)
    oh, ow = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
    assert net.output_shape == (1, oh, ow)
    assert conv_output_size(h, k, s, p) == oh
    assert net.forward(np.zeros((2, 1, h, w))).shape == (2, 1, oh, ow)


def test_conv_against_direct_oracle():
    rng = np.random.default_rng(0)
    net = Network([conv(3, 2, 1, 2, 3)], (2, 7, 6), dtype=np.float64, seed=1)
    x = rng.standard_normal((2, 2, 7, 6))
    layer = net.layers[0]
    w, b = layer.weight, layer.bias
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = net.forward(x)
    for n in range(2):
        for o in range(3):
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    patch = xp[n, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3]
                    ref = np.sum(patch * w[o].reshape(2, 3, 3)) + b[o]
                    assert out[n, o, i, j] == pytest.approx(ref, abs=1e-12)


def test_shape_error_names_layer():
    net = Network([conv(3, 1, 1)], (1, 5, 5))
    with pytest.raises(ShapeError):
        net.forward(np.zeros((1, 2, 5, 5)))
    with pytest.raises(ShapeError):
        Network([conv(3, 1, 0, 2, 1)], (1, 5, 5))


def test_params_contiguous_and_disjoint():
    net = Network([conv(3, 1, 1, 1, 2), LayerSpec("relu"), LayerSpec("linear", out_dim=3)], (1, 4, 4))
    slices = sorted(net.slices.values(), key=lambda s: s.start)
    assert slices[0].start == 0 and slices[-1].stop == net.n_params
    assert all(a.stop == b.start for a, b in zip(slices, slices[1:]))
    for layer in net.param_layers:
        assert np.shares_memory(layer.weight, net.params)


# -- losses -------------------------------------------------------------------


def test_ce_uniform_logits():
    loss, _ = softmax_ce_loss(np.zeros((3, 7)), np.array([0, 3, 6]))
    assert loss == pytest.approx(np.log(7), abs=1e-15)


def test_ce_saturated():
    logits = np.zeros((2, 4))
    logits[[0, 1], [1, 2]] = 1000
    loss, grad = softmax_ce_loss(logits, np.array([1, 2]))
    assert loss == pytest.approx(0, abs=1e-12)
    assert np.all(np.isfinite(grad))


def test_ce_matches_direct_oracle():
    rng = np.random.default_rng(3)
    logits = rng.standard_normal((4, 3)) * 3
    labels = np.array([0, 2, 1, 2])
    loss, _ = softmax_ce_loss(logits, labels)
    z = logits.astype(np.longdouble)
    ref = -np.mean(z[np.arange(4), labels] - np.log(np.exp(z).sum(axis=1)))
    assert loss == pytest.approx(float(ref), rel=1e-6)


def test_ce_label_out_of_range():
    with pytest.raises(LabelError):
        softmax_ce_loss(np.zeros((2, 3)), np.array([0, 3]))


def test_mse_identity_and_hand_value():
    x = np.random.default_rng(0).standard_normal((2, 40))
    loss, grad = mse_loss(x, x)
    assert loss == 0 and not grad.any()
    loss, _ = mse_loss(x + 1, x)
    assert loss == pytest.approx(40.0)


def test_mse_direct_oracle():
    rng = np.random.default_rng(1)
    p, t = rng.standard_normal((5, 6)), rng.standard_normal((5, 6))
    loss, grad = mse_loss(p, t)
    assert loss == pytest.approx(np.mean(np.sum((t - p) ** 2, axis=1)), rel=1e-10)
    assert np.allclose(grad, 2 * (p - t) / 5)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_softmax_rows_sum_to_one(seed):
    x = np.random.default_rng(seed).uniform(-50, 50, size=(4, 9))
    assert np.allclose(softmax(x).sum(axis=1), 1, atol=1e-6)


# -- backward, freeze, sgd -------------------------------------------------------


def small_net(dtype=np.float64, seed=0):
    specs = [conv(3, 1, 1, 2, 3), LayerSpec("relu"), LayerSpec("maxpool2d", (2, 2), (2, 2)),
             LayerSpec("linear", out_dim=4), LayerSpec("sigmoid"), LayerSpec("linear", out_dim=3),
             LayerSpec("softmax_out")]
    return Network(specs, (2, 6, 6), dtype=dtype, seed=seed)


def test_backward_without_forward():
    net = small_net()
    with pytest.raises(StateError):
        net.backward(np.zeros((1, 3)))


def test_zero_upstream_gives_zero_grads():
    net = small_net()
    net.forward(np.random.default_rng(0).standard_normal((2, 2, 6, 6)), logits=True)
    net.backward(np.zeros((2, 3)))
    assert not net.grads.any()


def test_frozen_network_keeps_grads_but_passes_input_grad():
    net = small_net().freeze()
    net.forward(np.random.default_rng(0).standard_normal((2, 2, 6, 6)), logits=True)
    dx = net.backward(np.ones((2, 3)))
    assert not net.grads.any()
    assert np.abs(dx).sum() > 0


def test_frozen_forward_bit_identical():
    net = small_net().freeze()
    x = np.random.default_rng(0).standard_normal((3, 2, 6, 6))
    assert np.array_equal(net.forward(x), net.forward(x))


def test_nan_activation_raises():
    net = small_net()
    x = np.zeros((1, 2, 6, 6))
    x[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericalError):
        net.forward(x)


def test_maxpool_ties_go_to_first_index():
    net = Network([LayerSpec("maxpool2d", (2, 2), (2, 2))], (1, 2, 2), dtype=np.float64)
    net.forward(np.ones((1, 1, 2, 2)))
    dx = net.backward(np.ones((1, 1, 1, 1)))
    assert np.array_equal(dx[0, 0], [[1, 0], [0, 0]])


@pytest.mark.parametrize("kind", ["relu", "sigmoid", "tanh", "scale"])
def test_activation_gradients(kind):
    spec = LayerSpec(kind, scale=1.5) if kind == "scale" else LayerSpec(kind)
    net = Network([LayerSpec("linear", out_dim=6), spec, LayerSpec("linear", out_dim=3)], (5,),
                  dtype=np.float64, seed=0)
    rng = np.random.default_rng(1)
    err = grad_check(net, rng.standard_normal((4, 5)), "ce", rng.integers(0, 3, 4), check_input=True)
    assert err < 1e-6


def test_linear_mse_grad_check_tiny():
    net = Network([LayerSpec("linear", out_dim=3)], (4,), dtype=np.float64, seed=0)
    rng = np.random.default_rng(0)
    assert grad_check(net, rng.standard_normal((5, 4)), "mse", rng.standard_normal((5, 3))) < 1e-7


def test_small_cnn_grad_check():
    net = small_net()
    rng = np.random.default_rng(2)
    res = grad_check(net, rng.standard_normal((3, 2, 6, 6)), "ce", rng.integers(0, 3, 3),
                     check_input=True, return_details=True)
    assert res.max_rel_error < 1e-4
    assert res.n_checked > 200


def test_grad_check_catches_wrong_gradient():
    net = Network([LayerSpec("linear", out_dim=3)], (4,), dtype=np.float64, seed=0)
    real_backward = net.backward

    def broken(upstream, input_grad=True):
        out = real_backward(upstream, input_grad)
        net.grads[0] += 1.0
        return out

    net.backward = broken
    rng = np.random.default_rng(0)
    assert grad_check(net, rng.standard_normal((2, 4)), "mse", rng.standard_normal((2, 3))) > 1e-2


def test_grad_check_restores_state():
    net = small_net()
    before = net.params.copy()
    grad_check(net, np.zeros((1, 2, 6, 6)), "ce", np.array([1]), n_samples=20)
    assert np.array_equal(before, net.params)


def test_grad_check_requires_float64():
    with pytest.raises(TypeError):
        grad_check(small_net(np.float32), np.zeros((1, 2, 6, 6)), "ce", np.array([0]))


def test_sgd_zero_lr():
    net = small_net()
    net.grads[...] = 1
    before = net.params.copy()
    sgd_step(net, 0.0)
    assert np.array_equal(before, net.params)
    assert not net.grads.any()


def test_sgd_hand_computed():
    net = Network([LayerSpec("scale", scale=1.0), LayerSpec("linear", out_dim=1)], (1,), dtype=np.float64)
    net.params[...] = [1.0, 0.0]
    net.grads[...] = [0.5, 0.0]
    sgd_step(net, 0.01)
    assert net.params[0] == pytest.approx(0.995, abs=1e-15)


def test_sgd_frozen():
    with pytest.raises(FreezeError):
        sgd_step(small_net().freeze(), 0.1)


def test_sgd_quadratic_monotone():
    net = Network([LayerSpec("linear", out_dim=2)], (3,), dtype=np.float64, seed=0)
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal((16, 3)), rng.standard_normal((16, 2))
    losses = []
    for _ in range(30):
        loss, g = mse_loss(net.forward(x), y)
        net.backward(g, input_grad=False)
        sgd_step(net, 0.05)
        losses.append(loss)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_copy_and_checksum():
    net = small_net()
    c = net.copy()
    assert c.checksum() == net.checksum()
    c.params[0] += 1
    assert c.checksum() != net.checksum()
    assert c.copy(np.float32).dtype == np.float32


def test_describe_lists_every_layer():
    text = small_net().describe()
    assert len(text.splitlines()) == 1 + 7 + 1
    assert "maxpool2d" in text and "softmax_out" in text
