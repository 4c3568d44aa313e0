import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowcast import autodiff as ad
from flowcast.autodiff import ShapeError, Tensor
from flowcast.layers import (
    Conv2DSpec,
    DenseSpec,
    DropoutSpec,
    LstmParams,
    LstmState,
    MaxPool2DSpec,
    conv2d,
    conv_output_size,
    dense,
    dropout,
    he_uniform_init,
    lstm_cell_step,
    lstm_forward,
    maxpool2d,
)

from conftest import random_lstm


def naive_conv(x, w, b, stride, pad):
    """Direct loop convolution used as the oracle."""
    c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((f, ho, wo))
    for o in range(f):
        for i in range(ho):
            for j in range(wo):
                patch = xp[:, i * stride:i * stride + kh, j * stride:j * stride + kw]
                out[o, i, j] = np.sum(patch * w[o]) + b[o]
    return out


def naive_pool(x, k, stride):
    c, h, w = x.shape
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    out = np.zeros((c, ho, wo))
    for ch in range(c):
        for i in range(ho):
            for j in range(wo):
                out[ch, i, j] = x[ch, i * stride:i * stride + k, j * stride:j * stride + k].max()
    return out


# ---------------------------------------------------------------- convolution

def test_conv_1x1_scales_each_cell():
    spec = Conv2DSpec(np.full((1, 1, 1, 1), 2.0), np.zeros(1))
    out = conv2d(np.array([[[1.0, 3.0], [5.0, 7.0]]]), spec)
    np.testing.assert_array_equal(out.data, [[[2.0, 6.0], [10.0, 14.0]]])


def test_conv_3x3_ones_valid():
    spec = Conv2DSpec(np.ones((1, 1, 3, 3)), np.zeros(1))
    out = conv2d(np.ones((1, 3, 3)), spec)
    assert out.shape == (1, 1, 1) and out.data.item() == 9.0


def test_conv_3x3_ones_same_padding_counts_cells():
    spec = Conv2DSpec(np.ones((1, 1, 3, 3)), np.zeros(1), padding=1)
    out = conv2d(np.ones((1, 3, 3)), spec)
    np.testing.assert_array_equal(out.data[0], [[4.0, 6.0, 4.0], [6.0, 9.0, 6.0], [4.0, 6.0, 4.0]])


def test_conv_identity_filter_is_identity(rng):
    x = rng.standard_normal((1, 5, 4))
    out = conv2d(x, Conv2DSpec(np.ones((1, 1, 1, 1)), np.zeros(1)))
    np.testing.assert_array_equal(out.data, x)


@pytest.mark.parametrize("h,w,k,s,p", [(5, 5, 3, 1, 1), (6, 4, 3, 2, 0), (7, 7, 3, 2, 1),
                                       (4, 5, 1, 1, 0), (8, 8, 5, 3, 2), (3, 3, 3, 1, 0)])
def test_conv_matches_loop_oracle_and_size_formula(rng, h, w, k, s, p):
    x = rng.standard_normal((2, h, w))
    wt = rng.standard_normal((3, 2, k, k))
    b = rng.standard_normal(3)
    out = conv2d(x, Conv2DSpec(wt, b, stride=s, padding=p))
    assert out.shape == (3, conv_output_size(h, k, s, p), conv_output_size(w, k, s, p))
    np.testing.assert_allclose(out.data, naive_conv(x, wt, b, s, p), rtol=1e-12, atol=1e-12)


def test_conv_batch_equals_per_image(rng):
    x = rng.standard_normal((4, 3, 5, 5))
    spec = Conv2DSpec(rng.standard_normal((2, 3, 3, 3)), rng.standard_normal(2), padding=1)
    batched = conv2d(x, spec).data
    for n in range(4):
        np.testing.assert_allclose(batched[n], conv2d(x[n], spec).data, rtol=1e-13, atol=1e-13)


def test_conv_kernel_larger_than_input_is_rejected():
    with pytest.raises(ShapeError):
        conv2d(np.ones((1, 2, 2)), Conv2DSpec(np.ones((1, 1, 3, 3)), np.zeros(1)))


def test_conv_channel_mismatch_is_rejected():
    with pytest.raises(ShapeError):
        conv2d(np.ones((2, 3, 3)), Conv2DSpec(np.ones((1, 3, 1, 1)), np.zeros(1)))


@pytest.mark.parametrize("k,s,p", [(3, 1, 1), (3, 2, 0), (1, 1, 0), (2, 1, 1)])
def test_conv_gradients(rng, k, s, p):
    x = rng.standard_normal((2, 2, 5, 4))

    def fn(t):
        out = conv2d(t["x"], Conv2DSpec(t["w"], t["b"], stride=s, padding=p))
        return ad.sum(ad.tanh(out))

    params = {"x": x, "w": rng.standard_normal((3, 2, k, k)), "b": rng.standard_normal(3)}
    assert ad.grad_check(fn, params) < 1e-4


# ---------------------------------------------------------------- pooling

def test_pool_1x1_is_identity(rng):
    x = rng.standard_normal((3, 4, 5))
    np.testing.assert_array_equal(maxpool2d(x, MaxPool2DSpec((1, 1), 1)).data, x)


def test_pool_2x2_stride_2():
    out = maxpool2d(np.array([[[1.0, 2.0], [3.0, 4.0]]]), MaxPool2DSpec((2, 2), 2))
    np.testing.assert_array_equal(out.data, [[[4.0]]])


def test_pool_2x2_stride_1_sliding():
    x = np.arange(1.0, 10.0).reshape(1, 3, 3)
    out = maxpool2d(x, MaxPool2DSpec((2, 2), 1))
    np.testing.assert_array_equal(out.data, [[[5.0, 6.0], [8.0, 9.0]]])


def test_pool_window_too_large():
    with pytest.raises(ShapeError):
        maxpool2d(np.ones((1, 2, 2)), MaxPool2DSpec((3, 3), 1))


def test_pool_tie_routes_gradient_to_first_maximum():
    t = ad.Tape()
    x = t.param("x", np.array([[[1.0, 5.0], [5.0, 5.0]]]))
    grads = t.backward(ad.sum(maxpool2d(x, MaxPool2DSpec((2, 2), 2))))
    np.testing.assert_array_equal(grads["x"], [[[0.0, 1.0], [0.0, 0.0]]])


@pytest.mark.parametrize("k,s", [(2, 1), (2, 2), (3, 1)])
def test_pool_matches_oracle_and_gradients(rng, k, s):
    x = rng.permutation(2 * 5 * 5).reshape(2, 5, 5) / 7.0  # distinct values, no ties
    out = maxpool2d(x, MaxPool2DSpec((k, k), s))
    np.testing.assert_array_equal(out.data, naive_pool(x, k, s))
    assert out.data.max() <= x.max()
    assert ad.grad_check(lambda t: ad.sum(ad.tanh(maxpool2d(t["x"], MaxPool2DSpec((k, k), s)))), {"x": x}) < 1e-4


# ---------------------------------------------------------------- lstm

def _zero_lstm(hidden, inp, bias_f=0.0):
    z = {f"{k}_{g}": np.zeros(s) for g in "fiog" for k, s in
         (("W", (hidden, inp)), ("U", (hidden, hidden)), ("b", (hidden,)))}
    z["b_f"] = np.full(hidden, bias_f)
    return LstmParams(**z)


def test_lstm_step_zero_params_zero_state():
    out = lstm_cell_step(np.array([1.0, -2.0]), LstmState.zeros(1), _zero_lstm(1, 2))
    assert out.h.data.tolist() == [0.0] and out.c.data.tolist() == [0.0]


def test_lstm_step_zero_params_decays_cell_by_half():
    prev = LstmState(Tensor([0.0]), Tensor([2.0]))
    out = lstm_cell_step(np.array([0.3]), prev, _zero_lstm(1, 1))
    assert out.c.data[0] == 1.0
    assert math.isclose(out.h.data[0], 0.5 * math.tanh(1.0), rel_tol=1e-15)
    assert round(out.h.data[0], 5) == 0.38080


def test_lstm_saturated_forget_gate_preserves_cell():
    prev = LstmState(Tensor([0.0]), Tensor([3.0]))
    out = lstm_cell_step(np.array([0.0]), prev, _zero_lstm(1, 1, bias_f=50.0))
    assert abs(out.c.data[0] - 3.0) < 1e-12


def _manual_step(x, h, c, p):
    def s(z):
        return 1.0 / (1.0 + np.exp(-z))
    gate = {g: getattr(p, f"W_{g}").data @ x + getattr(p, f"U_{g}").data @ h + getattr(p, f"b_{g}").data
            for g in "fiog"}
    c_new = s(gate["f"]) * c + s(gate["i"]) * np.tanh(gate["g"])
    return s(gate["o"]) * np.tanh(c_new), c_new


def test_lstm_forward_single_step_matches_cell(rng):
    p = random_lstm(4, 3, rng)
    x = rng.standard_normal((1, 3))
    step = lstm_cell_step(x[0], LstmState.zeros(4), p)
    np.testing.assert_allclose(lstm_forward(x, p).data, step.h.data, rtol=1e-13, atol=1e-15)


def test_lstm_forward_matches_manual_composition(rng):
    p = random_lstm(5, 3, rng)
    seq = rng.standard_normal((3, 3))
    h, c = np.zeros(5), np.zeros(5)
    for x in seq:
        h, c = _manual_step(x, h, c, p)
    np.testing.assert_allclose(lstm_forward(seq, p).data, h, rtol=1e-12, atol=1e-14)


def test_lstm_zero_params_any_sequence(rng):
    out = lstm_forward(rng.standard_normal((7, 2)), _zero_lstm(3, 2))
    np.testing.assert_array_equal(out.data, np.zeros(3))


def test_lstm_batch_equals_per_sequence(rng):
    p = random_lstm(4, 2, rng)
    seqs = rng.standard_normal((3, 6, 2))
    batched = lstm_forward(seqs, p).data
    for b in range(3):
        np.testing.assert_allclose(batched[b], lstm_forward(seqs[b], p).data, rtol=1e-13, atol=1e-15)


def test_lstm_rejects_empty_and_mismatched(rng):
    p = random_lstm(2, 3, rng)
    with pytest.raises(ValueError):
        lstm_forward(np.zeros((0, 3)), p)
    with pytest.raises(ShapeError):
        lstm_forward(np.zeros((4, 2)), p)
    with pytest.raises(ShapeError):
        lstm_cell_step(np.zeros(2), LstmState.zeros(2), p)


def test_lstm_params_validate_shapes(rng):
    good = {f"{k}_{g}": np.zeros(s) for g in "fiog" for k, s in (("W", (2, 3)), ("U", (2, 2)), ("b", (2,)))}
    good["U_o"] = np.zeros((2, 3))
    with pytest.raises(ShapeError):
        LstmParams(**good)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0.1, 20.0))
def test_lstm_hidden_state_strictly_inside_unit_interval(seed, scale):
    rng = np.random.default_rng(seed)
    p = random_lstm(3, 2, rng, scale=scale)
    prev = LstmState(Tensor(rng.uniform(-1, 1, 3)), Tensor(rng.uniform(-5, 5, 3)))
    h = lstm_cell_step(rng.uniform(-10, 10, 2), prev, p).h.data
    assert (np.abs(h) < 1).all()


def test_lstm_recurrence_gradients_through_long_sequence(rng):
    """BPTT over many steps agrees with finite differences on every gate matrix."""
    names = [f"{k}_{g}" for k in "WUb" for g in "fiog"]
    base = random_lstm(3, 2, rng, scale=0.4)
    params = {n: getattr(base, n).data for n in names}
    seq = rng.standard_normal((2, 40, 2))
    w_out = rng.standard_normal(3)

    def fn(t):
        h = lstm_forward(Tensor(seq), LstmParams(**t))
        return ad.sum(ad.matmul(h, Tensor(w_out.reshape(3, 1))))

    assert ad.grad_check(fn, params) < 1e-4


def test_fused_recurrence_matches_composed_cell_gradients(rng):
    names = [f"{k}_{g}" for k in "WUb" for g in "fiog"]
    base = random_lstm(3, 2, rng)
    seq = rng.standard_normal((2, 5, 2))

    def via_cells(t):
        p = LstmParams(**t)
        state = LstmState.zeros(3, batch=2)
        for step in range(5):
            state = lstm_cell_step(Tensor(seq[:, step]), state, p)
        return ad.sum(ad.tanh(state.h))

    def via_fused(t):
        return ad.sum(ad.tanh(lstm_forward(Tensor(seq), LstmParams(**t))))

    grads = []
    for fn in (via_cells, via_fused):
        tape = ad.Tape()
        grads.append(tape.backward(fn({n: tape.param(n, getattr(base, n).data) for n in names})))
    for n in names:
        np.testing.assert_allclose(grads[0][n], grads[1][n], rtol=1e-10, atol=1e-13)


# ---------------------------------------------------------------- dense, dropout, init

def test_dense_identity():
    x = np.array([1.5, -2.0, 3.0])
    np.testing.assert_array_equal(dense(x, DenseSpec(np.eye(3), np.zeros(3))).data, x)


def test_dense_hand_value():
    assert dense(np.array([2.0, 3.0]), DenseSpec([[1.0, 1.0]], [1.0])).data.tolist() == [6.0]


def test_dense_zero_weight_returns_bias(rng):
    out = dense(rng.standard_normal(4), DenseSpec(np.zeros((1, 4)), [2.5]))
    assert out.data.tolist() == [2.5]


def test_dense_mismatch_and_gradients(rng):
    with pytest.raises(ShapeError):
        dense(np.ones(3), DenseSpec(np.ones((1, 4)), [0.0]))
    params = {"x": rng.standard_normal((4, 3)), "w": rng.standard_normal((2, 3)), "b": rng.standard_normal(2)}
    assert ad.grad_check(lambda t: ad.sum(ad.tanh(dense(t["x"], DenseSpec(t["w"], t["b"])))), params) < 1e-4


def test_dropout_rate_zero_is_identity_in_both_modes(rng):
    x = rng.standard_normal(50)
    for training in (True, False):
        assert dropout(x, DropoutSpec(0.0, training), rng).data.tobytes() == x.tobytes()


def test_dropout_eval_mode_is_identity(rng):
    x = rng.standard_normal((20, 30))
    assert dropout(x, DropoutSpec(0.3, False)).data.tobytes() == x.tobytes()


def test_dropout_statistics():
    rng = np.random.default_rng(0)
    x = np.ones(200_000) + 0.1 * rng.standard_normal(200_000)
    out = dropout(x, DropoutSpec(0.3, True), np.random.default_rng(42)).data
    assert abs(np.mean(out == 0.0) - 0.3) < 0.02
    assert abs(out.mean() - x.mean()) / abs(x.mean()) < 0.03
    kept = out != 0
    np.testing.assert_allclose(out[kept], x[kept] / 0.7, rtol=1e-15)


def test_dropout_gradient_uses_same_mask(rng):
    t = ad.Tape()
    x = t.param("x", np.ones(1000))
    y = dropout(x, DropoutSpec(0.5, True), rng)
    grads = t.backward(ad.sum(y))
    np.testing.assert_array_equal(grads["x"], y.data)


def test_dropout_rate_validation():
    for bad in (-0.1, 1.0):
        with pytest.raises(ValueError):
            DropoutSpec(bad, True)


@pytest.mark.parametrize("fan_in,limit", [(6, 1.0), (24, 0.5)])
def test_he_uniform_limits(fan_in, limit):
    w = he_uniform_init((200, 50), fan_in, np.random.default_rng(3))
    assert math.sqrt(6 / fan_in) == limit
    assert np.abs(w).max() <= limit
    assert np.abs(w).max() > 0.99 * limit


@pytest.mark.parametrize("fan_in", [1, 3, 80, 2048])
def test_he_uniform_is_centered(fan_in):
    w = he_uniform_init((10_000,), fan_in, np.random.default_rng(fan_in))
    assert abs(w.mean()) < math.sqrt(6 / fan_in) / 10


def test_he_uniform_rejects_zero_fan_in():
    with pytest.raises(ValueError):
        he_uniform_init((2,), 0, np.random.default_rng(0))
