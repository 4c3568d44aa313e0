import numpy as np
import pytest

from flowcast import autodiff as ad
from flowcast.autodiff import ShapeError, Tensor
from flowcast.cli import reduced_gradient_error
from flowcast.layers import DenseSpec, LstmParams, LstmState, dense, lstm_cell_step
from flowcast.model import (
    CNN_LSTM,
    LSTM,
    TABLE_1_CONV_STACK,
    CnnLstmConfig,
    GridTooSmallError,
    LstmBaselineConfig,
    build_cnn_lstm,
    build_lstm_baseline,
    build_model,
    conv_stack_forward,
    constants,
    count_parameters,
    forward_cnn_lstm,
    forward_lstm_baseline,
    graph,
    predict,
)


def zeroed(params):
    return params.with_tensors({k: np.zeros_like(v) for k, v in params.tensors.items()})


def test_default_layer_stack():
    cfg = CnnLstmConfig(8, 8)
    assert cfg.layer_stack() == (("conv", 32, 1), ("conv", 16, 3), ("maxpool", 1), ("conv", 32, 1),
                                 ("maxpool", 1), ("dropout", 0.3), ("lstm", 80), ("dense", 1))
    assert cfg.lookback == 182 and cfg.channels == 3
    assert cfg.conv_stack == TABLE_1_CONV_STACK


def test_feature_size_8x8(rng):
    cfg = CnnLstmConfig(8, 8)
    p = build_cnn_lstm(cfg, rng)
    out = conv_stack_forward(cfg, constants(p), rng.standard_normal((2, 3, 8, 8)))
    assert out.shape == (2, 32, 8, 8)
    assert cfg.feature_size == 2048
    assert p.tensors["lstm.W_f"].shape == (80, 2048)


def test_feature_size_3x3():
    assert CnnLstmConfig(3, 3).feature_size == 288


@pytest.mark.parametrize("h,w", [(2, 5), (5, 2), (1, 1)])
def test_grid_too_small(h, w, rng):
    with pytest.raises(GridTooSmallError):
        build_cnn_lstm(CnnLstmConfig(h, w), rng)


def test_parameter_names_and_counts(rng):
    p = build_cnn_lstm(CnnLstmConfig(4, 4, lookback=5), rng)
    assert list(p.tensors)[:6] == ["conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias",
                                   "conv3.weight", "conv3.bias"]
    assert count_parameters({k: p.tensors[k] for k in ("conv1.weight", "conv1.bias")}) == 32 * 3 + 32
    assert count_parameters({k: p.tensors[k] for k in ("dense.weight", "dense.bias")}) == 81
    d = 32 * 16
    lstm = {k: v for k, v in p.tensors.items() if k.startswith("lstm.")}
    assert count_parameters(lstm) == 4 * (80 * d + 80 * 80 + 80)


def test_baseline_parameter_count(rng):
    p = build_lstm_baseline(LstmBaselineConfig(), rng)
    assert count_parameters(p) == 4 * (80 * 3 + 80 * 80 + 80) + 81


def test_he_uniform_limits_per_layer(rng):
    p = build_cnn_lstm(CnnLstmConfig(5, 5, lookback=3), rng)
    limits = {"conv1.weight": np.sqrt(6 / 3), "conv2.weight": np.sqrt(6 / (32 * 9)),
              "conv3.weight": np.sqrt(6 / 16), "lstm.W_f": np.sqrt(6 / (32 * 25)),
              "lstm.U_g": np.sqrt(6 / 80), "dense.weight": np.sqrt(6 / 80)}
    for name, limit in limits.items():
        assert np.abs(p.tensors[name]).max() <= limit
    assert not p.tensors["conv2.bias"].any()


def test_build_model_rejects_unknown(rng):
    with pytest.raises(ValueError):
        build_model("transformer", LstmBaselineConfig(), rng)


def test_zero_parameters_predict_zero(rng):
    cnn = zeroed(build_cnn_lstm(CnnLstmConfig(4, 4, lookback=6, lstm_hidden=5), rng))
    assert forward_cnn_lstm(cnn, rng.standard_normal((6, 3, 4, 4))) == 0.0
    base = zeroed(build_lstm_baseline(LstmBaselineConfig(lookback=6, lstm_hidden=5), rng))
    assert forward_lstm_baseline(base, rng.standard_normal((6, 3))) == 0.0


def test_single_frame_oracle(rng):
    cfg = CnnLstmConfig(3, 4, lookback=1, lstm_hidden=6)
    p = build_cnn_lstm(cfg, rng)
    video = rng.standard_normal((1, 3, 3, 4))
    feat = conv_stack_forward(cfg, constants(p), video).data.reshape(-1)
    lp = LstmParams.from_mapping(p.tensors)
    h = lstm_cell_step(feat, LstmState.zeros(6), lp).h
    expected = dense(h, DenseSpec(p.tensors["dense.weight"], p.tensors["dense.bias"])).data[0]
    assert forward_cnn_lstm(p, video) == pytest.approx(expected, rel=1e-12, abs=1e-14)


def test_baseline_single_step_oracle(rng):
    p = build_lstm_baseline(LstmBaselineConfig(lookback=1, lstm_hidden=4), rng)
    x = rng.standard_normal((1, 3))
    h = lstm_cell_step(x[0], LstmState.zeros(4), LstmParams.from_mapping(p.tensors)).h
    expected = dense(h, DenseSpec(p.tensors["dense.weight"], p.tensors["dense.bias"])).data[0]
    assert forward_lstm_baseline(p, x) == pytest.approx(expected, rel=1e-12, abs=1e-14)


def test_frame_order_matters(rng):
    p = build_cnn_lstm(CnnLstmConfig(3, 3, lookback=4, lstm_hidden=5), rng)
    video = rng.standard_normal((4, 3, 3, 3))
    swapped = video[[1, 0, 2, 3]]
    assert abs(forward_cnn_lstm(p, video) - forward_cnn_lstm(p, swapped)) > 1e-9


def test_baseline_extreme_inputs_are_finite(rng):
    p = build_lstm_baseline(LstmBaselineConfig(lookback=20), rng)
    seq = 10.0 * rng.choice([-1.0, 1.0], (20, 3))
    assert np.isfinite(forward_lstm_baseline(p, seq))


def test_time_distribution_shares_weights(rng):
    cfg = CnnLstmConfig(4, 4, lookback=5)
    consts = constants(build_cnn_lstm(cfg, rng))
    video = rng.standard_normal((5, 3, 4, 4))
    together = conv_stack_forward(cfg, consts, video).data
    for t in range(5):
        alone = conv_stack_forward(cfg, consts, video[t:t + 1]).data[0]
        np.testing.assert_allclose(together[t], alone, rtol=1e-13, atol=1e-13)


def test_trace_reports_per_frame_vectors(rng):
    p = build_cnn_lstm(CnnLstmConfig(5, 6, lookback=7, lstm_hidden=3), rng)
    trace = {}
    forward_cnn_lstm(p, rng.standard_normal((7, 3, 5, 6)), trace=trace)
    assert trace["frame_features"] == (1, 7, 32 * 30)
    assert trace["conv_output"] == (7, 32, 5, 6)
    assert trace["lstm_hidden"] == (1, 3)


def test_eval_forward_is_deterministic(rng):
    p = build_cnn_lstm(CnnLstmConfig(4, 4, lookback=6), rng)
    video = rng.standard_normal((6, 3, 4, 4))
    a, b = forward_cnn_lstm(p, video), forward_cnn_lstm(p, video)
    assert np.float64(a).tobytes() == np.float64(b).tobytes()


def test_shape_errors(rng):
    p = build_cnn_lstm(CnnLstmConfig(4, 4, lookback=6), rng)
    with pytest.raises(ShapeError):
        forward_cnn_lstm(p, rng.standard_normal((5, 3, 4, 4)))
    with pytest.raises(ShapeError):
        forward_cnn_lstm(p, rng.standard_normal((6, 3, 4, 5)))
    base = build_lstm_baseline(LstmBaselineConfig(lookback=6), rng)
    with pytest.raises(ShapeError):
        forward_lstm_baseline(base, rng.standard_normal((6, 2)))


@pytest.mark.parametrize("kind", [CNN_LSTM, LSTM])
def test_batched_prediction_matches_single_samples(kind, rng):
    if kind == CNN_LSTM:
        p = build_cnn_lstm(CnnLstmConfig(3, 3, lookback=4, lstm_hidden=5), rng)
        days = rng.standard_normal((12, 3, 3, 3))
        single = forward_cnn_lstm
    else:
        p = build_lstm_baseline(LstmBaselineConfig(lookback=4, lstm_hidden=5), rng)
        days = rng.standard_normal((12, 3))
        single = forward_lstm_baseline
    windows = np.arange(4)[None] + np.arange(8)[:, None]
    batch = predict(p, days, windows, batch_size=3)
    for row, w in enumerate(windows):
        assert batch[row] == pytest.approx(single(p, days[w]), rel=1e-12, abs=1e-14)


def test_training_mode_graph_uses_dropout(rng):
    p = build_lstm_baseline(LstmBaselineConfig(lookback=4, lstm_hidden=5, dropout=0.5), rng)
    days = rng.standard_normal((10, 3))
    windows = np.arange(4)[None] + np.arange(6)[:, None]
    evald = graph(p, constants(p), days, windows).data
    a = graph(p, constants(p), days, windows, training=True, rng=np.random.default_rng(1)).data
    b = graph(p, constants(p), days, windows, training=True, rng=np.random.default_rng(1)).data
    assert a.tobytes() == b.tobytes()
    assert not np.allclose(a, evald)


def test_window_indices_are_validated(rng):
    p = build_lstm_baseline(LstmBaselineConfig(lookback=3), rng)
    with pytest.raises(IndexError):
        graph(p, constants(p), np.zeros((5, 3)), np.array([[3, 4, 5]]))
    with pytest.raises(ShapeError):
        graph(p, constants(p), np.zeros((5, 3)), np.array([[0, 1]]))


@pytest.mark.parametrize("kind", [LSTM, CNN_LSTM])
def test_reduced_model_gradients(kind):
    assert reduced_gradient_error(kind) < 1e-4


def test_training_graph_gradients_with_fixed_dropout_mask(rng):
    """With a fixed mask the dropout path is differentiable and checkable too.

    Dropped inputs leave some weight gradients near 1e-8, where the central
    difference carries round-off of the same order, hence the absolute floor.
    """
    p = build_cnn_lstm(CnnLstmConfig(3, 3, lookback=2, lstm_hidden=3, conv_stack=(("conv", 2, 1), ("conv", 2, 3))),
                       rng)
    tensors = {k: v + rng.uniform(-0.2, 0.2, v.shape) for k, v in p.tensors.items()}
    days = rng.standard_normal((4, 3, 3, 3))
    windows = np.array([[0, 1], [2, 3]])
    target = Tensor(rng.standard_normal(2))

    def fn(t):
        out = graph(p, t, days, windows, training=True, rng=np.random.default_rng(5))
        d = ad.sub(out, target)
        return ad.mean(ad.mul(d, d))

    assert ad.grad_check(fn, tensors, floor=1e-6) < 1e-4
