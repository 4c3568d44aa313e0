"""The two forecasting architectures: a time-distributed CNN feeding an LSTM, and a plain LSTM.

Both graphs consume a *daily* input array plus an integer window matrix. Row
``b`` of ``windows`` lists the days forming sample ``b``'s lookback, so the
conv stack runs once per distinct day in a batch and its features are
gathered into per-sample sequences. Passing a single video with
``windows = arange(L)[None]`` is the plain per-sample case.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tape, Tensor
from .layers import (
    Conv2DSpec,
    DenseSpec,
    DropoutSpec,
    LstmParams,
    MaxPool2DSpec,
    GATES,
    conv2d,
    dense,
    dropout,
    he_uniform_init,
    lstm_input_projection,
    lstm_recurrence,
    maxpool2d,
)

CNN_LSTM = "cnn-lstm"
LSTM = "lstm"
MODEL_KINDS = (LSTM, CNN_LSTM)

# (kind, size) pairs: ("conv", filters, kernel) or ("maxpool", window)
TABLE_1_CONV_STACK = (("conv", 32, 1), ("conv", 16, 3), ("maxpool", 1), ("conv", 32, 1), ("maxpool", 1))


class GridTooSmallError(ValueError):
    pass


@dataclass(frozen=True)
class CnnLstmConfig:
    height: int
    width: int
    lookback: int = 182
    channels: int = 3
    conv_stack: tuple = TABLE_1_CONV_STACK
    lstm_hidden: int = 80
    dropout: float = 0.3

    def __post_init__(self):
        object.__setattr__(self, "conv_stack", tuple(tuple(layer) for layer in self.conv_stack))
        for layer in self.conv_stack:
            if layer[0] == "conv" and layer[2] % 2 == 0:
                raise ValueError(f"same padding needs an odd kernel, got {layer[2]}")

    def layer_stack(self) -> tuple:
        return (*self.conv_stack, ("dropout", self.dropout), ("lstm", self.lstm_hidden), ("dense", 1))

    @property
    def feature_size(self) -> int:
        filters = self.channels
        for layer in self.conv_stack:
            if layer[0] == "conv":
                filters = layer[1]
        return filters * self.height * self.width

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_stack"] = [list(layer) for layer in self.conv_stack]
        return d


@dataclass(frozen=True)
class LstmBaselineConfig:
    lookback: int = 182
    n_features: int = 3
    lstm_hidden: int = 80
    dropout: float = 0.3

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelParams:
    """Named parameter arrays for one architecture, in construction order."""

    kind: str
    config: CnnLstmConfig | LstmBaselineConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "ModelParams":
        return ModelParams(self.kind, self.config, {k: v.copy() for k, v in self.tensors.items()})

    def with_tensors(self, tensors: Mapping[str, np.ndarray]) -> "ModelParams":
        return ModelParams(self.kind, self.config, dict(tensors))


def count_parameters(params: ModelParams | Mapping[str, np.ndarray]) -> int:
    tensors = params.tensors if isinstance(params, ModelParams) else params
    return int(sum(np.asarray(v).size for v in tensors.values()))


def _lstm_tensors(hidden: int, inp: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    out = {}
    for g in GATES:
        out[f"lstm.W_{g}"] = he_uniform_init((hidden, inp), inp, rng)
    for g in GATES:
        out[f"lstm.U_{g}"] = he_uniform_init((hidden, hidden), hidden, rng)
    for g in GATES:
        out[f"lstm.b_{g}"] = np.zeros(hidden)
    return out


def _dense_tensors(inp: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    return {"dense.weight": he_uniform_init((1, inp), inp, rng), "dense.bias": np.zeros(1)}


def build_cnn_lstm(config: CnnLstmConfig, rng: np.random.Generator) -> ModelParams:
    """He-uniform kernels, zero biases, shapes derived from the grid and conv stack."""
    kmax = max((layer[2] for layer in config.conv_stack if layer[0] == "conv"), default=1)
    if config.height < kmax or config.width < kmax:
        raise GridTooSmallError(
            f"grid {config.height}x{config.width} is smaller than the {kmax}x{kmax} kernel")
    tensors: dict[str, np.ndarray] = {}
    in_ch = config.channels
    n_conv = 0
    for layer in config.conv_stack:
        if layer[0] != "conv":
            continue
        n_conv += 1
        _, filters, k = layer
        fan_in = in_ch * k * k
        tensors[f"conv{n_conv}.weight"] = he_uniform_init((filters, in_ch, k, k), fan_in, rng)
        tensors[f"conv{n_conv}.bias"] = np.zeros(filters)
        in_ch = filters
    tensors.update(_lstm_tensors(config.lstm_hidden, config.feature_size, rng))
    tensors.update(_dense_tensors(config.lstm_hidden, rng))
    return ModelParams(CNN_LSTM, config, tensors)


def build_lstm_baseline(config: LstmBaselineConfig, rng: np.random.Generator) -> ModelParams:
    tensors = _lstm_tensors(config.lstm_hidden, config.n_features, rng)
    tensors.update(_dense_tensors(config.lstm_hidden, rng))
    return ModelParams(LSTM, config, tensors)


def build_model(kind: str, config, rng: np.random.Generator) -> ModelParams:
    if kind == CNN_LSTM:
        return build_cnn_lstm(config, rng)
    if kind == LSTM:
        return build_lstm_baseline(config, rng)
    raise ValueError(f"unknown model kind {kind!r}")


# ---------------------------------------------------------------------------
# graphs


def conv_stack_forward(config: CnnLstmConfig, p: Mapping[str, Tensor], frames) -> Tensor:
    """Apply the conv/pool stack (ReLU after every conv) to ``N x C x H x W`` frames."""
    x = frames
    n_conv = 0
    for layer in config.conv_stack:
        if layer[0] == "conv":
            n_conv += 1
            k = layer[2]
            spec = Conv2DSpec(p[f"conv{n_conv}.weight"], p[f"conv{n_conv}.bias"],
                              stride=1, padding=(k - 1) // 2)
            x = ad.relu(conv2d(x, spec))
        elif layer[0] == "maxpool":
            x = maxpool2d(x, MaxPool2DSpec((layer[1], layer[1]), stride=1))
        else:
            raise ValueError(f"unknown conv-stack layer {layer!r}")
    return x


def _check_windows(windows, n_days: int, lookback: int) -> np.ndarray:
    w = np.asarray(windows, dtype=np.intp)
    if w.ndim != 2 or w.shape[1] != lookback:
        raise ShapeError("windows", w.shape, (None, lookback))
    if w.size and (w.min() < 0 or w.max() >= n_days):
        raise IndexError(f"window day index outside [0, {n_days})")
    return w


def cnn_lstm_graph(config: CnnLstmConfig, p: Mapping[str, Tensor], frames, windows, *,
                   training: bool = False, rng: np.random.Generator | None = None,
                   trace: dict | None = None) -> Tensor:
    """Predictions (``B``,) in standardized units for each window row."""
    frames = ad.as_tensor(frames)
    expected = (config.channels, config.height, config.width)
    if frames.ndim != 4 or frames.shape[1:] != expected:
        raise ShapeError("forward_cnn_lstm", frames.shape, (None, *expected))
    w = _check_windows(windows, frames.shape[0], config.lookback)
    days, inverse = np.unique(w.reshape(-1), return_inverse=True)
    if len(days) == frames.shape[0] and np.array_equal(days, np.arange(frames.shape[0])):
        used = frames
    else:
        used = ad.take(frames, days, axis=0)
    fmap = conv_stack_forward(config, p, used)
    feats = ad.reshape(fmap, (fmap.shape[0], -1))
    if trace is not None:
        trace["conv_output"] = fmap.shape
        trace["frame_features"] = (w.shape[0], config.lookback, feats.shape[1])
    h = _lstm_over_days(p, feats, inverse, w.shape, config.dropout, training, rng)
    if trace is not None:
        trace["lstm_hidden"] = h.shape
    y = dense(h, DenseSpec(p["dense.weight"], p["dense.bias"]))
    return ad.reshape(y, (w.shape[0],))


def _lstm_over_days(p, feats: Tensor, day_index: np.ndarray, wshape, rate: float,
                    training: bool, rng) -> Tensor:
    """LSTM over per-day feature rows gathered by ``day_index`` into ``B x L`` sequences.

    Without active dropout the input projection is linear per day, so it is
    computed once per distinct day and gathered afterwards.
    """
    lp = LstmParams.from_mapping(p)
    bsz, length = wshape
    if training and rate > 0.0:
        seq = ad.take(feats, day_index.reshape(-1), axis=0)
        seq = dropout(seq, DropoutSpec(rate, True), rng)
        zin = lstm_input_projection(seq, lp)
    else:
        zin = ad.take(lstm_input_projection(feats, lp), day_index.reshape(-1), axis=0)
    return lstm_recurrence(ad.reshape(zin, (bsz, length, 4 * lp.hidden_size)), lp)


def lstm_graph(config: LstmBaselineConfig, p: Mapping[str, Tensor], features, windows, *,
               training: bool = False, rng: np.random.Generator | None = None,
               trace: dict | None = None) -> Tensor:
    features = ad.as_tensor(features)
    if features.ndim != 2 or features.shape[1] != config.n_features:
        raise ShapeError("forward_lstm_baseline", features.shape, (None, config.n_features))
    w = _check_windows(windows, features.shape[0], config.lookback)
    days, inverse = np.unique(w.reshape(-1), return_inverse=True)
    used = ad.take(features, days, axis=0)
    if trace is not None:
        trace["frame_features"] = (w.shape[0], config.lookback, config.n_features)
    h = _lstm_over_days(p, used, inverse, w.shape, config.dropout, training, rng)
    y = dense(h, DenseSpec(p["dense.weight"], p["dense.bias"]))
    return ad.reshape(y, (w.shape[0],))


def graph(params: ModelParams, p: Mapping[str, Tensor], inputs, windows, **kw) -> Tensor:
    fn = cnn_lstm_graph if params.kind == CNN_LSTM else lstm_graph
    return fn(params.config, p, inputs, windows, **kw)


def constants(params: ModelParams) -> dict[str, Tensor]:
    return {k: Tensor(v) for k, v in params.tensors.items()}


def on_tape(params: ModelParams, tape: Tape) -> dict[str, Tensor]:
    return {k: tape.param(k, v) for k, v in params.tensors.items()}


def forward_cnn_lstm(params: ModelParams, video, trace: dict | None = None) -> float:
    """Evaluation-mode prediction for one ``L x C x H x W`` video."""
    video = np.asarray(video, dtype=float)
    if video.ndim != 4 or video.shape[0] != params.config.lookback:
        raise ShapeError("forward_cnn_lstm", video.shape,
                         (params.config.lookback, params.config.channels,
                          params.config.height, params.config.width))
    out = cnn_lstm_graph(params.config, constants(params), video,
                         np.arange(video.shape[0])[None], trace=trace)
    return out.item()


def forward_lstm_baseline(params: ModelParams, sequence) -> float:
    """Evaluation-mode prediction for one ``L x 3`` sequence."""
    seq = np.asarray(sequence, dtype=float)
    if seq.ndim != 2 or seq.shape[0] != params.config.lookback:
        raise ShapeError("forward_lstm_baseline", seq.shape,
                         (params.config.lookback, params.config.n_features))
    out = lstm_graph(params.config, constants(params), seq, np.arange(seq.shape[0])[None])
    return out.item()


def predict(params: ModelParams, inputs, windows, batch_size: int = 64) -> np.ndarray:
    """Evaluation-mode predictions for every window row, in standardized units."""
    windows = np.asarray(windows, dtype=np.intp)
    consts = constants(params)
    out = np.empty(len(windows))
    for start in range(0, len(windows), batch_size):
        rows = windows[start:start + batch_size]
        out[start:start + len(rows)] = graph(params, consts, inputs, rows).data
    return out
