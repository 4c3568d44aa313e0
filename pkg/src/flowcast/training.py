"""Per-basin training: chronological split, train-only scaling, mini-batch Adam with norm clipping."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import GaugeSeries, GridSeries, daily_features, sample_windows, stack_frames
from .metrics import KgeComponents, kge
from .model import (
    CNN_LSTM,
    LSTM,
    CnnLstmConfig,
    LstmBaselineConfig,
    ModelParams,
    build_model,
    graph,
    on_tape,
    predict,
)

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


# ---------------------------------------------------------------------------
# split and scaling


@dataclass(frozen=True)
class Split:
    train: range
    val: range
    test: range


def chronological_split(n_samples: int, train_frac: float = 0.7, val_frac: float = 0.3) -> Split:
    """Contiguous train / validation / test index ranges, in time order.

    ``floor(n * train_frac)`` samples precede the test block; the last
    ``floor(that * val_frac)`` of them are validation. Remainders go to the
    later partition.
    """
    if n_samples < 10:
        raise ValueError(f"need at least 10 samples to split, got {n_samples}")
    if not (0 < train_frac < 1 and 0 < val_frac < 1):
        raise ValueError("split fractions must lie in (0, 1)")
    # tolerance guards products such as 0.7 * 10 landing a hair under an integer
    n_fit = int(math.floor(n_samples * train_frac + 1e-9))
    n_val = int(math.floor(n_fit * val_frac + 1e-9))
    n_train = n_fit - n_val
    if n_train < 1 or n_val < 1 or n_samples - n_fit < 1:
        raise ValueError(f"split of {n_samples} samples leaves an empty partition")
    return Split(range(0, n_train), range(n_train, n_fit), range(n_fit, n_samples))


@dataclass(frozen=True)
class Scaler:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.atleast_1d(np.asarray(self.mean, dtype=float)))
        object.__setattr__(self, "std", np.atleast_1d(np.asarray(self.std, dtype=float)))
        if (self.std <= 0).any():
            raise ValueError("scaler standard deviations must be positive")


def fit_scaler(values) -> Scaler:
    """Per-feature mean and population standard deviation.

    ``values`` is either an ``N x F`` array or a sequence of 1-D arrays, one per
    feature (lengths may differ).

    Raises:
        ValueError: a feature has fewer than two values or is constant.
    """
    if isinstance(values, np.ndarray) and values.ndim <= 2:
        cols = [values] if values.ndim == 1 else list(values.T)
    else:
        cols = [np.asarray(v, dtype=float).ravel() for v in values]
    means, stds = [], []
    for j, col in enumerate(cols):
        col = np.asarray(col, dtype=float).ravel()
        if col.size < 2:
            raise ValueError(f"feature {j}: need at least two values")
        mu = col.mean()
        sd = col.std()
        if sd == 0.0:
            raise ValueError(f"feature {j} is constant over the training period")
        means.append(mu)
        stds.append(sd)
    return Scaler(np.array(means), np.array(stds))


def scale(x, scaler: Scaler, feature: int | None = None):
    """``(x - mean) / std``; ``feature`` picks one column, otherwise the last axis is features."""
    if feature is not None:
        return (np.asarray(x, dtype=float) - scaler.mean[feature]) / scaler.std[feature]
    return (np.asarray(x, dtype=float) - scaler.mean) / scaler.std


def inverse_scale(x, scaler: Scaler, feature: int | None = None):
    if feature is not None:
        return np.asarray(x, dtype=float) * scaler.std[feature] + scaler.mean[feature]
    return np.asarray(x, dtype=float) * scaler.std + scaler.mean


# ---------------------------------------------------------------------------
# loss, clipping, optimizer


def mse_loss(predictions, targets) -> Tensor:
    p, t = ad.as_tensor(predictions), ad.as_tensor(targets)
    if p.shape != t.shape or p.size < 1:
        raise ad.ShapeError("mse_loss", p.shape, t.shape)
    diff = ad.sub(p, t)
    return ad.mean(ad.mul(diff, diff))


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))


def clip_grad_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    """Rescale all gradients together when their global L2 norm exceeds ``max_norm``."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads)
    factor = max_norm / norm
    return {k: g * factor for k, g in grads.items()}


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, params: Mapping[str, np.ndarray], lr: float = 1e-3, **kw) -> "AdamState":
        return cls(lr=lr, m={k: np.zeros_like(v) for k, v in params.items()},
                   v={k: np.zeros_like(v) for k, v in params.items()}, **kw)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns new arrays and a new state."""
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ad.ShapeError("adam_step", theta.shape, g.shape, detail=name)
        m = b1 * state.m.get(name, 0.0) + (1.0 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1.0 - b2) * g * g
        new_m[name], new_v[name] = m, v
        new_p[name] = theta - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return new_p, replace(state, t=t, m=new_m, v=new_v)


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 50
    val_frac: float = 0.3
    train_frac: float = 0.7
    clip_max_norm: float = 1.0
    learning_rate: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be at least 1")
        if not (0 < self.train_frac < 1 and 0 < self.val_frac < 1):
            raise ValueError("train_frac and val_frac must lie in (0, 1)")
        if self.clip_max_norm <= 0 or self.learning_rate <= 0:
            raise ValueError("clip_max_norm and learning_rate must be positive")


@dataclass
class BasinDataset:
    """Standardized daily inputs plus the sample windows that index into them.

    ``inputs`` is ``T x 3 x H x W`` (cnn-lstm) or ``T x 3`` (lstm). Sample ``i``
    predicts day ``target_days[i]`` from days ``windows[i]``.
    """

    kind: str
    inputs: np.ndarray
    targets: np.ndarray  # standardized discharge per day
    discharge: np.ndarray  # raw discharge per day
    windows: np.ndarray
    target_days: np.ndarray
    split: Split
    scaler: Scaler  # features: precipitation, temperature, discharge

    @property
    def lookback(self) -> int:
        return self.windows.shape[1]

    def part(self, name: str) -> np.ndarray:
        r = getattr(self.split, name)
        return np.arange(r.start, r.stop)

    @property
    def training_days(self) -> range:
        """Days whose values may inform the scaler: up to the last training target."""
        return range(0, int(self.target_days[self.split.train.stop - 1]) + 1)


def prepare_dataset(kind: str, precip: GridSeries, temp: GridSeries, gauge: GaugeSeries,
                    lookback: int = 182, train_frac: float = 0.7, val_frac: float = 0.3,
                    scaler: Scaler | None = None) -> BasinDataset:
    """Window, split and standardize one basin for ``kind`` ("lstm" or "cnn-lstm").

    The scaler is fitted on days up to the last training target unless a
    fitted ``scaler`` (e.g. from a checkpoint) is supplied.
    """
    if kind == CNN_LSTM:
        raw = stack_frames(precip, temp, gauge)
    elif kind == LSTM:
        raw = daily_features(precip, temp, gauge)
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    q = gauge.discharge
    target_days, windows = sample_windows(raw.shape[0], lookback)
    split = chronological_split(len(target_days), train_frac, val_frac)
    n_days = int(target_days[split.train.stop - 1]) + 1
    if scaler is None:
        fit = raw[:n_days]
        scaler = fit_scaler([fit[:, 0], fit[:, 1], q[:n_days]])
    shape = (1, 3) + (1,) * (raw.ndim - 2)
    inputs = (raw - scaler.mean.reshape(shape)) / scaler.std.reshape(shape)
    return BasinDataset(kind, inputs, scale(q, scaler, 2), q.copy(), windows, target_days, split, scaler)


def default_model_config(kind: str, dataset: BasinDataset, **overrides):
    if kind == CNN_LSTM:
        _, _, h, w = dataset.inputs.shape
        return CnnLstmConfig(height=h, width=w, lookback=dataset.lookback, **overrides)
    return LstmBaselineConfig(lookback=dataset.lookback, **overrides)


# ---------------------------------------------------------------------------
# training and evaluation


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class TrainResult:
    params: ModelParams
    history: list[EpochRecord]


def _loss_on(params: ModelParams, dataset: BasinDataset, rows: np.ndarray) -> float:
    pred = predict(params, dataset.inputs, dataset.windows[rows], batch_size=256)
    target = dataset.targets[dataset.target_days[rows]]
    return float(np.mean((pred - target) ** 2))


def train(kind: str, dataset: BasinDataset, config: TrainConfig, model_config=None,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Fixed-epoch mini-batch training; returns the final-epoch parameters.

    Initialization draws from ``seed``; epoch ``e`` shuffles and samples
    dropout from a generator seeded with ``(seed, e)``, so runs are
    reproducible bit for bit.
    """
    if kind != dataset.kind:
        raise ValueError(f"dataset was prepared for {dataset.kind!r}, not {kind!r}")
    model_config = model_config or default_model_config(kind, dataset)
    params = build_model(kind, model_config, np.random.default_rng(config.seed))
    state = AdamState.create(params.tensors, lr=config.learning_rate)
    train_rows = dataset.part("train")
    val_rows = dataset.part("val")
    history: list[EpochRecord] = []
    for epoch in range(1, config.epochs + 1):
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(train_rows)
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            rows = order[start:start + config.batch_size]
            tape = Tape()
            p = on_tape(params, tape)
            pred = graph(params, p, dataset.inputs, dataset.windows[rows], training=True, rng=rng)
            loss = mse_loss(pred, dataset.targets[dataset.target_days[rows]])
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite training loss {value} at epoch {epoch}, "
                                   f"batch starting at position {start}")
            grads = clip_grad_norm(tape.backward(loss), config.clip_max_norm)
            tensors, state = adam_step(params.tensors, grads, state)
            params = params.with_tensors(tensors)
            total += value * len(rows)
        record = EpochRecord(epoch, total / len(order), _loss_on(params, dataset, val_rows))
        if not math.isfinite(record.val_loss):
            raise NumericError(f"non-finite validation loss at epoch {epoch}")
        history.append(record)
        log.info("epoch %d train %.5f val %.5f", epoch, record.train_loss, record.val_loss)
        if on_epoch is not None:
            on_epoch(record)
    return TrainResult(params, history)


@dataclass(frozen=True)
class Evaluation:
    target_days: np.ndarray
    observed: np.ndarray
    predicted: np.ndarray  # physical units
    kge: KgeComponents


def evaluate(params: ModelParams, dataset: BasinDataset, part: str = "test") -> Evaluation:
    """Predict a partition, undo the discharge scaling and score with KGE."""
    rows = dataset.part(part)
    pred = predict(params, dataset.inputs, dataset.windows[rows], batch_size=256)
    sim = inverse_scale(pred, dataset.scaler, 2)
    days = dataset.target_days[rows]
    obs = dataset.discharge[days]
    return Evaluation(days, obs, sim, kge(sim, obs))
