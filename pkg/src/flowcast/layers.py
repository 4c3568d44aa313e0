"""Network building blocks: convolution, max pooling, LSTM, dense, dropout.

Layers accept either a single example (``C x H x W`` for images, a vector for
dense/LSTM steps) or a leading batch axis. Convolution, pooling and the LSTM
recurrence are fused tape operations with hand-written backward rules; the
single LSTM cell step is composed from autodiff primitives and serves as the
reference the fused recurrence is tested against.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor, as_tensor

GATES = ("f", "i", "o", "g")


def conv_output_size(size: int, kernel: int, stride: int = 1, padding: int = 0) -> int:
    """Spatial extent after convolution: ``floor((size + 2p - k) / s) + 1``."""
    return (size + 2 * padding - kernel) // stride + 1


@dataclass(frozen=True)
class Conv2DSpec:
    weight: Tensor  # filters x in_channels x k_h x k_w
    bias: Tensor  # filters
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        w, b = as_tensor(self.weight), as_tensor(self.bias)
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)
        if w.ndim != 4 or b.shape != (w.shape[0],):
            raise ShapeError("conv2d", w.shape, b.shape, detail="weight/bias mismatch")
        if self.stride < 1 or self.padding < 0:
            raise ValueError("conv2d needs stride >= 1 and padding >= 0")

    @property
    def filters(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]


@dataclass(frozen=True)
class MaxPool2DSpec:
    window: tuple[int, int] = (1, 1)
    stride: int = 1

    def __post_init__(self):
        if min(self.window) < 1 or self.stride < 1:
            raise ValueError("max pooling needs window >= 1 and stride >= 1")


@dataclass(frozen=True)
class DenseSpec:
    weight: Tensor  # out x in
    bias: Tensor  # out

    def __post_init__(self):
        w, b = as_tensor(self.weight), as_tensor(self.bias)
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise ShapeError("dense", w.shape, b.shape, detail="weight/bias mismatch")


@dataclass(frozen=True)
class DropoutSpec:
    rate: float = 0.0
    training: bool = False

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {self.rate}")


@dataclass(frozen=True)
class LstmParams:
    """Per-gate weights; ``W_*`` is hidden x input, ``U_*`` hidden x hidden."""

    W_f: Tensor
    W_i: Tensor
    W_o: Tensor
    W_g: Tensor
    U_f: Tensor
    U_i: Tensor
    U_o: Tensor
    U_g: Tensor
    b_f: Tensor
    b_i: Tensor
    b_o: Tensor
    b_g: Tensor

    def __post_init__(self):
        for field in self.__dataclass_fields__:
            object.__setattr__(self, field, as_tensor(getattr(self, field)))
        hidden, inp = self.W_f.shape
        for gate in GATES:
            w, u, b = getattr(self, f"W_{gate}"), getattr(self, f"U_{gate}"), getattr(self, f"b_{gate}")
            if w.shape != (hidden, inp) or u.shape != (hidden, hidden) or b.shape != (hidden,):
                raise ShapeError("lstm", w.shape, u.shape, b.shape,
                                 detail=f"gate {gate} inconsistent with hidden={hidden}, input={inp}")

    @property
    def hidden_size(self) -> int:
        return self.W_f.shape[0]

    @property
    def input_size(self) -> int:
        return self.W_f.shape[1]

    @classmethod
    def from_mapping(cls, tensors, prefix: str = "lstm.") -> "LstmParams":
        return cls(**{f"{kind}_{g}": tensors[f"{prefix}{kind}_{g}"]
                      for kind in ("W", "U", "b") for g in GATES})


@dataclass(frozen=True)
class LstmState:
    h: Tensor
    c: Tensor

    @classmethod
    def zeros(cls, hidden: int, batch: int | None = None) -> "LstmState":
        shape = (hidden,) if batch is None else (batch, hidden)
        return cls(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)))


# ---------------------------------------------------------------------------
# convolution and pooling


def conv2d(x, spec: Conv2DSpec) -> Tensor:
    """Cross-correlate ``x`` (``C x H x W`` or ``N x C x H x W``) with the spec's filters."""
    x = as_tensor(x)
    w, b = spec.weight, spec.bias
    single = x.ndim == 3
    if x.ndim not in (3, 4):
        raise ShapeError("conv2d", x.shape, w.shape, detail="input must be C x H x W or N x C x H x W")
    xd = x.data[None] if single else x.data
    n, c, h, wd = xd.shape
    f, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeError("conv2d", x.shape, w.shape, detail="channel count mismatch")
    s, p = spec.stride, spec.padding
    ho, wo = conv_output_size(h, kh, s, p), conv_output_size(wd, kw, s, p)
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", x.shape, w.shape, detail=f"kernel exceeds padded input (padding={p})")

    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    hp, wp = xp.shape[2], xp.shape[3]
    x2d = np.ascontiguousarray(xp.transpose(0, 2, 3, 1)).reshape(-1, c)
    # one GEMM yields every kernel offset's contribution; shifted sums assemble the output
    wall = np.ascontiguousarray(w.data.transpose(1, 2, 3, 0)).reshape(c, kh * kw * f)
    contrib = (x2d @ wall).reshape(n, hp, wp, kh, kw, f)

    def window(arr, di, dj):
        return arr[:, di:di + s * (ho - 1) + 1:s, dj:dj + s * (wo - 1) + 1:s, di, dj, :]

    out = np.empty((n, ho, wo, f))
    out[...] = b.data
    for di in range(kh):
        for dj in range(kw):
            out += window(contrib, di, dj)
    del contrib
    y = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if single:
        y = y[0]
    need_x = x.requires_grad

    def bw(g):
        g4 = g[None] if single else g
        gh = g4.transpose(0, 2, 3, 1)
        if kh == kw == 1 and s == 1:
            gcontrib = np.ascontiguousarray(gh).reshape(-1, f)
        else:
            gfull = np.zeros((n, hp, wp, kh, kw, f))
            for di in range(kh):
                for dj in range(kw):
                    window(gfull, di, dj)[...] = gh
            gcontrib = gfull.reshape(-1, kh * kw * f)
        gw = (x2d.T @ gcontrib).reshape(c, kh, kw, f).transpose(3, 0, 1, 2)
        gb = g4.sum(axis=(0, 2, 3))
        gx = None
        if need_x:
            gxp = (gcontrib @ wall.T).reshape(n, hp, wp, c)
            gx = np.ascontiguousarray(gxp[:, p:p + h, p:p + wd, :].transpose(0, 3, 1, 2))
            if single:
                gx = gx[0]
        return gx, np.ascontiguousarray(gw), gb

    return ad.custom_op("conv2d", y, (x, w, b), bw)


def maxpool2d(x, spec: MaxPool2DSpec) -> Tensor:
    """Max over each window; ties send gradient to the first maximum in row-major order."""
    x = as_tensor(x)
    single = x.ndim == 3
    if x.ndim not in (3, 4):
        raise ShapeError("maxpool2d", x.shape, detail="input must be C x H x W or N x C x H x W")
    xd = x.data[None] if single else x.data
    _, _, h, w = xd.shape
    wh, ww = spec.window
    s = spec.stride
    ho, wo = conv_output_size(h, wh, s), conv_output_size(w, ww, s)
    if ho < 1 or wo < 1:
        raise ShapeError("maxpool2d", x.shape, spec.window, detail="window exceeds input")

    def view(di, dj, arr):
        return arr[:, :, di:di + s * (ho - 1) + 1:s, dj:dj + s * (wo - 1) + 1:s]

    best = view(0, 0, xd).copy()
    arg = np.zeros(best.shape, dtype=np.intp)
    k = 0
    for di in range(wh):
        for dj in range(ww):
            if k:
                cand = view(di, dj, xd)
                better = cand > best
                best = np.where(better, cand, best)
                arg[better] = k
            k += 1
    out = best[0] if single else best

    def bw(g):
        g4 = g[None] if single else g
        gx = np.zeros_like(xd)
        k = 0
        for di in range(wh):
            for dj in range(ww):
                view(di, dj, gx)[...] += np.where(arg == k, g4, 0.0)
                k += 1
        return (gx[0] if single else gx,)

    return ad.custom_op("maxpool2d", out, (x,), bw)


# ---------------------------------------------------------------------------
# recurrent


def lstm_cell_step(x_t, prev: LstmState, params: LstmParams) -> LstmState:
    """One LSTM step composed from autodiff primitives (no peepholes).

    ``x_t`` is a vector of the input size or a batch ``B x input``.
    """
    x = as_tensor(x_t)
    single = x.ndim == 1
    if x.shape[-1] != params.input_size:
        raise ShapeError("lstm_cell_step", x.shape, params.W_f.shape)
    h, c = as_tensor(prev.h), as_tensor(prev.c)
    if h.shape[-1] != params.hidden_size or h.shape != c.shape:
        raise ShapeError("lstm_cell_step", h.shape, c.shape, params.U_f.shape)
    if single:
        x = ad.reshape(x, (1, -1))
        h = ad.reshape(h, (1, -1))
        c = ad.reshape(c, (1, -1))

    def pre(gate):
        zx = ad.matmul(x, ad.transpose(getattr(params, f"W_{gate}")))
        zh = ad.matmul(h, ad.transpose(getattr(params, f"U_{gate}")))
        return ad.add(ad.add(zx, zh), getattr(params, f"b_{gate}"))

    f = ad.sigmoid(pre("f"))
    i = ad.sigmoid(pre("i"))
    o = ad.sigmoid(pre("o"))
    g = ad.tanh(pre("g"))
    c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
    h_new = ad.mul(o, ad.tanh(c_new))
    if single:
        hid = params.hidden_size
        return LstmState(ad.reshape(h_new, (hid,)), ad.reshape(c_new, (hid,)))
    return LstmState(h_new, c_new)


def _sigmoid(z):
    return 0.5 * (np.tanh(0.5 * z) + 1.0)


def lstm_input_projection(x2d, params: LstmParams) -> Tensor:
    """Gate pre-activations ``x W^T + b`` for rows of ``x2d``, gates ordered f, i, o, g."""
    W = ad.concat([getattr(params, f"W_{g}") for g in GATES], axis=0)
    b = ad.concat([getattr(params, f"b_{g}") for g in GATES], axis=0)
    return ad.add(ad.matmul(x2d, ad.transpose(W)), b)


def lstm_recurrence(zin, params: LstmParams) -> Tensor:
    """Run the recurrence over projected inputs ``B x L x 4H`` from a zero state.

    Returns the final hidden state ``B x H``. The loop is a single tape record
    whose backward rule is untruncated BPTT.
    """
    zin = as_tensor(zin)
    hid = params.hidden_size
    if zin.ndim != 3 or zin.shape[2] != 4 * hid:
        raise ShapeError("lstm_recurrence", zin.shape, (None, None, 4 * hid))
    bsz, length, _ = zin.shape
    if length < 1:
        raise ValueError("lstm needs a non-empty sequence")
    u_parts = [getattr(params, f"U_{g}") for g in GATES]
    U = np.concatenate([t.data for t in u_parts], axis=0)  # 4H x H
    UT = U.T
    zd = zin.data
    acts = np.empty((bsz, length, 4 * hid))
    h_prev = np.empty((bsz, length, hid))
    c_all = np.empty((bsz, length + 1, hid))
    tanh_c = np.empty((bsz, length, hid))
    h = np.zeros((bsz, hid))
    c_all[:, 0] = 0.0
    for t in range(length):
        h_prev[:, t] = h
        z = zd[:, t] + h @ UT
        a = acts[:, t]
        a[:, :3 * hid] = _sigmoid(z[:, :3 * hid])
        a[:, 3 * hid:] = np.tanh(z[:, 3 * hid:])
        f, i, o, g = a[:, :hid], a[:, hid:2 * hid], a[:, 2 * hid:3 * hid], a[:, 3 * hid:]
        c = f * c_all[:, t] + i * g
        c_all[:, t + 1] = c
        tc = np.tanh(c)
        tanh_c[:, t] = tc
        h = o * tc

    def bw(gout):
        dh = gout.copy()
        dc = np.zeros((bsz, hid))
        dz_all = np.empty((bsz, length, 4 * hid))
        for t in range(length - 1, -1, -1):
            a = acts[:, t]
            f, i, o, g = a[:, :hid], a[:, hid:2 * hid], a[:, 2 * hid:3 * hid], a[:, 3 * hid:]
            tc = tanh_c[:, t]
            dc = dc + dh * o * (1.0 - tc * tc)
            dz = dz_all[:, t]
            dz[:, :hid] = dc * c_all[:, t] * f * (1.0 - f)
            dz[:, hid:2 * hid] = dc * g * i * (1.0 - i)
            dz[:, 2 * hid:3 * hid] = dh * tc * o * (1.0 - o)
            dz[:, 3 * hid:] = dc * i * (1.0 - g * g)
            dc = dc * f
            dh = dz @ U
        dU = dz_all.reshape(-1, 4 * hid).T @ h_prev.reshape(-1, hid)
        return (dz_all, *(dU[k * hid:(k + 1) * hid] for k in range(4)))

    return ad.custom_op("lstm_recurrence", h, (zin, *u_parts), bw)


def lstm_forward(sequence, params: LstmParams) -> Tensor:
    """Run the LSTM from a zero state and return the final hidden state.

    ``sequence`` is ``L x input`` or ``B x L x input``.
    """
    seq = as_tensor(sequence)
    if seq.ndim not in (2, 3) or seq.shape[-1] != params.input_size:
        raise ShapeError("lstm_forward", seq.shape, params.W_f.shape)
    single = seq.ndim == 2
    bsz = 1 if single else seq.shape[0]
    length = seq.shape[-2]
    if length < 1:
        raise ValueError("lstm_forward needs a non-empty sequence")
    zin = lstm_input_projection(ad.reshape(seq, (bsz * length, params.input_size)), params)
    h = lstm_recurrence(ad.reshape(zin, (bsz, length, 4 * params.hidden_size)), params)
    return ad.reshape(h, (params.hidden_size,)) if single else h


# ---------------------------------------------------------------------------
# dense, dropout, init


def dense(x, spec: DenseSpec) -> Tensor:
    """Affine map ``W x + b`` on a vector or on each row of a batch."""
    x = as_tensor(x)
    if x.shape[-1] != spec.weight.shape[1] or x.ndim not in (1, 2):
        raise ShapeError("dense", x.shape, spec.weight.shape)
    if x.ndim == 1:
        y = ad.matmul(ad.reshape(x, (1, -1)), ad.transpose(spec.weight))
        return ad.add(ad.reshape(y, (spec.weight.shape[0],)), spec.bias)
    return ad.add(ad.matmul(x, ad.transpose(spec.weight)), spec.bias)


def dropout(x, spec: DropoutSpec, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1/(1-rate)`` so inference is the identity."""
    x = as_tensor(x)
    if not spec.training or spec.rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs a random generator")
    keep = rng.random(x.shape, dtype=np.float32) >= spec.rate
    mask = keep * (1.0 / (1.0 - spec.rate))
    return ad.custom_op("dropout", x.data * mask, (x,), lambda g: (g * mask,))


def he_uniform_init(shape, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    """Draw from U(-sqrt(6/fan_in), +sqrt(6/fan_in))."""
    if fan_in < 1:
        raise ValueError("fan_in must be at least 1")
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=tuple(shape))
