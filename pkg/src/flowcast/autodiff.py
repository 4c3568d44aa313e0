"""Tape-based reverse-mode automatic differentiation over numpy arrays.

A :class:`Tape` records every operation whose inputs live on it; calling
:meth:`Tape.backward` replays the records in reverse and returns a gradient map
keyed by parameter name. Operations on tensors that are not attached to a tape
run eagerly and record nothing, which is how evaluation-mode forwards stay cheap.

All arithmetic is float64.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy import sparse

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        shape_txt = " and ".join(str(tuple(s)) for s in shapes)
        msg = f"{op}: incompatible shapes {shape_txt}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)


class Tensor:
    """Dense float64 array, optionally attached to a :class:`Tape`."""

    __slots__ = ("data", "tape", "index", "name")

    def __init__(self, data, tape: "Tape | None" = None, index: int | None = None,
                 name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.tape = tape
        self.index = index
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def requires_grad(self) -> bool:
        return self.tape is not None

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


@dataclass
class _Node:
    kind: str
    inputs: tuple[int | None, ...]
    output: int
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Records operations in execution order; replaying backward yields gradients.

    Nodes are appended as operations execute, so the record is topologically
    ordered by construction. A tape belongs to one thread.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._n_slots = 0
        # name -> (slot, shape); holding Tensors here would form a cycle through Tensor.tape
        self._params: dict[str, tuple[int, tuple[int, ...]]] = {}

    def __len__(self) -> int:
        return len(self._nodes)

    @property
    def param_names(self) -> list[str]:
        return list(self._params)

    def _slot(self) -> int:
        self._n_slots += 1
        return self._n_slots - 1

    def param(self, name: str, value) -> Tensor:
        """Register a named leaf whose gradient :meth:`backward` reports."""
        if name in self._params:
            raise KeyError(f"parameter {name!r} already registered on this tape")
        t = Tensor(np.array(value, dtype=DTYPE), tape=self, index=self._slot(), name=name)
        self._params[name] = (t.index, t.shape)
        return t

    def record(self, kind: str, data: np.ndarray, inputs: Sequence[Tensor],
               backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
        out = Tensor(data, tape=self, index=self._slot())
        self._nodes.append(_Node(kind, tuple(t.index if t.tape is self else None for t in inputs),
                                 out.index, backward))
        return out

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Gradient of a scalar ``loss`` with respect to every registered parameter.

        Parameters that do not influence ``loss`` receive zeros.
        """
        if loss.tape is not self:
            raise ValueError("loss is detached from this tape")
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: list[np.ndarray | None] = [None] * self._n_slots
        grads[loss.index] = np.ones_like(loss.data)
        for node in reversed(self._nodes):
            g = grads[node.output]
            if g is None:
                continue
            grads[node.output] = None
            in_grads = node.backward(g)
            for idx, gi in zip(node.inputs, in_grads):
                if idx is None or gi is None:
                    continue
                grads[idx] = gi if grads[idx] is None else grads[idx] + gi
        out = {}
        for name, (index, shape) in self._params.items():
            g = grads[index]
            out[name] = np.zeros(shape, dtype=DTYPE) if g is None else np.asarray(g, dtype=DTYPE).reshape(shape)
        return out


def backward(loss: Tensor) -> dict[str, np.ndarray]:
    """Gradient map of ``loss`` over the parameters of the tape it was built on."""
    if loss.tape is None:
        raise ValueError("loss is detached from any tape")
    return loss.tape.backward(loss)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(inputs: Iterable[Tensor]) -> "Tape | None":
    tape = None
    for t in inputs:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif t.tape is not tape:
            raise ValueError("operands are recorded on different tapes")
    return tape


def custom_op(kind: str, data: np.ndarray, inputs: Sequence[Tensor],
              backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap a forward result, recording ``backward`` if any input is on a tape.

    ``backward`` receives the output gradient and returns one gradient (or None)
    per input, in order.
    """
    tape = _tape_of(inputs)
    if tape is None:
        return Tensor(data)
    return tape.record(kind, data, inputs, backward)


# ---------------------------------------------------------------------------
# primitive operations


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may also be a 1-D bias matching ``a``'s last axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return custom_op("add", a.data + b.data, (a, b), lambda g: (g, g))
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        n = b.shape[0]
        return custom_op("add", a.data + b.data, (a, b),
                         lambda g: (g, g.reshape(-1, n).sum(axis=0)))
    raise ShapeError("add", a.shape, b.shape)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("sub", a.shape, b.shape)
    return custom_op("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("multiply", a.shape, b.shape)
    ad, bd = a.data, b.data
    return custom_op("multiply", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return custom_op("scale", a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return custom_op("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return custom_op("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        return custom_op("sum", np.asarray(a.data.sum()), (a,),
                         lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = axis % a.ndim
    return custom_op("sum", a.data.sum(axis=ax), (a,),
                     lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),))


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat needs at least one tensor")
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
                s != r for i, (s, r) in enumerate(zip(t.shape, ts[0].shape)) if i != ax):
            raise ShapeError("concat", ts[0].shape, t.shape)
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return custom_op("concat", np.concatenate([t.data for t in ts], axis=ax), ts,
                     lambda g: tuple(np.split(g, bounds, axis=ax)))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError("reshape", old, tuple(shape)) from None
    return custom_op("reshape", out, (a,), lambda g: (g.reshape(old),))


def slice(a, index) -> Tensor:  # noqa: A001
    """Basic (non-fancy) indexing with slices and integers."""
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[index] = g
        return (full,)

    try:
        out = np.array(a.data[index])
    except IndexError as exc:
        raise ShapeError("slice", shape, detail=str(exc)) from None
    return custom_op("slice", out, (a,), bw)


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate gradient."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    shape = a.shape
    ax = axis % a.ndim

    def bw(g):
        flat = idx.reshape(-1)
        n = shape[ax]
        gm = np.moveaxis(g, ax, 0).reshape(flat.size, -1)
        # one-hot scatter matrix: a sparse product is deterministic and much faster than np.add.at
        scatter = sparse.csr_matrix((np.ones(flat.size), (flat, np.arange(flat.size))),
                                    shape=(n, flat.size))
        summed = np.asarray(scatter @ gm)
        moved = (n,) + tuple(d for i, d in enumerate(shape) if i != ax)
        return (np.moveaxis(summed.reshape(moved), 0, ax),)

    return custom_op("take", np.take(a.data, idx, axis=ax), (a,), bw)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return custom_op("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return custom_op("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return custom_op("tanh", t, (a,), lambda g: (g * (1.0 - t * t),))


_FORWARD_OPS: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "multiply": mul,
    "matmul": matmul,
    "sum": sum,
    "mean": mean,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "reshape": reshape,
    "slice": slice,
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a primitive by name, e.g. ``forward_op("matmul", a, b)``."""
    try:
        fn = _FORWARD_OPS[kind]
    except KeyError:
        raise ValueError(f"unknown operation {kind!r}; known: {sorted(_FORWARD_OPS)}") from None
    return fn(*inputs, **kwargs)


def grad_check(fn: Callable[[Mapping[str, Tensor]], Tensor], params: Mapping[str, np.ndarray],
               epsilon: float = 1e-5, floor: float = 1e-12) -> float:
    """Largest relative disagreement between analytic and central-difference gradients.

    ``fn`` maps a dict of named tensors to a scalar tensor. Per entry the error is
    ``|a - n| / max(|a|, |n|, floor)``; the maximum over every entry of every
    parameter is returned. Raising ``floor`` stops entries whose gradient is
    close to zero, where round-off dominates the difference quotient, from
    swamping the result.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    tape = Tape()
    tensors = {name: tape.param(name, value) for name, value in params.items()}
    loss = fn(tensors)
    if loss.tape is None:
        analytic = {name: np.zeros_like(t.data) for name, t in tensors.items()}
    else:
        analytic = tape.backward(loss)

    base = {name: np.array(value, dtype=DTYPE) for name, value in params.items()}

    def evaluate() -> float:
        return float(fn({n: Tensor(v) for n, v in base.items()}).data)

    worst = 0.0
    for name, arr in base.items():
        flat = arr.reshape(-1)
        grad = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = evaluate()
            flat[i] = orig - epsilon
            f_minus = evaluate()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            a = grad[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    return worst
