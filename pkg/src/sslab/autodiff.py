"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every differentiable operation goes through :func:`record`, which computes the
forward value and, when any input participates in gradients, appends an entry
to the active :class:`Tape`.  Entries are appended in execution order, so the
tape is topologically sorted by construction and the reverse pass is a single
backwards sweep over it.

Example::

    with Tape() as tape:
        x = Tensor([1.0, 2.0], requires_grad=True)
        loss = (x * x).mean()
    grads = tape.backward(loss)
    grads[x.node_id]  # array([1., 2.])
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "Entry",
    "OPS",
    "record",
    "stop_gradient",
    "no_grad",
    "is_grad_enabled",
    "current_tape",
    "backward",
    "grad",
    "tensor",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "conv3x3",
    "relu",
    "exp",
    "log",
    "softmax",
    "log_softmax",
    "sum",
    "mean",
    "reshape",
    "slice_",
    "concat",
    "maximum",
    "resample",
]

PROB_FLOOR = 1e-12


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an operation's shape rule."""

    def __init__(self, op: str, *shapes: tuple, detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes " + " and ".join(str(tuple(s)) for s in shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


_ids = itertools.count(1)
_ids_lock = threading.Lock()


def _next_id() -> int:
    with _ids_lock:
        return next(_ids)


class Tensor:
    __slots__ = ("data", "requires_grad", "node_id", "_tape", "__weakref__")
    __array_ufunc__ = None  # make numpy defer to the reflected operators below

    def __init__(self, data, requires_grad: bool = False, _leaf: bool = True):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.node_id = _next_id()
        self._tape: Tape | None = None
        if _leaf and self.requires_grad:
            tapes = _state().tapes
            if tapes:
                # so that backward reports zeros for leaves the loss never touches
                tapes[-1]._leaves[self.node_id] = self.data.shape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(value, requires_grad: bool = False) -> Tensor:
    """Wrap ``value`` as a Tensor, passing existing tensors through unchanged."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value, requires_grad=requires_grad)


@dataclass
class Entry:
    kind: str
    inputs: tuple[int, ...]
    input_shapes: tuple[tuple[int, ...], ...]
    needs_grad: tuple[bool, ...]
    output: int
    saved: dict
    attrs: dict


@dataclass
class Tape:
    """Ordered record of operations for one reverse pass.

    Use as a context manager to make it the active record for the current
    thread.  A tape can be replayed any number of times; ``backward`` never
    mutates it.
    """

    entries: list[Entry] = field(default_factory=list)
    _index: dict[int, int] = field(default_factory=dict, repr=False)
    _leaves: dict[int, tuple[int, ...]] = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.entries)

    def __enter__(self) -> "Tape":
        _state().tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _state().tapes
        assert stack and stack[-1] is self, "tape contexts must nest"
        stack.pop()

    def clear(self) -> None:
        self.entries.clear()
        self._index.clear()
        self._leaves.clear()

    def _append(self, entry: Entry) -> None:
        self._index[entry.output] = len(self.entries)
        for nid, shape, ng in zip(entry.inputs, entry.input_shapes, entry.needs_grad):
            if ng and nid not in self._index:
                self._leaves.setdefault(nid, shape)
        self.entries.append(entry)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Gradients of scalar ``loss`` for every gradient-requiring tensor on the tape.

        Leaves created under the tape (or used by it) but not reachable from
        ``loss`` map to zeros.
        """
        if loss.shape != ():
            raise ShapeError("backward", loss.shape, detail="loss must be a scalar")
        grads: dict[int, np.ndarray] = {}
        if loss.requires_grad:
            grads[loss.node_id] = np.ones((), dtype=np.float64)
        stop = self._index.get(loss.node_id, -1)
        for i in range(stop, -1, -1):
            entry = self.entries[i]
            g = grads.get(entry.output)
            if g is None:
                continue
            in_grads = OPS[entry.kind].backward(g, entry)
            for nid, ng, gi in zip(entry.inputs, entry.needs_grad, in_grads):
                if not ng or gi is None:
                    continue
                if nid in grads:
                    grads[nid] = grads[nid] + gi
                else:
                    grads[nid] = gi
        for nid, shape in self._leaves.items():
            if nid not in grads:
                grads[nid] = np.zeros(shape)
        if loss.requires_grad and loss.node_id not in self._index:
            grads.setdefault(loss.node_id, np.ones(()))
        return grads


class _State(threading.local):
    def __init__(self):
        self.grad_enabled = True
        self.tapes: list[Tape] = []
        self.default_tape = Tape()


_local = _State()


def _state() -> _State:
    return _local


def current_tape() -> Tape:
    st = _state()
    return st.tapes[-1] if st.tapes else st.default_tape


def is_grad_enabled() -> bool:
    return _state().grad_enabled


@contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording; results never require gradients."""
    st = _state()
    prev = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = prev


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    tape = loss._tape if loss._tape is not None else current_tape()
    return tape.backward(loss)


def grad(loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` with respect to ``wrt``; zeros where unreachable."""
    g = backward(loss)
    return [g.get(t.node_id, np.zeros(t.shape)) for t in wrt]


@dataclass(frozen=True)
class OpDef:
    forward: Callable  # (datas, **attrs) -> (out, saved)
    backward: Callable  # (g, entry) -> tuple of input grads


OPS: dict[str, OpDef] = {}


def _register(kind: str):
    def deco(cls):
        OPS[kind] = OpDef(cls.forward, cls.backward)
        return cls

    return deco


def record(kind: str, *inputs, **attrs) -> Tensor:
    """Apply operation ``kind`` to ``inputs`` and record it if gradients are needed."""
    op = OPS.get(kind)
    if op is None:
        raise KeyError(f"unknown op kind {kind!r}")
    ts = [tensor(x) for x in inputs]
    datas = [t.data for t in ts]
    out_data, saved = op.forward(datas, **attrs)
    needs = tuple(t.requires_grad for t in ts)
    track = is_grad_enabled() and any(needs)
    out = Tensor(out_data, requires_grad=track, _leaf=False)
    if track:
        tape = current_tape()
        tape._append(
            Entry(
                kind=kind,
                inputs=tuple(t.node_id for t in ts),
                input_shapes=tuple(d.shape for d in datas),
                needs_grad=needs,
                output=out.node_id,
                saved=saved,
                attrs=attrs,
            )
        )
        out._tape = tape
    return out


def stop_gradient(t) -> Tensor:
    """Value-identical tensor that blocks the reverse pass."""
    t = tensor(t)
    return Tensor(t.data, requires_grad=False)


# ---------------------------------------------------------------------------
# op definitions


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


@_register("add")
class _Add:
    @staticmethod
    def forward(datas):
        a, b = datas
        _check_broadcast("add", a, b)
        return a + b, {}

    @staticmethod
    def backward(g, e):
        sa, sb = e.input_shapes
        return _unbroadcast(g, sa), _unbroadcast(g, sb)


@_register("sub")
class _Sub:
    @staticmethod
    def forward(datas):
        a, b = datas
        _check_broadcast("sub", a, b)
        return a - b, {}

    @staticmethod
    def backward(g, e):
        sa, sb = e.input_shapes
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)


@_register("mul")
class _Mul:
    @staticmethod
    def forward(datas):
        a, b = datas
        _check_broadcast("mul", a, b)
        return a * b, {"a": a, "b": b}

    @staticmethod
    def backward(g, e):
        a, b = e.saved["a"], e.saved["b"]
        ga = _unbroadcast(g * b, a.shape) if e.needs_grad[0] else None
        gb = _unbroadcast(g * a, b.shape) if e.needs_grad[1] else None
        return ga, gb


@_register("div")
class _Div:
    @staticmethod
    def forward(datas):
        a, b = datas
        _check_broadcast("div", a, b)
        return a / b, {"a": a, "b": b}

    @staticmethod
    def backward(g, e):
        a, b = e.saved["a"], e.saved["b"]
        ga = _unbroadcast(g / b, a.shape) if e.needs_grad[0] else None
        gb = _unbroadcast(-g * a / (b * b), b.shape) if e.needs_grad[1] else None
        return ga, gb


@_register("matmul")
class _Matmul:
    @staticmethod
    def forward(datas):
        a, b = datas
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError("matmul", a.shape, b.shape, detail="need (m,k) @ (k,n)")
        return a @ b, {"a": a, "b": b}

    @staticmethod
    def backward(g, e):
        a, b = e.saved["a"], e.saved["b"]
        ga = g @ b.T if e.needs_grad[0] else None
        gb = a.T @ g if e.needs_grad[1] else None
        return ga, gb


def _im2col3x3(x: np.ndarray) -> np.ndarray:
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (n, h, w, c, 3, 3)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * h * w, 9 * c)


@_register("conv3x3")
class _Conv3x3:
    """Same-padded 3x3 convolution, NHWC input, (3, 3, Cin, Cout) kernel."""

    @staticmethod
    def forward(datas):
        x, w = datas
        if x.ndim != 4 or w.shape[:2] != (3, 3) or w.ndim != 4 or w.shape[2] != x.shape[3]:
            raise ShapeError("conv3x3", x.shape, w.shape, detail="need NHWC and (3,3,Cin,Cout)")
        n, h, wd, _ = x.shape
        cols = _im2col3x3(x)
        out = (cols @ w.reshape(-1, w.shape[3])).reshape(n, h, wd, w.shape[3])
        return out, {"cols": cols, "w": w}

    @staticmethod
    def backward(g, e):
        xshape, wshape = e.input_shapes
        w = e.saved["w"]
        g2 = g.reshape(-1, wshape[3])
        gw = (e.saved["cols"].T @ g2).reshape(wshape) if e.needs_grad[1] else None
        gx = None
        if e.needs_grad[0]:
            # adjoint of a same-padded conv: conv of g with the flipped, transposed kernel
            flipped = w[::-1, ::-1].transpose(0, 1, 3, 2).reshape(-1, wshape[2])
            gx = (_im2col3x3(g) @ flipped).reshape(xshape)
        return gx, gw


@_register("relu")
class _Relu:
    @staticmethod
    def forward(datas):
        (a,) = datas
        return np.maximum(a, 0.0), {"pos": a > 0}

    @staticmethod
    def backward(g, e):
        return (g * e.saved["pos"],)


@_register("exp")
class _Exp:
    @staticmethod
    def forward(datas):
        out = np.exp(datas[0])
        return out, {"out": out}

    @staticmethod
    def backward(g, e):
        return (g * e.saved["out"],)


@_register("log")
class _Log:
    @staticmethod
    def forward(datas):
        (a,) = datas
        return np.log(a), {"a": a}

    @staticmethod
    def backward(g, e):
        return (g / e.saved["a"],)


def _check_axis(op: str, a: np.ndarray, axis) -> None:
    axes = () if axis is None else (axis if isinstance(axis, tuple) else (axis,))
    for ax in axes:
        if not -a.ndim <= ax < a.ndim:
            raise ShapeError(op, a.shape, detail=f"axis {ax} out of range")


@_register("softmax")
class _Softmax:
    @staticmethod
    def forward(datas):
        (a,) = datas
        if a.ndim == 0:
            raise ShapeError("softmax", a.shape, detail="needs at least one axis")
        z = np.exp(a - a.max(axis=-1, keepdims=True))
        out = z / z.sum(axis=-1, keepdims=True)
        return out, {"out": out}

    @staticmethod
    def backward(g, e):
        p = e.saved["out"]
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)


@_register("log_softmax")
class _LogSoftmax:
    @staticmethod
    def forward(datas):
        (a,) = datas
        if a.ndim == 0:
            raise ShapeError("log_softmax", a.shape, detail="needs at least one axis")
        z = a - a.max(axis=-1, keepdims=True)
        out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        return out, {"out": out}

    @staticmethod
    def backward(g, e):
        p = np.exp(e.saved["out"])
        return (g - p * g.sum(axis=-1, keepdims=True),)


def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = sorted(ax % len(shape) for ax in axes)
        for ax in axes:
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


@_register("sum")
class _Sum:
    @staticmethod
    def forward(datas, axis=None, keepdims=False):
        (a,) = datas
        _check_axis("sum", a, axis)
        return np.sum(a, axis=axis, keepdims=keepdims), {}

    @staticmethod
    def backward(g, e):
        shape = e.input_shapes[0]
        return (np.array(_expand_reduced(g, shape, e.attrs.get("axis"), e.attrs.get("keepdims", False))),)


@_register("mean")
class _Mean:
    @staticmethod
    def forward(datas, axis=None, keepdims=False):
        (a,) = datas
        _check_axis("mean", a, axis)
        return np.mean(a, axis=axis, keepdims=keepdims), {}

    @staticmethod
    def backward(g, e):
        shape = e.input_shapes[0]
        axis = e.attrs.get("axis")
        if axis is None:
            count = int(np.prod(shape))
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([shape[ax] for ax in axes]))
        full = _expand_reduced(g, shape, axis, e.attrs.get("keepdims", False))
        return (full / count,)


@_register("reshape")
class _Reshape:
    @staticmethod
    def forward(datas, shape):
        (a,) = datas
        try:
            return a.reshape(shape), {}
        except ValueError:
            raise ShapeError("reshape", a.shape, tuple(shape)) from None

    @staticmethod
    def backward(g, e):
        return (g.reshape(e.input_shapes[0]),)


@_register("slice")
class _Slice:
    @staticmethod
    def forward(datas, key):
        (a,) = datas
        try:
            return a[key], {}
        except IndexError as err:
            raise ShapeError("slice", a.shape, detail=str(err)) from None

    @staticmethod
    def backward(g, e):
        out = np.zeros(e.input_shapes[0])
        np.add.at(out, e.attrs["key"], g)
        return (out,)


@_register("concat")
class _Concat:
    @staticmethod
    def forward(datas, axis=0):
        try:
            return np.concatenate(datas, axis=axis), {}
        except (ValueError, np.exceptions.AxisError):
            raise ShapeError("concat", *(d.shape for d in datas)) from None

    @staticmethod
    def backward(g, e):
        axis = e.attrs.get("axis", 0)
        sizes = [s[axis] for s in e.input_shapes]
        splits = np.cumsum(sizes)[:-1]
        return tuple(np.split(g, splits, axis=axis))


@_register("maximum")
class _Maximum:
    """Elementwise max against a fixed scalar."""

    @staticmethod
    def forward(datas, value):
        (a,) = datas
        return np.maximum(a, value), {"above": a > value}

    @staticmethod
    def backward(g, e):
        return (g * e.saved["above"],)


@_register("resample")
class _Resample:
    """Fixed linear resampling of rows: ``out[k] = sum_j weights[j, k] * a[index[j, k]]``.

    Used for bilinear warping with precomputed taps; the taps are constants.
    """

    @staticmethod
    def forward(datas, index, weights):
        (a,) = datas
        if a.ndim != 2 or index.shape != weights.shape or index.ndim != 2:
            raise ShapeError("resample", a.shape, index.shape, detail="need (rows, C) input and (taps, K) index")
        out = np.zeros((index.shape[1], a.shape[1]))
        for j in range(index.shape[0]):
            out += weights[j][:, None] * a[index[j]]
        return out, {}

    @staticmethod
    def backward(g, e):
        index, weights = e.attrs["index"], e.attrs["weights"]
        out = np.zeros(e.input_shapes[0])
        for j in range(index.shape[0]):
            np.add.at(out, index[j], weights[j][:, None] * g)
        return (out,)


# ---------------------------------------------------------------------------
# functional front-end


def add(a, b) -> Tensor:
    return record("add", a, b)


def sub(a, b) -> Tensor:
    return record("sub", a, b)


def mul(a, b) -> Tensor:
    return record("mul", a, b)


def div(a, b) -> Tensor:
    return record("div", a, b)


def matmul(a, b) -> Tensor:
    return record("matmul", a, b)


def conv3x3(x, w) -> Tensor:
    return record("conv3x3", x, w)


def relu(a) -> Tensor:
    return record("relu", a)


def exp(a) -> Tensor:
    return record("exp", a)


def log(a) -> Tensor:
    return record("log", a)


def softmax(a) -> Tensor:
    return record("softmax", a)


def log_softmax(a) -> Tensor:
    return record("log_softmax", a)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return record("sum", a, axis=_norm_axis(axis), keepdims=keepdims)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    return record("mean", a, axis=_norm_axis(axis), keepdims=keepdims)


def reshape(a, shape) -> Tensor:
    return record("reshape", a, shape=tuple(shape))


def slice_(a, key) -> Tensor:
    return record("slice", a, key=key)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    return record("concat", *tensors, axis=axis)


def maximum(a, value: float) -> Tensor:
    return record("maximum", a, value=float(value))


def resample(a, index: np.ndarray, weights: np.ndarray) -> Tensor:
    return record("resample", a, index=np.asarray(index), weights=np.asarray(weights, dtype=np.float64))


def _norm_axis(axis):
    if isinstance(axis, list):
        return tuple(axis)
    return axis
