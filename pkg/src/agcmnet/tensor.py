"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are recorded on the active :class:`Tape` whenever one of their
inputs has ``requires_grad`` set. Outside a tape nothing is recorded, which
is how inference and finite-difference evaluations run.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (x * x).sum()
    >>> backward(loss, tape)
    >>> x.grad
    array([2., 4.])
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import expit

from .errors import NumericError, ShapeError, UsageError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "grad_check",
    "matmul",
    "softmax",
    "hadamard",
    "conv2d",
    "add",
    "sub",
    "div",
    "neg",
    "scale",
    "sum",
    "mean",
    "max",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "sqrt",
    "clip",
    "concat",
    "transpose",
    "reshape",
    "getitem",
    "take",
    "upsample_nearest",
]

_local = threading.local()

# Test hook: op name -> factor applied to that op's input gradients.
_backward_scale: dict[str, float] = {}


class _Record:
    __slots__ = ("op", "inputs", "out", "rule")

    def __init__(self, op, inputs, out, rule):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.rule = rule


class Tape:
    """Append-only log of differentiable operations.

    Use as a context manager; nesting is allowed and the innermost tape wins.
    A tape belongs to the thread that opened it.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self.records)

    def clear(self):
        self.records.clear()


def _active_tape() -> Optional[Tape]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


@contextlib.contextmanager
def perturb_backward(op: str, factor: float):
    """Scale the backward rule of ``op`` by ``factor`` (negative-control hook)."""
    _backward_scale[op] = factor
    try:
        yield
    finally:
        _backward_scale.pop(op, None)


class Tensor:
    """N-dimensional float64 array with an optional gradient slot.

    ``data`` is read-only after construction; only ``grad`` is ever written,
    and only by :func:`backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

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
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return hadamard(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return hadamard(other, self)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, inputs: tuple, out: np.ndarray, rule: Callable) -> Tensor:
    if not np.isfinite(out).all():
        raise NumericError(f"{op}: non-finite values in forward result")
    rg = any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, rg)
    if rg:
        tape = _active_tape()
        if tape is not None:
            tape.records.append(_Record(op, inputs, result, rule))
    return result


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``grad`` of every requires_grad tensor reachable from ``loss``.

    Gradients accumulate into existing ``grad`` arrays, so call
    ``zero_grad`` between optimisation steps.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    seen: dict[int, Tensor] = {id(loss): loss}
    for rec in reversed(tape.records):
        g = grads.get(id(rec.out))
        if g is None:
            continue
        in_grads = rec.rule(g)
        factor = _backward_scale.get(rec.op)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if factor is not None:
                gi = gi * factor
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.asarray(gi, dtype=np.float64).reshape(t.shape)
                seen[key] = t
    for key, t in seen.items():
        if not t.requires_grad:
            continue
        g = grads[key]
        t.grad = g.copy() if t.grad is None else t.grad + g


# ---------------------------------------------------------------- broadcasting


def _check_broadcast(op, a: Tensor, b: Tensor) -> tuple[int, ...]:
    if a.ndim == 0 or b.ndim == 0:
        return a.shape if a.ndim else b.shape
    if a.ndim != b.ndim:
        raise ShapeError(f"{op}: rank mismatch {a.shape} vs {b.shape}")
    out = []
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable")
        out.append(da if db == 1 else db)
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def hadamard(a, b) -> Tensor:
    """Elementwise product; ``b`` may broadcast along size-1 axes."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _emit("mul", (a, b), a.data * b.data,
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data
    return _emit("div", (a, b), out,
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out = expit(a.data)
    return _emit("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _emit("log", (a,), out, lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _emit("sqrt", (a,), out, lambda g: (g * 0.5 / out,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return _emit("clip", (a,), np.clip(a.data, lo, hi), lambda g: (g * inside,))


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _emit("matmul", (a, b), a.data @ b.data,
                 lambda g: (g @ b.data.T, a.data.T @ g))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _norm_axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", (x,), out, rule)


# ---------------------------------------------------------------- reductions


def _norm_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


def _norm_axes(x: Tensor, axis):
    if axis is None:
        return tuple(range(x.ndim))
    if isinstance(axis, int):
        return (_norm_axis(x, axis),)
    return tuple(_norm_axis(x, a) for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(x, axis)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return _emit("sum", (x,), out, rule)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(x, axis)
    n = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, x.shape),)

    return _emit("mean", (x,), out, rule)


def max(x: Tensor, axis: int) -> tuple[Tensor, np.ndarray]:
    """Maximum along ``axis``; returns values and argmax indices.

    Ties resolve to the first index, and the gradient goes only there.
    """
    axis = _norm_axis(x, axis)
    idx = np.argmax(x.data, axis=axis)
    idx_k = np.expand_dims(idx, axis)
    out = np.take_along_axis(x.data, idx_k, axis=axis).squeeze(axis)

    def rule(g):
        gx = np.zeros(x.shape)
        np.put_along_axis(gx, idx_k, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _emit("max", (x,), out, rule), idx


# ---------------------------------------------------------------- shape ops


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat: no tensors given")
    ref = tensors[0]
    axis = _norm_axis(ref, axis)
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref.shape)) if i != axis
        ):
            raise ShapeError(f"concat: shape {t.shape} incompatible with {ref.shape} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def rule(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return _emit("concat", tensors, out, rule)


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: invalid axes {axes} for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    return _emit("transpose", (x,), x.data.transpose(axes), lambda g: (g.transpose(inv),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from exc
    return _emit("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


def getitem(x: Tensor, index) -> Tensor:
    try:
        out = x.data[index]
    except IndexError as exc:
        raise ShapeError(f"index {index!r} invalid for shape {x.shape}") from exc
    out = np.array(out, dtype=np.float64)

    def rule(g):
        gx = np.zeros(x.shape)
        np.add.at(gx, index, g)
        return (gx,)

    return _emit("slice", (x,), out, rule)


def take(x: Tensor, indices, axis: int) -> Tensor:
    """Gather entries of ``x`` along ``axis`` (indices may repeat)."""
    axis = _norm_axis(x, axis)
    indices = np.asarray(indices, dtype=np.intp)
    if indices.size and (indices.min() < 0 or indices.max() >= x.shape[axis]):
        raise ShapeError(f"take: indices out of range for axis {axis} of {x.shape}")
    out = np.take(x.data, indices, axis=axis)
    sel = (slice(None),) * axis + (indices,)

    def rule(g):
        gx = np.zeros(x.shape)
        np.add.at(gx, sel, g)
        return (gx,)

    return _emit("take", (x,), out, rule)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of the last two axes of a C×H×W tensor."""
    if x.ndim != 3:
        raise ShapeError(f"upsample_nearest expects C×H×W, got {x.shape}")
    c, h, w = x.shape
    out = x.data.repeat(factor, axis=1).repeat(factor, axis=2)

    def rule(g):
        return (g.reshape(c, h, factor, w, factor).sum(axis=(2, 4)),)

    return _emit("upsample", (x,), out, rule)


# ---------------------------------------------------------------- convolution


def conv_output_size(size: int, k: int, stride: int, dilation: int, padding: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, dilation: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of a C_in×H×W map with a C_out×C_in×kh×kw kernel."""
    if x.ndim != 3 or kernel.ndim != 4 or kernel.shape[1] != x.shape[0]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {kernel.shape[0]} filters")
    c_in, h, w = x.shape
    c_out, _, kh, kw = kernel.shape
    ho = conv_output_size(h, kh, stride, dilation, padding)
    wo = conv_output_size(w, kw, stride, dilation, padding)
    if ho <= 0 or wo <= 0:
        raise ShapeError(
            f"conv2d: non-positive output {ho}x{wo} for input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {stride}, dilation {dilation}, padding {padding}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    cols = np.empty((c_in, kh, kw, ho, wo))
    for i in range(kh):
        for j in range(kw):
            r, c = i * dilation, j * dilation
            cols[:, i, j] = xp[:, r:r + hspan:stride, c:c + wspan:stride]
    out = np.tensordot(kernel.data, cols, axes=([1, 2, 3], [0, 1, 2]))
    if bias is not None:
        out = out + bias.data[:, None, None]

    def rule(g):
        gk = np.tensordot(g, cols, axes=([1, 2], [3, 4]))
        gcols = np.tensordot(kernel.data, g, axes=([0], [0]))
        gxp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                r, c = i * dilation, j * dilation
                gxp[:, r:r + hspan:stride, c:c + wspan:stride] += gcols[:, i, j]
        gx = gxp[:, padding:padding + h, padding:padding + w] if padding else gxp
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(1, 2)))
        return tuple(grads)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _emit("conv2d", inputs, out, rule)


# ---------------------------------------------------------------- gradient check


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
               indices: Optional[Iterable[int]] = None) -> float:
    """Max relative error between the tape gradient of ``f`` and central differences.

    ``indices`` restricts the comparison to those flat element positions.
    The relative error per element is |a - n| / max(|a|, |n|, 1e-8).
    """
    base = np.array(x.data, dtype=np.float64)
    xt = Tensor(base, requires_grad=True)
    with Tape() as tape:
        out = f(xt)
    if out.size != 1:
        raise UsageError(f"grad_check needs a scalar function, got shape {out.shape}")
    backward(out, tape)
    analytic = np.zeros(base.shape) if xt.grad is None else xt.grad
    flat_a = analytic.reshape(-1)
    positions = range(base.size) if indices is None else indices
    worst = 0.0
    for p in positions:
        p = int(p)
        vals = []
        for sign in (1.0, -1.0):
            pert = base.copy().reshape(-1)
            pert[p] += sign * h
            try:
                v = f(Tensor(pert.reshape(base.shape))).item()
            except NumericError as exc:
                raise NumericError(f"grad_check: element {p} produced non-finite output: {exc}") from exc
            if not np.isfinite(v):
                raise NumericError(f"grad_check: element {p} produced non-finite output")
            vals.append(v)
        numeric = (vals[0] - vals[1]) / (2.0 * h)
        a = flat_a[p]
        err = abs(a - numeric) / np.max([abs(a), abs(numeric), 1e-8])
        worst = err if err > worst else worst
    return float(worst)
