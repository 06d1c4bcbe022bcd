"""Float64 tensors with tape-based reverse-mode differentiation.

Every differentiable primitive goes through :func:`apply_op`, which computes
the forward value and, when a :class:`Tape` is active and some input requires
a gradient, appends a record holding the vector-Jacobian product closure.
``Tape.backward`` replays those records in reverse.

Usage::

    w = Tensor(np.ones((3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = reduce_sum(square(matmul(x, w)))
    tape.backward(loss)
    w.grad
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "DegenerateEmbeddingError",
    "TapeError",
    "apply_op",
    "forward_op",
    "OP_KINDS",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "conv2d",
    "relu",
    "global_avg_pool",
    "affine",
    "l2_normalize",
    "concat",
    "slice_",
    "reshape",
    "transpose",
    "reduce_sum",
    "reduce_mean",
    "log",
    "exp",
    "sqrt",
    "square",
    "softplus",
    "maximum",
    "GradCheckReport",
    "gradient_check",
]

L2_NORM_FLOOR = 1e-12


class ShapeError(ValueError):
    pass


class DegenerateEmbeddingError(ValueError):
    """Raised when a row handed to ``l2_normalize`` has (near) zero norm."""


class TapeError(RuntimeError):
    pass


class Tensor:
    """A float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

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
    def is_leaf(self) -> bool:
        return self._tape is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


@dataclass
class _Record:
    op: str
    inputs: tuple
    output: Tensor
    vjp: Callable


@dataclass
class Tape:
    """Ordered log of differentiable operations for one forward pass.

    Tapes are thread-local when entered as context managers, so separate
    threads can record independent passes.
    """

    records: list = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, op: str, inputs, output: Tensor, vjp: Callable) -> None:
        if self.consumed:
            raise TapeError("cannot record on a tape that has already run backward")
        output._tape = self
        self.records.append(_Record(op, tuple(inputs), output, vjp))

    def backward(self, output: Tensor, grad: np.ndarray | None = None) -> None:
        """Accumulate d(output)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if output._tape is not self:
            raise TapeError("backward called on a tensor not produced by this tape")
        if self.consumed:
            raise TapeError("tape already consumed by a previous backward pass")
        if grad is None:
            if output.data.size != 1:
                raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
            grad = np.ones_like(output.data)
        grads: dict[int, np.ndarray] = {id(output): np.asarray(grad, dtype=np.float64)}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            in_grads = rec.vjp(g)
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                    continue
                if t._tape is self:
                    prev = grads.get(id(t))
                    grads[id(t)] = gi if prev is None else prev + gi
                else:
                    t.grad = gi.copy() if t.grad is None else t.grad + gi
        self.records.clear()
        self.consumed = True


def apply_op(op: str, inputs: Sequence[Tensor], value: np.ndarray, vjp: Callable) -> Tensor:
    """Wrap ``value`` as the output of ``op`` and record it when differentiable.

    ``vjp(g)`` must return one gradient (or None) per input.
    """
    tape = active_tape()
    needs = tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs)
    if needs:
        tape.record(op, inputs, out, vjp)
    return out


# ---------------------------------------------------------------------------
# elementwise / broadcasting
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return apply_op(
        "add", (a, b), a.data + b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return apply_op(
        "sub", (a, b), a.data - b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return apply_op(
        "mul", (a, b), a.data * b.data,
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data
    return apply_op(
        "div", (a, b), out,
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return apply_op("neg", (a,), -a.data, lambda g: (-g,))


def maximum(a, b) -> Tensor:
    """Elementwise max. Ties send the gradient to ``b`` (so ``maximum(x, 0)`` at 0 has slope 0)."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "max")
    take_a = a.data > b.data
    return apply_op(
        "max", (a, b), np.where(take_a, a.data, b.data),
        lambda g: (_unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)),
    )


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return apply_op("relu", (x,), np.where(pos, x.data, 0.0), lambda g: (g * pos,))


def log(x) -> Tensor:
    x = as_tensor(x)
    return apply_op("log", (x,), np.log(x.data), lambda g: (g / x.data,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return apply_op("exp", (x,), out, lambda g: (g * out,))


def sqrt(x) -> Tensor:
    """Square root; the derivative at exactly 0 is taken as 0."""
    x = as_tensor(x)
    out = np.sqrt(x.data)

    def vjp(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)

    return apply_op("sqrt", (x,), out, vjp)


def square(x) -> Tensor:
    x = as_tensor(x)
    return apply_op("square", (x,), x.data * x.data, lambda g: (2.0 * g * x.data,))


def softplus(x) -> Tensor:
    x = as_tensor(x)
    out = np.logaddexp(0.0, x.data)
    sig = np.exp(x.data - out)
    return apply_op("softplus", (x,), out, lambda g: (g * sig,))


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    return apply_op("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return apply_op("transpose", (x,), np.transpose(x.data, axes), lambda g: (np.transpose(g, inv),))


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat: empty input list")
    ref = xs[0].shape
    ax = axis % len(ref)
    for x in xs[1:]:
        if x.ndim != len(ref) or any(x.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: shapes {ref} and {x.shape} disagree off axis {axis}")
    bounds = np.cumsum([0] + [x.shape[ax] for x in xs])

    def vjp(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(xs))
        )

    return apply_op("concat", xs, np.concatenate([x.data for x in xs], axis=ax), vjp)


def slice_(x, axis: int, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    ax = axis % x.ndim
    if not 0 <= start <= stop <= x.shape[ax]:
        raise ShapeError(f"slice: [{start}:{stop}] out of range for axis {axis} of {x.shape}")
    index = [slice(None)] * x.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)

    def vjp(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return apply_op("slice", (x,), x.data[index].copy(), vjp)


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return apply_op("reduce_sum", (x,), out, vjp)


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    count = x.size // max(out.size, 1) if x.size else 1

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return apply_op("reduce_mean", (x,), out, vjp)


# ---------------------------------------------------------------------------
# linear algebra / network layers
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return apply_op("matmul", (a, b), a.data @ b.data, lambda g: (g @ b.data.T, a.data.T @ g))


def affine(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` shaped (in, out)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"affine: input {x.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data
    if bias is None:
        return apply_op("affine", (x, weight), out, lambda g: (g @ weight.data.T, x.data.T @ g))
    bias = as_tensor(bias)
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"affine: bias {bias.shape} does not match weight {weight.shape}")
    return apply_op(
        "affine", (x, weight, bias), out + bias.data,
        lambda g: (g @ weight.data.T, x.data.T @ g, g.sum(axis=0)),
    )


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation on N×C×H×W input with an O×C×kh×kw kernel."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and kernel, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, ck, kh, kw = weight.shape
    if c != ck:
        raise ShapeError(f"conv2d: input {x.shape} has {c} channels, kernel {weight.shape} expects {ck}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} padding={padding}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d: kernel {weight.shape} larger than padded input {x.shape}")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1

    # work channels-last: im2col rows are (n, ho, wo), columns (kh, kw, c)
    xp = x.data.transpose(0, 2, 3, 1)
    if padding:
        xp = np.pad(xp, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]  # n, ho, wo, c, kh, kw
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(o, kh * kw * c)
    out = cols @ wmat.T
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise ShapeError(f"conv2d: bias {bias.shape} does not match {o} output channels")
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def vjp(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (g2.T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
        gb = g2.sum(axis=0) if bias is not None else None
        if not x.requires_grad:
            return (None, gw, gb)
        dcols = (g2 @ wmat).reshape(n, ho, wo, kh, kw, c)
        gxp = np.zeros((n, hp, wp, c))
        he, we = stride * (ho - 1) + 1, stride * (wo - 1) + 1
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + he:stride, j:j + we:stride, :] += dcols[:, :, :, i, j, :]
        gx = gxp[:, padding:padding + h, padding:padding + w, :] if padding else gxp
        return (np.ascontiguousarray(gx.transpose(0, 3, 1, 2)), gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return apply_op("conv2d", inputs, out, vjp)


def global_avg_pool(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected N×C×H×W, got {x.shape}")
    area = x.shape[2] * x.shape[3]
    return apply_op(
        "global_avg_pool", (x,), x.data.mean(axis=(2, 3)),
        lambda g: (np.broadcast_to(g[:, :, None, None] / area, x.shape).copy(),),
    )


def l2_normalize(x) -> Tensor:
    """Divide every row of a 2-d tensor by its Euclidean norm."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"l2_normalize: expected a 2-d tensor, got {x.shape}")
    norms = np.sqrt(np.sum(x.data * x.data, axis=1, keepdims=True))
    bad = np.flatnonzero(norms[:, 0] < L2_NORM_FLOOR)
    if bad.size:
        raise DegenerateEmbeddingError(f"l2_normalize: rows {bad.tolist()} have norm < {L2_NORM_FLOOR}")
    out = x.data / norms

    def vjp(g):
        return ((g - out * np.sum(g * out, axis=1, keepdims=True)) / norms,)

    return apply_op("l2_normalize", (x,), out, vjp)


# ---------------------------------------------------------------------------
# generic dispatch
# ---------------------------------------------------------------------------

OP_KINDS: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "conv2d": conv2d,
    "relu": relu,
    "global_avg_pool": global_avg_pool,
    "affine": affine,
    "l2_normalize": l2_normalize,
    "concat": lambda *xs, axis=-1: concat(xs, axis=axis),
    "slice": slice_,
    "reduce_sum": reduce_sum,
    "reduce_mean": reduce_mean,
    "log": log,
    "exp": exp,
    "sqrt": sqrt,
    "square": square,
    "softplus": softplus,
    "max": maximum,
}


def forward_op(kind: str, inputs: Sequence, **attrs) -> Tensor:
    """Run the primitive named ``kind`` on ``inputs``."""
    try:
        fn = OP_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}; expected one of {sorted(OP_KINDS)}") from None
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    tol: float

    @property
    def failures(self) -> np.ndarray:
        return np.flatnonzero(self.rel_error.reshape(-1) > self.tol)

    @property
    def ok(self) -> bool:
        return self.failures.size == 0

    @property
    def max_rel_error(self) -> float:
        return float(self.rel_error.max()) if self.rel_error.size else 0.0


def gradient_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare tape gradients of scalar ``f`` at ``x`` with central differences."""
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(xt)
    if y.size != 1:
        raise ShapeError(f"gradient_check: f must return a scalar, got shape {y.shape}")
    tape.backward(y)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(base)

    numeric = np.empty_like(base)
    flat, out = base.reshape(-1), numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(base)).item()
        flat[i] = orig - h
        fm = f(Tensor(base)).item()
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)

    rel = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
    return GradCheckReport(analytic=analytic, numeric=numeric, rel_error=rel, tol=tol)
