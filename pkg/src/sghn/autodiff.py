"""A small reverse-mode differentiation engine over numpy arrays.

Every operation returns a :class:`Value` remembering its parents and a
vector-Jacobian product written in terms of other ``Value`` operations. Because
the backward pass is made of ordinary operations, ``grad(..., create_graph=True)``
records it into the graph as well, and the returned gradients can be
differentiated again. That is all the training losses of Hamiltonian models
need: they contain dH/dq and dH/dp, and the optimiser differentiates through
them.

Node ids increase with creation time, so sorting reachable nodes by id is a
valid topological order.

>>> x = Value(2.0, requires_grad=True)
>>> (dx,) = grad_graph(x * x * x, [x])
>>> grad(dx, [x])[0]
array(12.)
"""
from __future__ import annotations

import contextlib
import contextvars
import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special

_ids = itertools.count()
_grad_enabled = contextvars.ContextVar("grad_enabled", default=True)
_active_tape = contextvars.ContextVar("active_tape", default=None)


class ShapeError(ValueError):
    """Operand shapes do not conform."""


@contextlib.contextmanager
def no_grad():
    """Operations inside do not record parents for differentiation."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


@contextlib.contextmanager
def enable_grad():
    """Undo an enclosing ``no_grad``; Hamiltonian fields need input gradients
    even when evaluated without parameter gradients."""
    token = _grad_enabled.set(True)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


class Value:
    __slots__ = ("data", "parents", "vjp", "fwd", "op", "id", "requires_grad", "__weakref__")

    # make numpy defer to our reflected operators
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents: tuple[Value, ...] = ()
        self.vjp = None
        self.fwd = None
        self.op = "leaf"
        self.id = next(_ids)
        self.requires_grad = requires_grad
        tape = _active_tape.get()
        if tape is not None:
            tape.nodes.append(self)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Value(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    # operator sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, o): return matmul(self, o)
    def __pow__(self, k: int): return power(self, k)
    def __getitem__(self, idx): return getitem(self, idx)

    @property
    def T(self) -> "Value":
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Value":
        return vsum(self, axis, keepdims)

    def reshape(self, *shape) -> "Value":
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _op(name: str, fwd: Callable, parents: Sequence[Value], vjp: Callable) -> Value:
    data = fwd(*(p.data for p in parents))
    out = Value(data)
    out.op = name
    out.fwd = fwd
    out.parents = tuple(parents)
    out.requires_grad = _grad_enabled.get() and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out.vjp = vjp
    return out


# ---------------------------------------------------------------------------
# shape plumbing

def reshape(x, shape) -> Value:
    x = as_value(x)
    shape = tuple(shape)
    src = x.shape
    return _op("reshape", lambda a: a.reshape(shape), (x,),
               lambda g, out: (reshape(g, src),))


def transpose(x) -> Value:
    x = as_value(x)
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {x.shape}")
    return _op("transpose", lambda a: a.T, (x,), lambda g, out: (transpose(g),))


def broadcast_to(x, shape) -> Value:
    x = as_value(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    src = x.shape
    return _op("broadcast_to", lambda a: np.broadcast_to(a, shape).copy(), (x,),
               lambda g, out: (sum_to(g, src),))


def vsum(x, axis=None, keepdims: bool = False) -> Value:
    x = as_value(x)
    src = x.shape
    if axis is None:
        kept = (1,) * len(src)
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(src) for a in axes)
        kept = tuple(1 if i in axes else d for i, d in enumerate(src))

    def vjp(g, out):
        return (broadcast_to(reshape(g, kept), src),)

    return _op("sum", lambda a: a.sum(axis=axis, keepdims=keepdims), (x,), vjp)


def sum_to(x: Value, shape: tuple[int, ...]) -> Value:
    """Sum a broadcast result back down to ``shape``."""
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, d in enumerate(shape) if d == 1 and x.shape[lead + i] != 1)
    return reshape(vsum(x, axes, keepdims=False), shape)


def getitem(x, idx) -> Value:
    x = as_value(x)
    src = x.shape
    return _op("getitem", lambda a: a[idx], (x,),
               lambda g, out: (scatter(g, idx, src),))


def scatter(x, idx, shape) -> Value:
    """Adjoint of ``getitem``: zeros of ``shape`` with ``x`` added at ``idx``."""
    x = as_value(x)
    shape = tuple(shape)

    def fwd(a):
        z = np.zeros(shape)
        np.add.at(z, idx, a)
        return z

    return _op("scatter", fwd, (x,), lambda g, out: (getitem(g, idx),))


def concat(xs: Sequence, axis: int = -1) -> Value:
    xs = [as_value(x) for x in xs]
    axis_ = axis % xs[0].ndim
    bounds = np.cumsum([0] + [x.shape[axis_] for x in xs])

    def vjp(g, out):
        lead = (slice(None),) * axis_
        return tuple(getitem(g, lead + (slice(int(lo), int(hi)),))
                     for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _op("concat", lambda *a: np.concatenate(a, axis=axis_), xs, vjp)


# ---------------------------------------------------------------------------
# arithmetic

def _check_broadcast(a: Value, b: Value, name: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not conform") from None


def add(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _check_broadcast(a, b, "add")
    return _op("add", np.add, (a, b),
               lambda g, out: (sum_to(g, a.shape), sum_to(g, b.shape)))


def sub(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _check_broadcast(a, b, "sub")
    return _op("sub", np.subtract, (a, b),
               lambda g, out: (sum_to(g, a.shape), sum_to(neg(g), b.shape)))


def mul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _check_broadcast(a, b, "mul")
    return _op("mul", np.multiply, (a, b),
               lambda g, out: (sum_to(g * b, a.shape), sum_to(g * a, b.shape)))


def div(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _check_broadcast(a, b, "div")
    return _op("div", np.divide, (a, b),
               lambda g, out: (sum_to(g / b, a.shape), sum_to(neg(g) * out / b, b.shape)))


def neg(x) -> Value:
    return _op("neg", np.negative, (as_value(x),), lambda g, out: (neg(g),))


def power(x, k: int) -> Value:
    if not isinstance(k, int) or k < 1:
        raise ValueError("power supports positive integer exponents only")
    x = as_value(x)
    if k == 1:
        return x
    return _op("power", lambda a: a ** k, (x,),
               lambda g, out: (g * (k * power(x, k - 1)),))


def square(x) -> Value:
    x = as_value(x)
    return _op("square", np.square, (x,), lambda g, out: (g * (2.0 * x),))


def matmul(a, b) -> Value:
    """``a @ b`` with ``a`` of shape ``(..., k)`` and ``b`` a matrix or vector."""
    a, b = as_value(a), as_value(b)
    if b.ndim not in (1, 2) or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    k = b.shape[0]

    if b.ndim == 2:
        m = b.shape[1]

        def vjp(g, out):
            ga = matmul(g, transpose(b))
            gb = matmul(transpose(reshape(a, (-1, k))), reshape(g, (-1, m)))
            return ga, gb
    else:
        def vjp(g, out):
            ga = reshape(g, g.shape + (1,)) * b
            gb = matmul(transpose(reshape(a, (-1, k))), reshape(g, (-1,)))
            return ga, gb

    return _op("matmul", np.matmul, (a, b), vjp)


def matvec(m, x) -> Value:
    return matmul(m, x)


def abs_(x) -> Value:
    x = as_value(x)
    return _op("abs", np.abs, (x,), lambda g, out: (g * np.sign(x.data),))


# ---------------------------------------------------------------------------
# elementwise functions

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_TWO_OVER_SQRT_PI = 2.0 / math.sqrt(math.pi)


def exp(x) -> Value:
    return _op("exp", np.exp, (as_value(x),), lambda g, out: (g * out,))


def sin(x) -> Value:
    x = as_value(x)
    return _op("sin", np.sin, (x,), lambda g, out: (g * cos(x),))


def cos(x) -> Value:
    x = as_value(x)
    return _op("cos", np.cos, (x,), lambda g, out: (neg(g * sin(x)),))


def tanh(x) -> Value:
    return _op("tanh", np.tanh, (as_value(x),), lambda g, out: (g * (1.0 - out * out),))


def sigmoid(x) -> Value:
    return _op("sigmoid", special.expit, (as_value(x),),
               lambda g, out: (g * (out * (1.0 - out)),))


def silu(x) -> Value:
    """x * sigmoid(x)."""
    x = as_value(x)

    def vjp(g, out):
        s = sigmoid(x)
        return (g * (s * (1.0 + x * (1.0 - s))),)

    return _op("silu", lambda a: a * special.expit(a), (x,), vjp)


def erf(x) -> Value:
    x = as_value(x)
    return _op("erf", special.erf, (x,),
               lambda g, out: (g * (_TWO_OVER_SQRT_PI * exp(neg(square(x)))),))


def gelu(x) -> Value:
    """Exact GELU, x * Phi(x) with the Gaussian CDF Phi."""
    x = as_value(x)

    def vjp(g, out):
        cdf = 0.5 * (1.0 + erf(x / _SQRT2))
        pdf = _INV_SQRT_2PI * exp(-0.5 * square(x))
        return (g * (cdf + x * pdf),)

    return _op("gelu", lambda a: a * 0.5 * (1.0 + special.erf(a / _SQRT2)), (x,), vjp)


ACTIVATIONS: dict[str, Callable[[Value], Value]] = {"tanh": tanh, "silu": silu, "gelu": gelu}


# ---------------------------------------------------------------------------
# differentiation

def _reachable(output: Value) -> list[Value]:
    seen: set[int] = set()
    order: list[Value] = []
    stack = [output]
    while stack:
        node = stack.pop()
        if node.id in seen or not node.requires_grad:
            continue
        seen.add(node.id)
        order.append(node)
        stack.extend(node.parents)
    order.sort(key=lambda v: v.id, reverse=True)
    return order


def _backward(output: Value, inputs: Sequence[Value], create_graph: bool) -> list[Value | None]:
    if output.data.size != 1:
        raise ShapeError(f"grad needs a scalar output, got shape {output.shape}")
    grads: dict[int, Value] = {output.id: Value(np.ones_like(output.data))}
    ctx = contextlib.nullcontext() if create_graph else no_grad()
    with ctx:
        for node in _reachable(output):
            g = grads.pop(node.id, None)
            if g is None or node.vjp is None:
                if g is not None:
                    grads[node.id] = g
                continue
            for parent, pg in zip(node.parents, node.vjp(g, node)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(parent.id)
                grads[parent.id] = pg if prev is None else prev + pg
            if any(node is x for x in inputs):
                grads[node.id] = g
    return [grads.get(x.id) for x in inputs]


def grad(output: Value, inputs: Sequence[Value]) -> list[np.ndarray]:
    """Reverse-mode gradients of a scalar ``output`` as plain arrays.

    Inputs the output does not depend on get zeros.
    """
    gs = _backward(output, inputs, create_graph=False)
    return [np.zeros(x.shape) if g is None else np.broadcast_to(g.data, x.shape).copy()
            for g, x in zip(gs, inputs)]


def grad_graph(output: Value, inputs: Sequence[Value]) -> list[Value]:
    """Like :func:`grad` but the gradients are graph nodes, so they can be
    differentiated again."""
    gs = _backward(output, inputs, create_graph=True)
    return [Value(np.zeros(x.shape)) if g is None else g for g, x in zip(gs, inputs)]


class Tape:
    """Records every ``Value`` created while active, in creation order.

    >>> with Tape() as tape:
    ...     y = exp(Value(1.0)) * 2.0
    >>> [v.op for v in tape.nodes]
    ['leaf', 'exp', 'leaf', 'mul']
    """

    def __init__(self) -> None:
        self.nodes: list[Value] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)

    def replay(self, overrides: dict[int, np.ndarray] | None = None) -> dict[int, np.ndarray]:
        """Recompute every recorded node from its parents; returns id -> data.

        ``overrides`` replaces leaf data by node id, which turns the tape into
        a re-evaluable function of its inputs.
        """
        values: dict[int, np.ndarray] = dict(overrides or {})
        for node in self.nodes:
            if node.id in values and not node.parents:
                continue
            if node.fwd is None:
                values[node.id] = node.data
            else:
                values[node.id] = node.fwd(*(values.get(p.id, p.data) for p in node.parents))
        return values


def parameters(values: Iterable[np.ndarray]) -> list[Value]:
    """Fresh trainable leaves wrapping ``values``."""
    return [Value(v, requires_grad=True) for v in values]
