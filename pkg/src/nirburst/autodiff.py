"""Dense tensors with a dynamic reverse-mode tape, plus Adam.

Every differentiable computation in the package goes through this module.
A :class:`Tape` is opened with ``with Tape() as tape:``; operations executed
inside it on tensors that require gradients are recorded in execution order,
and :func:`backward` walks that record in reverse.  Outside a tape the same
operations run as plain numpy computations (used for rendering).

Broadcasting is limited to the patterns the networks need: python/0-d
scalars against anything, equal shapes, and size-1 axes of a tensor with the
same number of dimensions (row biases ``1 x n`` and column weights ``B x 1``).
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, DomainError, NonFiniteError, UsageError

__all__ = [
    "Tensor", "Tape", "AdamState", "Adam", "tensor", "parameter", "backward",
    "matmul", "add", "sub", "mul", "div", "neg", "sin", "tanh", "relu", "abs",
    "square", "clamp", "sigmoid", "sqrt", "elementwise", "reduce", "sum", "mean",
    "l1", "l2sq", "concat", "take_rows", "rows", "columns", "get_dtype",
    "set_precision", "precision", "adam_step",
]

_PRECISIONS = {"float32": np.float32, "float64": np.float64}
_dtype = np.float32
_tape_stack: list["Tape"] = []


def get_dtype():
    return _dtype


def set_precision(name: str) -> None:
    """Select the compute dtype for newly created tensors ("float32"/"float64")."""
    global _dtype
    try:
        _dtype = _PRECISIONS[name]
    except KeyError:
        raise UsageError(f"unknown precision {name!r}") from None


@contextlib.contextmanager
def precision(name: str):
    global _dtype
    saved = _dtype
    set_precision(name)
    try:
        yield
    finally:
        _dtype = saved


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, check=True):
        arr = np.asarray(data, dtype=_dtype)
        if check and not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return len(self.data)

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __rtruediv__ = lambda self, other: div(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: neg(self)

    def __getitem__(self, key):
        # only column slices of 2-d tensors are differentiable
        if (isinstance(key, tuple) and len(key) == 2 and key[0] == slice(None)
                and self.ndim == 2):
            col = key[1]
            if isinstance(col, int):
                col = slice(col, col + 1 if col != -1 else None)
            return columns(self, col)
        raise UsageError("only t[:, j] / t[:, a:b] indexing is supported")


def tensor(data, requires_grad=False, name=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def parameter(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    backward: object


class Tape:
    """Ordered record of the operations executed while the tape is active."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._produced: set[int] = set()

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out, inputs, backward_fn):
        self.nodes.append(_Node(out, inputs, backward_fn))
        self._produced.add(id(out))

    def __contains__(self, t):
        return id(t) in self._produced


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _make(data, inputs, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    needs = any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs and _tape_stack:
        _tape_stack[-1].record(out, inputs, backward_fn)
    return out


def _broadcast_shape(a, b):
    sa, sb = a.shape, b.shape
    if sa == sb:
        return sa
    if a.ndim == 0:
        return sb
    if b.ndim == 0:
        return sa
    if a.ndim != b.ndim:
        raise DimensionError(f"incompatible shapes {sa} and {sb}")
    out = []
    for da, db in zip(sa, sb):
        if da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            raise DimensionError(f"incompatible shapes {sa} and {sb}")
    return tuple(out)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


# --------------------------------------------------------------------- ops


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def bwd(g):
        return (g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None)

    return _make(a.data @ b.data, (a, b), bwd)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)

    def bwd(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _make(a.data + b.data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)

    def bwd(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _make(a.data - b.data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)

    def bwd(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _make(a.data * b.data, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    if np.any(b.data == 0):
        raise DomainError("division by zero")
    out = a.data / b.data
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("division produced a non-finite value")

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bwd)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def sin(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1 - out * out),))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(a.data)
    if np.any(out == 0):
        raise DomainError("sqrt is not differentiable at 0")
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    # split by sign so exp never overflows
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)
    return _make(out, (a,), lambda g: (g * out * (1 - out),))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0).astype(a.data.dtype, copy=False), (a,),
                 lambda g: (g * mask,))


def abs(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = _as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def square(a) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2 * g * a.data,))


def clamp(a, lo=None, hi=None) -> Tensor:
    a = _as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return _make(out, (a,), lambda g: (g * inside,))


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "div": div, "sin": sin, "tanh": tanh,
    "relu": relu, "abs": abs, "square": square, "clamp": clamp,
    "sigmoid": sigmoid, "neg": neg, "sqrt": sqrt,
}


def elementwise(op: str, *args, **kwargs) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise UsageError(f"unknown elementwise op {op!r}") from None
    return fn(*args, **kwargs)


def _check_nonempty(t):
    if t.size == 0:
        raise DomainError("reduction over an empty tensor")


def sum(t) -> Tensor:  # noqa: A001
    t = _as_tensor(t)
    _check_nonempty(t)
    return _make(np.asarray(t.data.sum(), dtype=t.data.dtype), (t,),
                 lambda g: (np.broadcast_to(g, t.shape),))


def mean(t) -> Tensor:
    t = _as_tensor(t)
    _check_nonempty(t)
    n = t.size
    return _make(np.asarray(t.data.mean(), dtype=t.data.dtype), (t,),
                 lambda g: (np.broadcast_to(g / n, t.shape),))


def l1(t) -> Tensor:
    t = _as_tensor(t)
    _check_nonempty(t)
    return _make(np.asarray(np.abs(t.data).sum(), dtype=t.data.dtype), (t,),
                 lambda g: (g * np.sign(t.data),))


def l2sq(t) -> Tensor:
    t = _as_tensor(t)
    _check_nonempty(t)
    return _make(np.asarray(np.vdot(t.data, t.data), dtype=t.data.dtype), (t,),
                 lambda g: (2 * g * t.data,))


_REDUCE = {"sum": sum, "mean": mean, "l1": l1, "l2sq": l2sq}


def reduce(op: str, t) -> Tensor:
    try:
        fn = _REDUCE[op]
    except KeyError:
        raise UsageError(f"unknown reduction {op!r}") from None
    return fn(t)


def concat(tensors, axis=0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bwd(g):
        grads = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if not t.requires_grad:
                grads.append(None)
                continue
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            grads.append(g[tuple(idx)])
        return tuple(grads)

    return _make(out, tuple(tensors), bwd)


def take_rows(t, index) -> Tensor:
    """Gather rows ``t[index]``; the backward pass scatter-adds."""
    t = _as_tensor(t)
    index = np.asarray(index, dtype=np.intp)

    def bwd(g):
        acc = np.zeros(t.shape, dtype=g.dtype)
        np.add.at(acc, index, g)
        return (acc,)

    return _make(t.data[index], (t,), bwd)


def rows(t, sl: slice) -> Tensor:
    """Contiguous row block ``t[sl]``."""
    t = _as_tensor(t)

    def bwd(g):
        acc = np.zeros(t.shape, dtype=g.dtype)
        acc[sl] = g
        return (acc,)

    return _make(t.data[sl], (t,), bwd)


def columns(t, cols: slice) -> Tensor:
    t = _as_tensor(t)
    if t.ndim != 2:
        raise DimensionError("column slicing needs a 2-d tensor")

    def bwd(g):
        acc = np.zeros(t.shape, dtype=g.dtype)
        acc[:, cols] = g
        return (acc,)

    return _make(t.data[:, cols], (t,), bwd)


# ---------------------------------------------------------------- backward


def backward(loss: Tensor, tape: Tape):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every recorded leaf.

    Returns the list of leaf tensors that received a gradient.
    """
    if loss.size != 1 or loss.ndim != 0:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss not in tape:
        raise UsageError("loss was not produced on this tape")
    grads = {id(loss): np.ones((), dtype=loss.data.dtype)}
    leaves = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if inp not in tape:
                leaves[key] = inp
    for key, leaf in leaves.items():
        g = grads[key]
        g = np.array(g, dtype=leaf.data.dtype).reshape(leaf.shape)
        leaf.grad = g if leaf.grad is None else leaf.grad + g
    return list(leaves.values())


# -------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if not self.lr > 0:
            raise UsageError("learning rate must be positive")


def adam_step(params, grads, state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params[i].data``.

    Parameters with a ``None`` gradient are treated as having zero gradient.
    """
    if len(params) != len(grads):
        raise UsageError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise UsageError("optimizer state does not match parameter list")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape or m.shape != p.shape:
            raise UsageError(f"shape mismatch in adam_step: {g.shape} vs {p.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype, copy=False)


class Adam:
    """Convenience wrapper binding an :class:`AdamState` to a parameter list."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        adam_step(self.params, [p.grad for p in self.params], self.state)
