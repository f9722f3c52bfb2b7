"""Small reverse-mode autodiff over dense numpy arrays.

Operations execute eagerly and are recorded on a :class:`Tape`.  Calling
:meth:`Tape.backward` on a scalar output walks the tape in reverse insertion
order and returns a gradient for every trainable leaf.  Only first-order
gradients are supported.

Everything is computed in float64.
"""
from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeError", "NonFiniteError",
    "value_and_grad", "dropout_mask",
    "add", "sub", "mul", "div", "scale", "matmul", "spmm", "swap_last",
    "sigmoid", "log_sigmoid", "relu", "exp", "log", "sum", "mean",
    "gather", "index", "softmax", "layer_norm", "dropout", "rowdot",
    "sumsq", "l2norm", "neg",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """A node on a tape: an immutable value plus how it was produced."""

    __slots__ = ("value", "tape", "index", "op", "parents", "backward_fn",
                 "requires_grad", "name")

    def __init__(self, value, tape, index, op, parents=(), backward_fn=None,
                 requires_grad=False, name=None):
        self.value = value
        self.tape = tape
        self.index = index
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def describe(self):
        label = f"#{self.index} {self.op}"
        if self.name:
            label += f" '{self.name}'"
        return f"{label} {tuple(self.shape)}"

    def __repr__(self):
        return f"Tensor({self.describe()})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


class Tape:
    """Records operations in execution order (which is a topological order).

    ``check_finite`` rejects NaN/Inf as soon as any node produces one.
    """

    def __init__(self, check_finite: bool = True):
        self.nodes: list[Tensor] = []
        self.params: dict[str, Tensor] = {}
        self.check_finite = check_finite

    def param(self, name: str, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already on tape")
        t = self._leaf(value, "param", requires_grad=True, name=name)
        self.params[name] = t
        return t

    def constant(self, value, name=None) -> Tensor:
        return self._leaf(value, "const", requires_grad=False, name=name)

    def _leaf(self, value, op, requires_grad, name):
        value = np.asarray(value, dtype=np.float64)
        t = Tensor(value, self, len(self.nodes), op, requires_grad=requires_grad, name=name)
        self.nodes.append(t)
        if self.check_finite and not np.isfinite(value).all():
            raise NonFiniteError(f"non-finite value bound to leaf {t.describe()}")
        return t

    def record(self, op: str, value: np.ndarray, parents: tuple, backward_fn: Callable) -> Tensor:
        needs = any(p.requires_grad for p in parents)
        t = Tensor(value, self, len(self.nodes), op, parents,
                   backward_fn if needs else None, needs)
        self.nodes.append(t)
        if self.check_finite and not np.isfinite(value).all():
            src = ", ".join(p.describe() for p in parents)
            raise NonFiniteError(f"non-finite output at node {t.describe()} (inputs: {src})")
        return t

    def lift(self, x) -> Tensor:
        if isinstance(x, Tensor):
            if x.tape is not self:
                raise ValueError(f"tensor {x.describe()} belongs to another tape")
            return x
        return self.constant(x)

    def backward(self, output: Tensor) -> dict[str, np.ndarray]:
        """Gradient of a scalar ``output`` with respect to every parameter."""
        if output.value.size != 1:
            raise ShapeError(f"backward needs a scalar output, got {output.describe()}")
        grads: list = [None] * (output.index + 1)
        grads[output.index] = np.ones_like(output.value)
        for node in reversed(self.nodes[: output.index + 1]):
            g = grads[node.index]
            if g is None or node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if grads[parent.index] is None:
                    grads[parent.index] = pg
                else:
                    grads[parent.index] = grads[parent.index] + pg
        out = {}
        for name, p in self.params.items():
            g = grads[p.index] if p.index < len(grads) else None
            out[name] = np.zeros_like(p.value) if g is None else np.asarray(g, dtype=np.float64)
        return out


def value_and_grad(fn: Callable[..., Tensor], params: Mapping[str, np.ndarray], *args,
                   check_finite: bool = True, **kwargs):
    """Evaluate ``fn(tape, param_tensors, *args)`` and differentiate it.

    Returns ``(float(loss), {name: gradient})``.
    """
    tape = Tape(check_finite=check_finite)
    bound = {name: tape.param(name, v) for name, v in params.items()}
    out = fn(tape, bound, *args, **kwargs)
    grads = tape.backward(out)
    return float(out.value), grads


def dropout_mask(shape, rate: float, seed) -> np.ndarray:
    """Inverted dropout mask with entries in {0, 1/(1-rate)}."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(shape)
    keep = np.random.default_rng(seed).random(shape) >= rate
    return keep / (1.0 - rate)


# ---------------------------------------------------------------- helpers

def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _pair(a, b):
    tape = a.tape if isinstance(a, Tensor) else b.tape
    return tape, tape.lift(a), tape.lift(b)


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot combine {a.describe()} with {b.describe()}") from None


# ------------------------------------------------------------ elementwise

def add(a, b) -> Tensor:
    tape, a, b = _pair(a, b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return tape.record("add", a.value + b.value, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    tape, a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return tape.record("sub", a.value - b.value, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    tape, a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)
    av, bv = a.value, b.value
    return tape.record("mul", av * bv, (a, b),
                       lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Tensor:
    tape, a, b = _pair(a, b)
    _broadcast_shape("div", a, b)
    av, bv = a.value, b.value
    with np.errstate(divide="ignore", invalid="ignore"):
        out = av / bv

    def backward(g):
        return (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape))
    return tape.record("div", out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    return a.tape.record("scale", a.value * c, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return a.tape.record("neg", -a.value, (a,), lambda g: (-g,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.value
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return a.tape.record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def log_sigmoid(a: Tensor) -> Tensor:
    """log(sigmoid(x)) without overflow for large |x|."""
    x = a.value
    out = -np.logaddexp(0.0, -x)
    sig_neg = np.exp(-np.logaddexp(0.0, x))  # sigmoid(-x)
    return a.tape.record("log_sigmoid", out, (a,), lambda g: (g * sig_neg,))


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    return a.tape.record("relu", np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    return a.tape.record("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.value
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x)
    return a.tape.record("log", out, (a,), lambda g: (g / x,))


def dropout(a: Tensor, mask: np.ndarray | None) -> Tensor:
    """Multiply by a precomputed mask; ``None`` means evaluation mode."""
    if mask is None:
        return a
    if mask.shape != a.shape:
        raise ShapeError(f"dropout: mask shape {mask.shape} does not match {a.describe()}")
    return a.tape.record("dropout", a.value * mask, (a,), lambda g: (g * mask,))


# ------------------------------------------------------------- reductions

def sum(a: Tensor, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    shape = a.shape
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return a.tape.record("sum", np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.value.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def sumsq(a: Tensor) -> Tensor:
    v = a.value
    return a.tape.record("sumsq", np.asarray(np.dot(v.ravel(), v.ravel())), (a,),
                         lambda g: (2.0 * g * v,))


def l2norm(a: Tensor) -> Tensor:
    v = a.value
    n = float(np.sqrt(np.dot(v.ravel(), v.ravel())))
    return a.tape.record("l2norm", np.asarray(n), (a,),
                         lambda g: (g * v / n if n > 0 else np.zeros_like(v),))


def rowdot(a, b) -> Tensor:
    """Dot product along the last axis."""
    tape, a, b = _pair(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"rowdot: {a.describe()} vs {b.describe()}")
    av, bv = a.value, b.value
    return tape.record("rowdot", np.einsum("...d,...d->...", av, bv), (a, b),
                       lambda g: (g[..., None] * bv, g[..., None] * av))


# ---------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    tape, a, b = _pair(a, b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ between {a.describe()} and {b.describe()}")
    try:
        out = np.matmul(av, bv)
    except ValueError:
        raise ShapeError(f"matmul: cannot batch {a.describe()} with {b.describe()}") from None
    need_a, need_b = a.requires_grad, b.requires_grad

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bv, -1, -2)), av.shape) if need_a else None
        gb = _unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g), bv.shape) if need_b else None
        return ga, gb
    return tape.record("matmul", out, (a, b), backward)


def spmm(matrix, x: Tensor) -> Tensor:
    """Constant scipy sparse matrix times a dense 2-D tensor."""
    if matrix.shape[1] != x.shape[0]:
        raise ShapeError(f"spmm: sparse {matrix.shape} vs {x.describe()}")
    mt = matrix.T.tocsr()
    return x.tape.record("spmm", np.asarray(matrix @ x.value), (x,),
                         lambda g: (np.asarray(mt @ g),))


def swap_last(a: Tensor) -> Tensor:
    return a.tape.record("transpose", np.swapaxes(a.value, -1, -2), (a,),
                         lambda g: (np.swapaxes(g, -1, -2),))


# ---------------------------------------------------------------- indexing

def gather(table: Tensor, idx) -> Tensor:
    """Row lookup ``table[idx]``; ``idx`` may have any integer shape."""
    idx = np.asarray(idx, dtype=np.int64)
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather: index out of range for {table.describe()}")
    shape = table.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, idx.ravel(), g.reshape(-1, *shape[1:]))
        return (out,)
    return table.tape.record("gather", table.value[idx], (table,), backward)


def index(a: Tensor, key) -> Tensor:
    """Basic (non-fancy) indexing such as ``x[:, -1, :]``."""
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        out[key] = g
        return (out,)
    return a.tape.record("index", np.array(a.value[key]), (a,), backward)


# --------------------------------------------------------------- composite

def softmax(a: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax with max subtraction; ``mask`` False entries get weight 0."""
    x = a.value
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return a.tape.record("softmax", out, (a,), backward)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then ``* gain + bias``."""
    tape = a.tape
    gain, bias = tape.lift(gain), tape.lift(bias)
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: {gain.describe()} / {bias.describe()} vs {a.describe()}")
    x = a.value
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gv = gain.value

    def backward(g):
        gx = g * gv
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, d)
        return dx, (flat_g * xhat.reshape(-1, d)).sum(axis=0), flat_g.sum(axis=0)
    return tape.record("layer_norm", xhat * gv + bias.value, (a, gain, bias), backward)
