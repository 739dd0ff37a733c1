"""Reverse-mode automatic differentiation on an eagerly recorded graph.

Every operation on a :class:`Var` computes its value immediately and records
the operation together with its parents. Backward rules are written with the
same operations, so the output of :func:`gradient` is itself part of the graph
and can be differentiated a second time (double backpropagation).

ReLU is the only operation whose backward rule depends on a
:class:`BackwardMode`: the forward pass is always the exact ReLU, while the
backward pass uses either the exact step function or a sigmoid surrogate.
"""

from __future__ import annotations

import itertools
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

__all__ = [
    "BackwardMode",
    "EXACT",
    "Var",
    "Tape",
    "constant",
    "variable",
    "gradient",
    "tape_eval",
    "smooth_relu_backward",
    "finite_diff_check",
]

_ids = itertools.count()

_MODE_KINDS = ("exact", "smooth", "literal")


@dataclass(frozen=True)
class BackwardMode:
    """Which derivative ReLU uses during a backward pass.

    ``exact`` uses the step function. ``smooth`` uses ``sigmoid(alpha * z)``,
    the derivative of a softplus of sharpness ``alpha``. ``literal`` uses
    ``alpha * sigmoid(z)`` and exists only for comparison.
    """

    kind: str = "exact"
    alpha: float = 1.0

    def __post_init__(self):
        if self.kind not in _MODE_KINDS:
            raise ValueError(f"unknown backward mode {self.kind!r}")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")

    @classmethod
    def smooth(cls, alpha: float) -> BackwardMode:
        return cls("smooth", float(alpha))


EXACT = BackwardMode()


def smooth_relu_backward(z, alpha: float) -> np.ndarray:
    """Elementwise ``sigmoid(alpha * z)``, the substituted ReLU derivative."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    return expit(alpha * np.asarray(z, dtype=np.float64))


class Var:
    """A node of the computation graph holding a float64 array."""

    __slots__ = ("value", "op", "parents", "attrs", "ctx", "id", "is_input", "name")
    __array_priority__ = 1000

    def __init__(self, value, op=None, parents=(), attrs=None, ctx=None,
                 is_input=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.op = op
        self.parents = tuple(parents)
        self.attrs = attrs or {}
        self.ctx = ctx
        self.id = next(_ids)
        self.is_input = is_input
        self.name = name

    def __repr__(self):
        label = self.name or (self.op.name if self.op else "leaf")
        return f"Var({label}, shape={self.shape})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def T(self) -> Var:
        return transpose(self)

    def __add__(self, other):
        return _apply(Add, self, other)

    def __radd__(self, other):
        return _apply(Add, other, self)

    def __sub__(self, other):
        return _apply(Sub, self, other)

    def __rsub__(self, other):
        return _apply(Sub, other, self)

    def __mul__(self, other):
        return _apply(Mul, self, other)

    def __rmul__(self, other):
        return _apply(Mul, other, self)

    def __truediv__(self, other):
        return _apply(Div, self, other)

    def __rtruediv__(self, other):
        return _apply(Div, other, self)

    def __neg__(self):
        return _apply(Neg, self)

    def __matmul__(self, other):
        return _apply(MatMul, self, other)

    def __rmatmul__(self, other):
        return _apply(MatMul, other, self)

    def __pow__(self, p):
        if isinstance(p, Var):
            raise TypeError("only constant exponents are supported")
        return _apply(PowConst, self, p=float(p))

    def sum(self, axis=None, keepdims=False) -> Var:
        return vsum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Var:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def constant(value) -> Var:
    """A leaf that keeps its recorded value when a tape is replayed."""
    return value if isinstance(value, Var) else Var(value)


def variable(value, name=None) -> Var:
    """An input leaf; it must be bound when a tape is replayed."""
    return Var(np.array(value, dtype=np.float64), is_input=True, name=name)


def _apply(op, *args, **attrs) -> Var:
    parents = tuple(constant(a) for a in args)
    out, ctx = op.forward([p.value for p in parents], **attrs)
    return Var(out, op, parents, attrs, ctx)


# -- operations ------------------------------------------------------------
#
# forward(values, **attrs) -> (array, ctx); ctx is recomputed on replay.
# vjp(node, g, needs, mode) -> one Var or None per parent.


class Op:
    name = "op"

    @staticmethod
    def forward(vals, **attrs):
        raise NotImplementedError

    @staticmethod
    def vjp(node, g, needs, mode):
        raise NotImplementedError


class Add(Op):
    name = "add"

    @staticmethod
    def forward(vals):
        return vals[0] + vals[1], None

    @staticmethod
    def vjp(node, g, needs, mode):
        a, b = node.parents
        return [sum_to(g, a.shape) if needs[0] else None,
                sum_to(g, b.shape) if needs[1] else None]


class Sub(Op):
    name = "sub"

    @staticmethod
    def forward(vals):
        return vals[0] - vals[1], None

    @staticmethod
    def vjp(node, g, needs, mode):
        a, b = node.parents
        return [sum_to(g, a.shape) if needs[0] else None,
                sum_to(-g, b.shape) if needs[1] else None]


class Mul(Op):
    name = "mul"

    @staticmethod
    def forward(vals):
        return vals[0] * vals[1], None

    @staticmethod
    def vjp(node, g, needs, mode):
        a, b = node.parents
        return [sum_to(g * b, a.shape) if needs[0] else None,
                sum_to(g * a, b.shape) if needs[1] else None]


class Div(Op):
    name = "div"

    @staticmethod
    def forward(vals):
        return vals[0] / vals[1], None

    @staticmethod
    def vjp(node, g, needs, mode):
        a, b = node.parents
        return [sum_to(g / b, a.shape) if needs[0] else None,
                sum_to(-(g * node) / b, b.shape) if needs[1] else None]


class Neg(Op):
    name = "neg"

    @staticmethod
    def forward(vals):
        return -vals[0], None

    @staticmethod
    def vjp(node, g, needs, mode):
        return [-g]


class MatMul(Op):
    name = "matmul"

    @staticmethod
    def forward(vals):
        a, b = vals
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
        return a @ b, None

    @staticmethod
    def vjp(node, g, needs, mode):
        a, b = node.parents
        return [g @ transpose(b) if needs[0] else None,
                transpose(a) @ g if needs[1] else None]


class Transpose(Op):
    name = "transpose"

    @staticmethod
    def forward(vals, axes=None):
        return np.transpose(vals[0], axes), None

    @staticmethod
    def vjp(node, g, needs, mode):
        axes = node.attrs["axes"]
        inv = None if axes is None else tuple(np.argsort(axes))
        return [transpose(g, inv)]


class Reshape(Op):
    name = "reshape"

    @staticmethod
    def forward(vals, shape):
        return vals[0].reshape(shape), None

    @staticmethod
    def vjp(node, g, needs, mode):
        return [reshape(g, node.parents[0].shape)]


class Sum(Op):
    name = "sum"

    @staticmethod
    def forward(vals, axis=None, keepdims=False):
        return np.sum(vals[0], axis=axis, keepdims=keepdims), None

    @staticmethod
    def vjp(node, g, needs, mode):
        shape = node.parents[0].shape
        axis, keepdims = node.attrs["axis"], node.attrs["keepdims"]
        if not keepdims:
            if axis is None:
                kept = (1,) * len(shape)
            else:
                axes = (axis,) if np.isscalar(axis) else tuple(axis)
                axes = {ax % len(shape) for ax in axes}
                kept = tuple(1 if i in axes else n for i, n in enumerate(shape))
            g = reshape(g, kept)
        return [broadcast_to(g, shape)]


class BroadcastTo(Op):
    name = "broadcast_to"

    @staticmethod
    def forward(vals, shape):
        return np.broadcast_to(vals[0], shape).copy(), None

    @staticmethod
    def vjp(node, g, needs, mode):
        return [sum_to(g, node.parents[0].shape)]


def _sum_to_array(x, shape):
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(shape) if n == 1 and x.shape[lead + i] != 1)
    out = np.sum(x, axis=axes, keepdims=True) if axes else x
    return out.reshape(shape)


class SumTo(Op):
    name = "sum_to"

    @staticmethod
    def forward(vals, shape):
        return _sum_to_array(vals[0], shape), None

    @staticmethod
    def vjp(node, g, needs, mode):
        return [broadcast_to(g, node.parents[0].shape)]


class Exp(Op):
    name = "exp"

    @staticmethod
    def forward(vals):
        return np.exp(vals[0]), None

    @staticmethod
    def vjp(node, g, needs, mode):
        return [g * node]


class Log(Op):
    name = "log"

    @staticmethod
    def forward(vals):
        return np.log(vals[0]), None

    @staticmethod
    def vjp(node, g, needs, mode):
        return [g / node.parents[0]]


class Sigmoid(Op):
    name = "sigmoid"

    @staticmethod
    def forward(vals):
        return expit(vals[0]), None

    @staticmethod
    def vjp(node, g, needs, mode):
        return [g * node * (1.0 - node)]


class Softplus(Op):
    """log(1 + e^x), evaluated stably."""

    name = "softplus"

    @staticmethod
    def forward(vals):
        return np.logaddexp(0.0, vals[0]), None

    @staticmethod
    def vjp(node, g, needs, mode):
        return [g * sigmoid(node.parents[0])]


class Abs(Op):
    name = "abs"

    @staticmethod
    def forward(vals):
        return np.abs(vals[0]), None

    @staticmethod
    def vjp(node, g, needs, mode):
        return [g * Var(np.sign(node.parents[0].value))]


class PowConst(Op):
    name = "pow"

    @staticmethod
    def forward(vals, p):
        return np.power(vals[0], p), None

    @staticmethod
    def vjp(node, g, needs, mode):
        p = node.attrs["p"]
        a = node.parents[0]
        if p == 1.0:
            return [g]
        if p == 2.0:
            return [g * (2.0 * a)]
        return [g * (p * a ** (p - 1.0))]


class Relu(Op):
    name = "relu"

    @staticmethod
    def forward(vals):
        return np.maximum(vals[0], 0.0), None

    @staticmethod
    def vjp(node, g, needs, mode):
        z = node.parents[0]
        if mode.kind == "exact":
            return [g * Var((z.value > 0).astype(np.float64))]
        if mode.kind == "smooth":
            return [g * sigmoid(mode.alpha * z)]
        return [g * (mode.alpha * sigmoid(z))]


class Maximum(Op):
    """Elementwise max(a, b); ties send the gradient to ``a``."""

    name = "maximum"

    @staticmethod
    def forward(vals):
        return np.maximum(vals[0], vals[1]), None

    @staticmethod
    def vjp(node, g, needs, mode):
        a, b = node.parents
        first = Var((a.value >= b.value).astype(np.float64))
        return [sum_to(g * first, a.shape) if needs[0] else None,
                sum_to(g * (1.0 - first), b.shape) if needs[1] else None]


class LogSumExp(Op):
    """log-sum-exp over the last axis."""

    name = "logsumexp"

    @staticmethod
    def forward(vals):
        x = vals[0]
        top = np.max(x, axis=-1, keepdims=True)
        return (top + np.log(np.sum(np.exp(x - top), axis=-1, keepdims=True)))[..., 0], None

    @staticmethod
    def vjp(node, g, needs, mode):
        x = node.parents[0]
        col = x.shape[:-1] + (1,)
        soft = exp(x - broadcast_to(reshape(node, col), x.shape))
        return [broadcast_to(reshape(g, col), x.shape) * soft]


class Pick(Op):
    """x[i, idx[i]] for a 2-D x and a fixed integer index vector."""

    name = "pick"

    @staticmethod
    def forward(vals, idx):
        x = vals[0]
        return x[np.arange(x.shape[0]), idx], None

    @staticmethod
    def vjp(node, g, needs, mode):
        return [scatter(g, node.attrs["idx"], node.parents[0].shape[1])]


class Scatter(Op):
    """Place v[i] at column idx[i] of an otherwise zero (n, width) matrix."""

    name = "scatter"

    @staticmethod
    def forward(vals, idx, width):
        v = vals[0]
        out = np.zeros((v.shape[0], width))
        out[np.arange(v.shape[0]), idx] = v
        return out, None

    @staticmethod
    def vjp(node, g, needs, mode):
        return [pick(g, node.attrs["idx"])]


def _argmax_other(x, y):
    masked = x.copy()
    masked[np.arange(x.shape[0]), y] = -np.inf
    # np.argmax returns the first maximum: ties go to the smallest class index.
    return np.argmax(masked, axis=1)


class MaxOther(Op):
    """max_{j != y_i} x[i, j]; the gradient flows through the argmax only."""

    name = "max_other"

    @staticmethod
    def forward(vals, y):
        x = vals[0]
        idx = _argmax_other(x, y)
        return x[np.arange(x.shape[0]), idx], idx

    @staticmethod
    def vjp(node, g, needs, mode):
        return [scatter(g, node.ctx, node.parents[0].shape[1])]


def _im2col_array(x, k):
    n, c, h, w = x.shape
    windows = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    # (n, c, oh, ow, k, k) -> (n, oh, ow, c, k, k)
    cols = windows.transpose(0, 2, 3, 1, 4, 5)
    return np.ascontiguousarray(cols).reshape(n, h - k + 1, w - k + 1, c * k * k)


def _col2im_array(cols, k, in_shape):
    n, c, h, w = in_shape
    oh, ow = h - k + 1, w - k + 1
    patches = cols.reshape(n, oh, ow, c, k, k)
    out = np.zeros(in_shape)
    for di in range(k):
        for dj in range(k):
            out[:, :, di:di + oh, dj:dj + ow] += patches[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
    return out


class Im2Col(Op):
    """Unfold (n, c, h, w) into valid k x k patches of shape (n, oh, ow, c*k*k)."""

    name = "im2col"

    @staticmethod
    def forward(vals, k):
        x = vals[0]
        if x.ndim != 4 or x.shape[2] < k or x.shape[3] < k:
            raise ValueError(f"cannot take {k}x{k} patches of shape {x.shape}")
        return _im2col_array(x, k), None

    @staticmethod
    def vjp(node, g, needs, mode):
        return [col2im(g, node.attrs["k"], node.parents[0].shape)]


class Col2Im(Op):
    name = "col2im"

    @staticmethod
    def forward(vals, k, in_shape):
        return _col2im_array(vals[0], k, in_shape), None

    @staticmethod
    def vjp(node, g, needs, mode):
        return [im2col(g, node.attrs["k"])]


class Concat(Op):
    """Concatenate 1-D vectors."""

    name = "concat"

    @staticmethod
    def forward(vals):
        return np.concatenate(vals), None

    @staticmethod
    def vjp(node, g, needs, mode):
        out, start = [], 0
        for p, need in zip(node.parents, needs):
            stop = start + p.shape[0]
            out.append(vslice(g, start, stop) if need else None)
            start = stop
        return out


class Slice(Op):
    name = "slice"

    @staticmethod
    def forward(vals, start, stop):
        return vals[0][start:stop], None

    @staticmethod
    def vjp(node, g, needs, mode):
        return [pad(g, node.attrs["start"], node.parents[0].shape[0])]


class Pad(Op):
    """Embed a 1-D vector at ``start`` inside zeros of length ``total``."""

    name = "pad"

    @staticmethod
    def forward(vals, start, total):
        out = np.zeros(total)
        out[start:start + vals[0].shape[0]] = vals[0]
        return out, None

    @staticmethod
    def vjp(node, g, needs, mode):
        start = node.attrs["start"]
        return [vslice(g, start, start + node.parents[0].shape[0])]


# -- functional wrappers ---------------------------------------------------

def transpose(x, axes=None) -> Var:
    return _apply(Transpose, x, axes=None if axes is None else tuple(axes))


def reshape(x, shape) -> Var:
    x = constant(x)
    shape = tuple(int(s) for s in shape)
    if x.shape == shape:
        return x
    return _apply(Reshape, x, shape=shape)


def vsum(x, axis=None, keepdims=False) -> Var:
    return _apply(Sum, x, axis=axis, keepdims=keepdims)


def broadcast_to(x, shape) -> Var:
    x = constant(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return _apply(BroadcastTo, x, shape=shape)


def sum_to(x, shape) -> Var:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return _apply(SumTo, x, shape=shape)


def exp(x) -> Var:
    return _apply(Exp, x)


def log(x) -> Var:
    return _apply(Log, x)


def sigmoid(x) -> Var:
    return _apply(Sigmoid, x)


def softplus(x) -> Var:
    return _apply(Softplus, x)


def vabs(x) -> Var:
    return _apply(Abs, x)


def relu(x) -> Var:
    return _apply(Relu, x)


def maximum(a, b) -> Var:
    return _apply(Maximum, a, b)


def logsumexp(x) -> Var:
    return _apply(LogSumExp, x)


def pick(x, idx) -> Var:
    return _apply(Pick, x, idx=np.asarray(idx, dtype=np.int64))


def scatter(v, idx, width) -> Var:
    return _apply(Scatter, v, idx=np.asarray(idx, dtype=np.int64), width=int(width))


def max_other(x, y) -> Var:
    return _apply(MaxOther, x, y=np.asarray(y, dtype=np.int64))


def im2col(x, k) -> Var:
    return _apply(Im2Col, x, k=int(k))


def col2im(x, k, in_shape) -> Var:
    return _apply(Col2Im, x, k=int(k), in_shape=tuple(in_shape))


def concat(xs: Sequence[Var]) -> Var:
    if len(xs) == 1:
        return constant(xs[0])
    return _apply(Concat, *xs)


def vslice(x, start, stop) -> Var:
    return _apply(Slice, x, start=int(start), stop=int(stop))


def pad(x, start, total) -> Var:
    return _apply(Pad, x, start=int(start), total=int(total))


# -- graph traversal -------------------------------------------------------

def _toposort(root: Var) -> list[Var]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in reversed(node.parents):
            if p.id not in seen:
                stack.append((p, False))
    return order


@dataclass(frozen=True)
class Tape:
    """Topologically ordered snapshot of the graph below ``root``."""

    nodes: tuple[Var, ...]
    root: Var

    @classmethod
    def record(cls, root: Var) -> Tape:
        return cls(tuple(_toposort(root)), root)

    @property
    def inputs(self) -> list[Var]:
        return [n for n in self.nodes if n.op is None and n.is_input]


def tape_eval(tape: Tape, bindings: Mapping[Var, object]) -> np.ndarray:
    """Replay the forward pass of ``tape`` with new values for its inputs.

    Every input leaf must be bound, with the shape it was recorded with.
    Constant leaves keep their recorded values.
    """
    values = {}
    for node in tape.nodes:
        if node.op is None:
            if node in bindings:
                v = np.asarray(bindings[node], dtype=np.float64)
                if v.shape != node.shape:
                    raise ValueError(
                        f"binding for {node!r} has shape {v.shape}, expected {node.shape}")
                values[node.id] = v
            elif node.is_input:
                raise KeyError(f"unbound input leaf {node!r}")
            else:
                values[node.id] = node.value
        else:
            out, _ = node.op.forward([values[p.id] for p in node.parents], **node.attrs)
            values[node.id] = out
    return values[tape.root.id]


def gradient(root: Var, wrt: Sequence[Var], mode: BackwardMode = EXACT) -> list[Var]:
    """Gradients of a scalar ``root`` with respect to each of ``wrt``.

    The returned nodes are part of the graph, so they may be differentiated
    again. Parts of the graph that do not depend on ``wrt`` are skipped.
    """
    if root.value.size != 1:
        raise ValueError(f"gradient needs a scalar root, got shape {root.shape}")
    order = _toposort(root)
    present = {n.id for n in order}
    for w in wrt:
        if w.id not in present:
            raise ValueError(f"{w!r} does not appear in the graph of the root")

    needs = {w.id for w in wrt}
    for node in order:
        if node.id not in needs and any(p.id in needs for p in node.parents):
            needs.add(node.id)

    grads: dict[int, Var] = {root.id: Var(np.ones_like(root.value))}
    for node in reversed(order):
        g = grads.get(node.id)
        if g is None or node.op is None:
            continue
        mask = [p.id in needs for p in node.parents]
        if not any(mask):
            continue
        for p, pg in zip(node.parents, node.op.vjp(node, g, mask, mode)):
            if pg is None:
                continue
            prev = grads.get(p.id)
            grads[p.id] = pg if prev is None else prev + pg
    return [grads.get(w.id, Var(np.zeros_like(w.value))) for w in wrt]


def finite_diff_check(f: Callable[[Var], Var], point, h: float = 1e-5,
                      coords=None) -> float:
    """Compare the gradient of ``f`` with central differences at ``point``.

    Returns ``max |analytic - numeric| / max(1, |analytic|)`` over the checked
    coordinates (all of them unless ``coords`` selects a subset of flat indices).
    """
    if not h > 0:
        raise ValueError("h must be positive")
    point = np.array(point, dtype=np.float64)
    x = variable(point)
    (g,) = gradient(f(x), [x])
    analytic = g.value.reshape(-1)
    idx = range(point.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        step = np.zeros(point.size)
        step[i] = h
        up = float(f(Var(point + step.reshape(point.shape))).value)
        down = float(f(Var(point - step.reshape(point.shape))).value)
        if not (np.isfinite(up) and np.isfinite(down)):
            raise FloatingPointError(f"non-finite value near coordinate {i}")
        numeric = (up - down) / (2 * h)
        worst = max(worst, abs(analytic[i] - numeric) / max(1.0, abs(analytic[i])))
    return worst
