"""Dense float64 tensors with a reverse-mode differentiation tape.

A :class:`Tape` is an append-only list of nodes. Every primitive below
records a node when at least one of its inputs is tracked on a tape, and
otherwise just computes the value. Because a node can only refer to nodes
that already exist, ids are a topological order, and :func:`backward`
walks them in strictly decreasing order.

Only first-order gradients are supported. Code that needs a gradient
inside the differentiated computation writes it out analytically with
these same primitives.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "NumericError",
    "Tape",
    "Tensor",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "transpose",
    "relu",
    "sigmoid",
    "square",
    "sum",
    "mean",
    "reshape",
    "take_rows",
    "linear",
    "softmax",
    "mse_loss",
    "softmax_cross_entropy",
    "backward",
    "grad",
]


class NumericError(FloatingPointError):
    """A primitive produced NaN or Inf."""


class Node:
    __slots__ = ("op", "inputs", "vjp", "shape")

    def __init__(self, op: str, inputs: tuple[int, ...], vjp, shape):
        self.op = op
        self.inputs = inputs
        self.vjp = vjp
        self.shape = shape


class Tape:
    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, data, name: str = "leaf") -> "Tensor":
        arr = _to_array(data)
        _check(arr, name)
        node_id = len(self.nodes)
        self.nodes.append(Node("leaf", (), None, arr.shape))
        return Tensor(arr, self, node_id)

    def op_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for node in self.nodes:
            counts[node.op] = counts.get(node.op, 0) + 1
        return counts


class Tensor:
    """A float64 array, optionally attached to a tape node."""

    __slots__ = ("data", "tape", "node_id")
    __array_priority__ = 100

    def __init__(self, data, tape: Tape | None = None, node_id: int | None = None):
        self.data = _to_array(data)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def tracked(self) -> bool:
        return self.node_id is not None

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f", node={self.node_id}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{tag})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, rows):
        return take_rows(self, rows)


def _to_array(data) -> np.ndarray:
    if isinstance(data, Tensor):
        return data.data
    return np.asarray(data, dtype=np.float64)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"{op} produced non-finite values")


def _record(op: str, inputs: Sequence[Tensor], out: np.ndarray, vjp) -> Tensor:
    _check(out, op)
    tape = None
    for t in inputs:
        if t.node_id is not None:
            if tape is None:
                tape = t.tape
            elif t.tape is not tape:
                raise ValueError(f"{op}: inputs live on different tapes")
    if tape is None:
        return Tensor(out)
    node_id = len(tape.nodes)
    tape.nodes.append(
        Node(op, tuple(-1 if t.node_id is None else t.node_id for t in inputs), vjp, out.shape)
    )
    return Tensor(out, tape, node_id)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise -----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(
        "add", (a, b), a.data + b.data, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(
        "sub", (a, b), a.data - b.data, lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb))
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record("mul", (a, b), ad * bd, vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", (a,), -a.data, lambda g: (-g,))


def relu(a) -> Tensor:
    """max(0, x); the derivative at exactly 0 is taken to be 0."""
    a = as_tensor(a)
    mask = a.data > 0
    return _record("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _record("sigmoid", (a,), s, lambda g: (g * s * (1.0 - s),))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _record("square", (a,), ad * ad, lambda g: (2.0 * g * ad,))


# shape / reductions ----------------------------------------------------------


def sum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", (a,), np.sum(a.data, axis=axis, keepdims=keepdims), vjp)


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    count = a.data.size if axis is None else shape[axis]

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _record("mean", (a,), np.mean(a.data, axis=axis, keepdims=keepdims), vjp)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _record("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(old),))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _record("transpose", (a,), a.data.T, lambda g: (g.T,))


def take_rows(a, rows) -> Tensor:
    """Select ``a[rows]`` along the first axis (slice, int array, or int)."""
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        if isinstance(rows, slice):
            out[rows] = g
        else:
            np.add.at(out, rows, g)
        return (out,)

    return _record("take_rows", (a,), a.data[rows], vjp)


# linear algebra --------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _record("matmul", (a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def linear(x, w, c=None) -> Tensor:
    """Batched affine map ``x @ w.T + c`` for x of shape (batch, in), w of shape (out, in)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"linear shape mismatch: x {x.shape}, w {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if c is None:
        return _record("linear", (x, w), out, lambda g: (g @ wd, g.T @ xd))
    c = as_tensor(c)
    if c.shape != (w.shape[0],):
        raise ValueError(f"linear bias shape {c.shape} does not match {w.shape[0]} outputs")
    return _record(
        "linear", (x, w, c), out + c.data, lambda g: (g @ wd, g.T @ xd, g.sum(axis=0))
    )


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _record("softmax", (a,), s, vjp)


# losses ----------------------------------------------------------------------


def mse_loss(pred, target) -> Tensor:
    """Mean of squared differences over every element."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    return _record(
        "mse_loss",
        (pred, target),
        np.asarray(np.mean(diff * diff)),
        lambda g: (2.0 * g * diff / n, -2.0 * g * diff / n),
    )


def softmax_cross_entropy(logits, labels) -> Tensor:
    """-log softmax(logits)[label], averaged over rows.

    ``logits`` may be a single vector with an integer label or a (batch, n)
    matrix with one label per row.
    """
    logits = as_tensor(logits)
    ld = logits.data
    single = ld.ndim == 1
    ld2 = ld[None, :] if single else ld
    idx = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n_rows, n_cls = ld2.shape
    if idx.shape != (n_rows,):
        raise ValueError(f"expected {n_rows} labels, got shape {idx.shape}")
    if (idx < 0).any() or (idx >= n_cls).any():
        raise IndexError(f"class index out of range for {n_cls} classes")
    z = ld2 - ld2.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n_rows)
    loss = np.mean(log_norm - z[rows, idx])

    def vjp(g):
        p = np.exp(z - log_norm[:, None])
        p[rows, idx] -= 1.0
        p *= g / n_rows
        return (p[0] if single else p,)

    return _record("softmax_cross_entropy", (logits,), np.asarray(loss), vjp)


# reverse pass ----------------------------------------------------------------


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Gradients of a tracked scalar with respect to every node that feeds it.

    The tape is only read, so it can be differentiated again.
    """
    if not isinstance(loss, Tensor) or not loss.tracked:
        raise ValueError("backward needs a tracked loss tensor")
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    nodes = loss.tape.nodes
    grads: list[np.ndarray | None] = [None] * (loss.node_id + 1)
    grads[loss.node_id] = np.ones(loss.shape)
    for node_id in range(loss.node_id, -1, -1):
        g = grads[node_id]
        if g is None:
            continue
        node = nodes[node_id]
        if node.vjp is None:
            continue
        for parent, pg in zip(node.inputs, node.vjp(g)):
            if parent < 0:
                continue
            prev = grads[parent]
            grads[parent] = pg if prev is None else prev + pg
    return {i: g for i, g in enumerate(grads) if g is not None}


def grad(loss: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` for each tensor in ``wrt``; zeros where unreachable."""
    table = backward(loss)
    out = []
    for t in wrt:
        if not t.tracked:
            raise ValueError("grad requested for an untracked tensor")
        out.append(table.get(t.node_id, np.zeros(t.shape)))
    return out

