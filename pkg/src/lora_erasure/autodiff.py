"""Dense float64 matrices and a small reverse-mode tape.

A matrix is a 2-D ``float64`` numpy array. Every primitive below accepts plain
arrays or :class:`Var` nodes. When no operand is a ``Var`` the primitive just
computes the value and returns an array, so the same model code serves both
inference and training. When some operand is a ``Var``, the result is a
``Var`` recorded on that operand's :class:`Tape`.
"""

from __future__ import annotations

import struct
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_HEADER = struct.Struct("<QQ")


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Build a validated 2-D float64 matrix.

    ``data`` may be nested lists, an array, or a flat row-major sequence when
    ``rows`` and ``cols`` are given.
    """
    m = np.array(data, dtype=np.float64)
    if rows is not None or cols is not None:
        if rows is None or cols is None:
            raise ContractError("rows and cols must be given together")
        if m.size != rows * cols:
            raise DimensionError(f"data length {m.size} != {rows}x{cols}")
        m = m.reshape(rows, cols)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise DimensionError(f"expected a non-empty 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ContractError("matrix entries must be finite")
    return m


def matrix_to_bytes(m: np.ndarray) -> bytes:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"expected 2-D matrix, got shape {m.shape}")
    return _HEADER.pack(*m.shape) + np.ascontiguousarray(m).astype("<f8").tobytes()


def matrix_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one matrix starting at ``offset``; returns it and the next offset."""
    if len(buf) - offset < _HEADER.size:
        raise ContractError("truncated matrix header")
    rows, cols = _HEADER.unpack_from(buf, offset)
    offset += _HEADER.size
    nbytes = rows * cols * 8
    if len(buf) - offset < nbytes:
        raise ContractError(f"truncated matrix body: need {nbytes} bytes")
    data = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=offset)
    return data.astype(np.float64).reshape(rows, cols), offset + nbytes


class Var:
    """A taped matrix value."""

    __slots__ = ("value", "tape", "index")

    def __init__(self, value: np.ndarray, tape: "Tape", index: int):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def T(self):
        return transpose(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Var(#{self.index}, shape={self.shape})"


class _Node:
    __slots__ = ("op", "parents", "forward", "backward")

    def __init__(self, op, parents, forward, backward):
        self.op = op
        self.parents = parents
        self.forward = forward
        self.backward = backward


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended in evaluation order, which is a topological order of
    the computation graph; ``gradient`` walks it backwards once.
    """

    def __init__(self):
        self.values: list[np.ndarray] = []
        self.nodes: list[_Node | None] = []

    def __len__(self):
        return len(self.nodes)

    def watch(self, value) -> Var:
        """Register a leaf (a trainable parameter) and return its node."""
        v = np.array(value, dtype=np.float64)
        if v.ndim != 2:
            raise DimensionError(f"expected 2-D matrix, got shape {v.shape}")
        return self._push(v, None)

    def _push(self, value: np.ndarray, node: _Node | None) -> Var:
        self.values.append(value)
        self.nodes.append(node)
        return Var(value, self, len(self.nodes) - 1)

    def ops(self) -> list[str]:
        return ["leaf" if n is None else n.op for n in self.nodes]

    def replay(self) -> list[np.ndarray]:
        """Recompute every recorded node from its parents' recorded values."""
        out = []
        for value, node in zip(self.values, self.nodes):
            if node is None:
                out.append(value)
            else:
                args = [out[p] if isinstance(p, int) else p for p in node.parents]
                out.append(node.forward(*args))
        return out


def _val(x):
    return x.value if isinstance(x, Var) else x


def _apply(op: str, forward: Callable, backward: Callable, *args):
    """Evaluate ``forward`` and record it when any argument is taped.

    ``backward(g, out, *arg_values)`` returns one gradient per argument.
    """
    vals = [_val(a) for a in args]
    out = forward(*vals)
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ContractError("operands recorded on different tapes")
    if tape is None:
        return out
    # parents: tape index for taped operands, the constant value otherwise
    parents = [a.index if isinstance(a, Var) else v for a, v in zip(args, vals)]
    return tape._push(out, _Node(op, parents, forward, backward))


def _check_same(a, b, what):
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes {a.shape} and {b.shape} differ")


def _scalar(x: float) -> np.ndarray:
    return np.array([[x]], dtype=np.float64)


def matmul(a, b):
    av, bv = _val(a), _val(b)
    if av.shape[1] != bv.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {av.shape} by {bv.shape}")
    return _apply(
        "matmul",
        lambda x, y: x @ y,
        lambda g, out, x, y: (g @ y.T, x.T @ g),
        a,
        b,
    )


def add(a, b):
    _check_same(_val(a), _val(b), "add")
    return _apply("add", np.add, lambda g, out, x, y: (g, g), a, b)


def sub(a, b):
    _check_same(_val(a), _val(b), "sub")
    return _apply("sub", np.subtract, lambda g, out, x, y: (g, -g), a, b)


def mul(a, b):
    """Elementwise product."""
    _check_same(_val(a), _val(b), "mul")
    return _apply("mul", np.multiply, lambda g, out, x, y: (g * y, g * x), a, b)


def divide(a, b):
    """Elementwise quotient."""
    _check_same(_val(a), _val(b), "divide")
    return _apply(
        "divide",
        np.divide,
        lambda g, out, x, y: (g / y, -g * x / (y * y)),
        a,
        b,
    )


def scale(a, s: float):
    s = float(s)
    return _apply("scale", lambda x: x * s, lambda g, out, x: (g * s,), a)


def transpose(a):
    return _apply("transpose", lambda x: x.T.copy(), lambda g, out, x: (g.T,), a)


def tanh(a):
    return _apply("tanh", np.tanh, lambda g, out, x: (g * (1.0 - out * out),), a)


def _softmax_cols(x):
    e = np.exp(x - x.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def softmax_columns(a):
    """Softmax applied independently to every column."""
    return _apply(
        "softmax_columns",
        _softmax_cols,
        lambda g, out, x: (out * (g - (g * out).sum(axis=0, keepdims=True)),),
        a,
    )


def frobenius_inner(a, b):
    """Sum of elementwise products, as a 1x1 matrix."""
    _check_same(_val(a), _val(b), "frobenius_inner")
    return _apply(
        "frobenius_inner",
        lambda x, y: _scalar(np.sum(x * y)),
        lambda g, out, x, y: (g[0, 0] * y, g[0, 0] * x),
        a,
        b,
    )


def frobenius_norm(a):
    def backward(g, out, x):
        n = out[0, 0]
        if n == 0.0:
            return (np.zeros_like(x),)
        return (g[0, 0] * x / n,)

    return _apply(
        "frobenius_norm",
        lambda x: _scalar(np.sqrt(np.sum(x * x))),
        backward,
        a,
    )


def mse(a, b):
    """Mean of squared elementwise differences, as a 1x1 matrix."""
    _check_same(_val(a), _val(b), "mse")

    def backward(g, out, x, y):
        d = g[0, 0] * 2.0 * (x - y) / x.size
        return (d, -d)

    return _apply("mse", lambda x, y: _scalar(np.mean((x - y) ** 2)), backward, a, b)


def vstack(parts: Sequence):
    parts = list(parts)
    if len({_val(p).shape[1] for p in parts}) != 1:
        raise DimensionError(f"vstack: column counts differ {[_val(p).shape for p in parts]}")
    rows = np.cumsum([_val(p).shape[0] for p in parts])[:-1]

    def forward(*xs):
        return np.vstack(xs)

    def backward(g, out, *xs):
        return tuple(np.split(g, rows, axis=0))

    return _apply("vstack", forward, backward, *parts)


def hstack(parts: Sequence):
    parts = list(parts)
    if len({_val(p).shape[0] for p in parts}) != 1:
        raise DimensionError(f"hstack: row counts differ {[_val(p).shape for p in parts]}")
    cols = np.cumsum([_val(p).shape[1] for p in parts])[:-1]

    def forward(*xs):
        return np.hstack(xs)

    def backward(g, out, *xs):
        return tuple(np.split(g, cols, axis=1))

    return _apply("hstack", forward, backward, *parts)


def total(parts: Sequence):
    """Sum of same-shaped matrices."""
    parts = list(parts)
    if not parts:
        raise ContractError("total of an empty list")
    for p in parts[1:]:
        _check_same(_val(parts[0]), _val(p), "total")

    def forward(*xs):
        out = xs[0].copy()
        for x in xs[1:]:
            out = out + x
        return out

    return _apply("total", forward, lambda g, out, *xs: (g,) * len(xs), *parts)


def mean(parts: Sequence):
    parts = list(parts)
    return scale(total(parts), 1.0 / len(parts))


def value(x) -> np.ndarray:
    return _val(x)


def gradient(loss, wrt: Sequence) -> list[np.ndarray]:
    """Reverse pass from a scalar ``loss`` to each node in ``wrt``.

    Parameters that ``loss`` does not depend on (including untaped ones) get
    zero gradients.
    """
    lv = _val(loss)
    if lv.shape != (1, 1):
        raise ContractError(f"gradient needs a 1x1 loss, got shape {lv.shape}")
    if not isinstance(loss, Var):
        return [np.zeros_like(_val(w)) for w in wrt]
    tape = loss.tape
    grads: dict[int, np.ndarray] = {loss.index: np.ones((1, 1))}
    for i in range(loss.index, -1, -1):
        g = grads.get(i)
        node = tape.nodes[i]
        if g is None or node is None:
            continue
        args = [tape.values[p] if isinstance(p, int) else p for p in node.parents]
        pgrads = node.backward(g, tape.values[i], *args)
        for p, pg in zip(node.parents, pgrads):
            if isinstance(p, int):
                if p in grads:
                    grads[p] = grads[p] + pg
                else:
                    grads[p] = pg
        if i != loss.index:
            del grads[i]
    out = []
    for w in wrt:
        if isinstance(w, Var) and w.tape is tape and w.index in grads:
            out.append(np.array(grads[w.index], dtype=np.float64))
        else:
            out.append(np.zeros_like(_val(w)))
    return out
