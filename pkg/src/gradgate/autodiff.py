"""A small reverse-mode autodiff tape over dense float64 matrices.

Values are always 2-D. Binary elementwise ops broadcast only a ``(1, m)`` row
vector, a ``(v, 1)`` column vector or a ``(1, 1)`` scalar against a full
matrix. Passing ``tape=None`` (or using only constants) runs the same code
without recording anything, which is how long forward-only propagations are
done.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp


class NonDifferentiableWarning(RuntimeWarning):
    pass


@dataclass(eq=False)
class Parameter:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.array(self.value, dtype=np.float64, ndmin=2)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)


class _Node:
    __slots__ = ("data", "parents", "backward", "param")

    def __init__(self, data, parents, backward, param=None):
        self.data = data
        self.parents = parents
        self.backward = backward
        self.param = param


class Tape:
    """Append-only record of operations; ``backward`` walks it in reverse."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self):
        return len(self.nodes)

    def _push(self, node: _Node) -> "Value":
        self.nodes.append(node)
        return Value(node.data, self, len(self.nodes) - 1)

    def watch(self, param: Parameter) -> "Value":
        return self._push(_Node(param.value, (), None, param))

    def backward(self, loss: "Value") -> None:
        if loss.tape is not self:
            raise ValueError("loss was not recorded on this tape")
        if loss.shape != (1, 1):
            raise ValueError(f"loss must be 1x1, got {loss.shape}")
        grads: list = [None] * (loss.id + 1)
        grads[loss.id] = np.ones((1, 1))
        for nid in range(loss.id, -1, -1):
            g = grads[nid]
            if g is None:
                continue
            node = self.nodes[nid]
            if node.param is not None:
                node.param.grad += g
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if parent is None or pg is None:
                    continue
                if grads[parent] is None:
                    grads[parent] = pg
                else:
                    grads[parent] = grads[parent] + pg


class Value:
    __slots__ = ("data", "tape", "id")

    def __init__(self, data, tape: Tape | None = None, id: int = -1):
        self.data = data
        self.tape = tape
        self.id = id

    @property
    def shape(self):
        return self.data.shape

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Value(shape={self.shape}, id={self.id})"


def const(x) -> Value:
    return Value(np.array(x, dtype=np.float64, ndmin=2))


def param(tape: Tape | None, p: Parameter) -> Value:
    return tape.watch(p) if tape is not None else Value(p.value)


def _lift(x) -> Value:
    return x if isinstance(x, Value) else const(x)


def _record(data: np.ndarray, parents: Sequence[Value], backward: Callable) -> Value:
    tape = None
    for p in parents:
        if p.tape is not None:
            tape = p.tape
            break
    if tape is None:
        return Value(data)
    ids = tuple(p.id if p.tape is tape else None for p in parents)
    return tape._push(_Node(data, ids, backward))


def _check_broadcast(a, b):
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    for big, small in ((sa, sb), (sb, sa)):
        if small == (1, 1) or small == (1, big[1]) or small == (big[0], 1):
            return
    raise ValueError(f"incompatible shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1:
        g = g.sum(axis=1, keepdims=True)
    return g


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Value:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Value:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Value:
    """Hadamard product."""
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b)
    ad, bd = a.data, b.data
    return _record(
        ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))
    )


def scale(a: Value, c: float) -> Value:
    return _record(a.data * c, (a,), lambda g: (g * c,))


def one_minus(a: Value) -> Value:
    return _record(1.0 - a.data, (a,), lambda g: (-g,))


def relu(a: Value) -> Value:
    # np.maximum keeps NaN visible to downstream finiteness checks
    pos = a.data > 0
    return _record(np.maximum(a.data, 0.0), (a,), lambda g: (g * pos,))


def leaky_relu(a: Value, slope: float = 0.2) -> Value:
    factor = np.where(a.data > 0, 1.0, slope)
    return _record(a.data * factor, (a,), lambda g: (g * factor,))


def tanh(a: Value) -> Value:
    y = np.tanh(a.data)
    return _record(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Value) -> Value:
    # split by sign to avoid overflow in exp
    x = a.data
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record(y, (a,), lambda g: (g * y * (1.0 - y),))


def abs_pow(a: Value, p: float) -> Value:
    """``|x|**p`` with derivative ``p |x|^(p-1) sign(x)``, taken as 0 at ``x = 0``."""
    if p <= 0:
        raise ValueError("abs_pow needs p > 0")
    x = a.data
    ax = np.abs(x)
    y = ax ** p
    zero = ax == 0
    if p < 1 and np.any(zero):
        warnings.warn(
            f"abs_pow with p={p} evaluated at 0; derivative set to 0", NonDifferentiableWarning, stacklevel=2
        )

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = p * np.where(zero, 0.0, ax ** (p - 1.0)) * np.sign(x)
        return (g * d,)

    return _record(y, (a,), backward)


def exp(a: Value) -> Value:
    y = np.exp(a.data)
    return _record(y, (a,), lambda g: (g * y,))


# -- linear algebra / structure ---------------------------------------------

def matmul(a, b) -> Value:
    a, b = _lift(a), _lift(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _record(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def spmm(S: sp.csr_matrix, x: Value) -> Value:
    """Constant sparse matrix times a value."""
    if S.shape[1] != x.shape[0]:
        raise ValueError(f"spmm shape mismatch {S.shape} @ {x.shape}")
    ST = S.T.tocsr()
    return _record(np.asarray(S @ x.data), (x,), lambda g: (np.asarray(ST @ g),))


def concat_cols(values: Sequence[Value]) -> Value:
    values = [_lift(v) for v in values]
    rows = {v.shape[0] for v in values}
    if len(rows) != 1:
        raise ValueError("concat_cols needs equal row counts")
    splits = np.cumsum([v.shape[1] for v in values])[:-1]
    return _record(
        np.concatenate([v.data for v in values], axis=1),
        tuple(values),
        lambda g: tuple(np.split(g, splits, axis=1)),
    )


def row_gather(a: Value, index: np.ndarray) -> Value:
    """``a[index]``; gradients scatter-add back."""
    index = np.asarray(index, dtype=np.int64)
    n = a.shape[0]

    def backward(g):
        out = np.zeros((n, g.shape[1]))
        np.add.at(out, index, g)
        return (out,)

    return _record(a.data[index], (a,), backward)


def take(a: Value, rows: np.ndarray, cols: np.ndarray) -> Value:
    """Column vector of ``a[rows[k], cols[k]]``."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, (rows, cols), g[:, 0])
        return (out,)

    return _record(a.data[rows, cols][:, None], (a,), backward)


def segment_reduce(a: Value, offsets: np.ndarray, mode: str = "sum") -> Value:
    """Reduce consecutive row segments ``a[offsets[i]:offsets[i+1]]``.

    Empty segments give 0. For ``max`` the gradient goes to the first row
    (lowest position) attaining the maximum.
    """
    offsets = np.asarray(offsets, dtype=np.int64)
    counts = np.diff(offsets)
    nseg = counts.size
    nonempty = counts > 0
    starts = offsets[:-1][nonempty]
    x = a.data
    seg_of_row = np.repeat(np.arange(nseg), counts)
    out = np.zeros((nseg, x.shape[1]))
    if mode in ("sum", "mean"):
        if starts.size:
            out[nonempty] = np.add.reduceat(x, starts, axis=0)
        if mode == "mean":
            denom = np.maximum(counts, 1)[:, None].astype(np.float64)
            out = out / denom

            def backward(g):
                return ((g / denom)[seg_of_row],)
        else:

            def backward(g):
                return (g[seg_of_row],)
    elif mode == "max":
        if starts.size:
            out[nonempty] = np.maximum.reduceat(x, starts, axis=0)
        hit = x == out[seg_of_row]
        # keep only the first hit per (segment, column)
        csum = np.cumsum(hit, axis=0)
        base = np.zeros((nseg, x.shape[1]), dtype=np.int64)
        seg_start = offsets[:-1]
        has_prev = seg_start > 0
        base[has_prev] = csum[seg_start[has_prev] - 1]
        cum = csum - base[seg_of_row]
        winner = hit & (cum == 1)

        def backward(g):
            return (g[seg_of_row] * winner,)
    else:
        raise ValueError(f"unknown reduction {mode!r}")
    return _record(out, (a,), backward)


def segment_softmax(a: Value, offsets: np.ndarray) -> Value:
    """Softmax of each column within each row segment."""
    offsets = np.asarray(offsets, dtype=np.int64)
    counts = np.diff(offsets)
    if np.any(counts == 0):
        raise ValueError("segment_softmax needs nonempty segments")
    seg = np.repeat(np.arange(counts.size), counts)
    x = a.data
    mx = np.maximum.reduceat(x, offsets[:-1], axis=0)
    e = np.exp(x - mx[seg])
    s = np.add.reduceat(e, offsets[:-1], axis=0)
    y = e / s[seg]

    def backward(g):
        dot = np.add.reduceat(g * y, offsets[:-1], axis=0)
        return (y * (g - dot[seg]),)

    return _record(y, (a,), backward)


def log_softmax(a: Value) -> Value:
    """Row-wise log-softmax."""
    x = a.data
    z = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    y = z - lse
    sm = np.exp(y)
    return _record(y, (a,), lambda g: (g - sm * g.sum(axis=1, keepdims=True),))


def reduce(a: Value, mode: str = "sum") -> Value:
    shape = a.shape
    if mode == "sum":
        return _record(np.array([[a.data.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),))
    if mode == "mean":
        n = a.data.size
        return _record(np.array([[a.data.mean()]]), (a,), lambda g: (np.full(shape, g[0, 0] / n),))
    raise ValueError(f"unknown reduction {mode!r}")


def dropout(a: Value, rate: float, rng: np.random.Generator | None, train: bool) -> Value:
    if not train or rate <= 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _record(a.data * keep, (a,), lambda g: (g * keep,))


def backward(loss: Value) -> None:
    if loss.tape is None:
        raise ValueError("loss is not attached to a tape")
    loss.tape.backward(loss)


# -- checkpoints --------------------------------------------------------------

def save_parameters(params: Sequence[Parameter], path) -> None:
    """JSON header (u64 little-endian length prefix), then float64 LE payloads."""
    entries, offset = [], 0
    for p in params:
        nbytes = p.value.size * 8
        entries.append({"name": p.name, "shape": list(p.value.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = json.dumps({"dtype": "<f8", "tensors": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for p in params:
            fh.write(np.ascontiguousarray(p.value, dtype="<f8").tobytes())


def load_parameters(path) -> list[Parameter]:
    with open(path, "rb") as fh:
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        payload = fh.read()
    out = []
    for t in header["tensors"]:
        raw = payload[t["offset"]:t["offset"] + t["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f8").reshape(t["shape"]).astype(np.float64)
        out.append(Parameter(t["name"], arr))
    return out
