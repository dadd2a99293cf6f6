"""Minimal reverse-mode tensor engine.

Dense numpy arrays wrapped in graph nodes, with exactly the primitives the
models need: matmul, add, elementwise tanh/sigmoid/relu, Hadamard product,
softmax/log-softmax, concat/slice, sum/mean, huber, dropout, embedding
lookup. No general broadcasting beyond matrix-plus-row-vector and scalars,
no operator fusion, CPU only.

Precision is selected globally per run (``set_dtype``); gradient-check
suites run under ``precision("float64")``. Every constructed tensor is
validated to be finite, so a NaN/Inf surfaces at the op that produced it.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np

from .errors import NumericError
from .rng import RngState

__all__ = [
    "Tensor", "tensor", "constant", "zeros", "set_dtype", "get_dtype",
    "precision", "add_n", "matmul", "concat", "narrow", "pick", "reshape",
    "transpose", "tanh", "sigmoid", "relu", "softmax", "log_softmax", "huber",
    "dropout", "embedding", "stack_rows", "total", "sum_all", "mean",
]

_DTYPE = np.float32
_VALID = {"float32": np.float32, "float64": np.float64}


def set_dtype(name: str) -> None:
    """Select the global float precision ("float32" or "float64")."""
    global _DTYPE
    if name not in _VALID:
        raise ValueError(f"unsupported precision {name!r}; use 'float32' or 'float64'")
    _DTYPE = _VALID[name]


def get_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch the global precision (used by gradient checks)."""
    global _DTYPE
    old = _DTYPE
    set_dtype(name)
    try:
        yield
    finally:
        _DTYPE = old


def _as_array(data) -> np.ndarray:
    if type(data) is np.ndarray and data.dtype == _DTYPE:
        return data
    return np.asarray(data, dtype=_DTYPE)


class Tensor:
    """A node in the computation graph.

    Leaves hold data (parameters or constants); interior nodes remember the
    op that produced them and a closure computing parent gradients. Row-major
    numpy arrays are the storage; ``grad`` is populated by ``backward`` on
    leaves with ``requires_grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "name", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = (), bwd=None, name: str | None = None):
        arr = _as_array(data)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite values produced by op '{op}'"
                               + (f" (tensor {name!r})" if name else ""))
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self.name = name
        self._parents = parents
        self._bwd = bwd

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # ---- graph construction sugar ----

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        if isinstance(key, slice):
            start, stop, step = key.indices(self.data.shape[0])
            if step != 1:
                raise ValueError("only contiguous slices are supported")
            return narrow(self, 0, start, stop - start)
        raise TypeError("Tensor indexing supports contiguous slices only; use pick() for scalars")

    # ---- reverse mode ----

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar node.

        Accumulates into ``.grad`` of every reachable leaf with
        ``requires_grad``; interior gradients are transient.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar loss, got shape {self.data.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient at op '{node.op}'"
                                   + (f" (tensor {node.name!r})" if node.name else ""))
            if node._bwd is None:
                if node.requires_grad:
                    if node.grad is None:
                        node.grad = np.zeros_like(node.data)
                    node.grad += g
                continue
            for parent, pg in zip(node._parents, node._bwd(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def constant(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=False, name=name)


def zeros(shape, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DTYPE), requires_grad=requires_grad, name=name)


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DTYPE))


def _node(data, op, parents, bwd) -> Tensor:
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, op=op, parents=tuple(parents), bwd=bwd)


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient down to a broadcast parent's shape."""
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    if len(shape) == 1 and g.ndim == 2 and g.shape[1] == shape[0]:
        return g.sum(axis=0)
    raise AssertionError(f"cannot reduce gradient {g.shape} to {shape}")


def _check_ew_shapes(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.data.shape, b.data.shape
    if sa == sb or sa == () or sb == ():
        return
    if len(sa) == 2 and sb == (sa[1],):
        return
    if len(sb) == 2 and sa == (sb[1],):
        return
    raise ValueError(f"{op}: incompatible shapes {sa} and {sb}")


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_ew_shapes(a, b, "add")
    out = a.data + b.data

    def bwd(g):
        return _reduce_to(g, a.data.shape), _reduce_to(g, b.data.shape)

    return _node(out, "add", (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_ew_shapes(a, b, "sub")
    out = a.data - b.data

    def bwd(g):
        return _reduce_to(g, a.data.shape), _reduce_to(-g, b.data.shape)

    return _node(out, "sub", (a, b), bwd)


def neg(a) -> Tensor:
    a = _wrap(a)
    return _node(-a.data, "neg", (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    """Hadamard product (with scalar and row-vector broadcast)."""
    a, b = _wrap(a), _wrap(b)
    _check_ew_shapes(a, b, "mul")
    out = a.data * b.data

    def bwd(g):
        return _reduce_to(g * b.data, a.data.shape), _reduce_to(g * a.data, b.data.shape)

    return _node(out, "mul", (a, b), bwd)


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    """Fixed-order sum of same-shape tensors (deterministic reduction)."""
    if not tensors:
        raise ValueError("add_n of an empty sequence")
    ts = [_wrap(t) for t in tensors]
    out = ts[0].data.copy()
    for t in ts[1:]:
        out += t.data

    def bwd(g):
        return tuple(g for _ in ts)

    return _node(out, "add_n", tuple(ts), bwd)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    da, db = a.data, b.data
    if da.ndim == 2 and db.ndim == 2:
        def bwd(g):
            return g @ db.T, da.T @ g
    elif da.ndim == 2 and db.ndim == 1:
        def bwd(g):
            return np.outer(g, db), da.T @ g
    elif da.ndim == 1 and db.ndim == 2:
        def bwd(g):
            return g @ db.T, np.outer(da, g)
    else:
        raise ValueError(f"matmul: unsupported ranks {da.shape} @ {db.shape}")
    return _node(da @ db, "matmul", (a, b), bwd)


def tanh(a) -> Tensor:
    a = _wrap(a)
    y = np.tanh(a.data)
    return _node(y, "tanh", (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    y = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return _node(y, "sigmoid", (a,), lambda g: (g * y * (1.0 - y),))


def relu(a) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _node(y, "softmax", (a,), bwd)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    sm = np.exp(y)

    def bwd(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _node(y, "log_softmax", (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in ts]
    out = np.concatenate([t.data for t in ts], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        sl = [slice(None)] * g.ndim
        pieces = []
        for i in range(len(ts)):
            sl[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(g[tuple(sl)])
        return tuple(pieces)

    return _node(out, "concat", tuple(ts), bwd)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    a = _wrap(a)
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = a.data[sl].copy()

    def bwd(g):
        full = np.zeros_like(a.data)
        full[sl] = g
        return (full,)

    return _node(out, "narrow", (a,), bwd)


def pick(a, index: int) -> Tensor:
    """Scalar element of a 1-D tensor."""
    a = _wrap(a)
    if a.data.ndim != 1:
        raise ValueError("pick expects a 1-D tensor")

    def bwd(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _node(np.asarray(a.data[index]), "pick", (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    out = a.data.reshape(shape)
    return _node(out, "reshape", (a,), lambda g: (g.reshape(a.data.shape),))


def transpose(a) -> Tensor:
    a = _wrap(a)
    if a.data.ndim != 2:
        raise ValueError("transpose expects a 2-D tensor")
    return _node(a.data.T.copy(), "transpose", (a,), lambda g: (g.T,))


def stack_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Stack 1-D tensors into a matrix, one per row."""
    return concat([reshape(t, (1, t.data.shape[0])) for t in tensors], axis=0)


def total(a) -> Tensor:
    a = _wrap(a)

    def bwd(g):
        return (np.broadcast_to(g, a.data.shape),)

    return _node(np.asarray(a.data.sum()), "sum", (a,), bwd)


def mean(a) -> Tensor:
    a = _wrap(a)
    n = a.data.size

    def bwd(g):
        return (np.broadcast_to(g / n, a.data.shape),)

    return _node(np.asarray(a.data.mean()), "mean", (a,), bwd)


# keep the conventional names available without shadowing builtins at import sites
sum_all = total


def huber(pred, target, delta: float) -> Tensor:
    """Elementwise Huber: quadratic within delta of the target, linear beyond."""
    if delta <= 0:
        raise ValueError("huber delta must be positive")
    p, t = _wrap(pred), _wrap(target)
    if p.data.shape != t.data.shape:
        raise ValueError(f"huber: shape mismatch {p.data.shape} vs {t.data.shape}")
    d = p.data - t.data
    ad = np.abs(d)
    out = np.where(ad <= delta, 0.5 * d * d, delta * ad - 0.5 * delta * delta)

    def bwd(g):
        dd = g * np.clip(d, -delta, delta)
        return dd, -dd

    return _node(out, "huber", (p, t), bwd)


def dropout(x, p: float, training: bool, rng: RngState | None = None) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    x = _wrap(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an RngState")
    keep = (rng.uniform(x.data.shape) >= p).astype(x.data.dtype)
    scale = keep / (1.0 - p)
    return _node(x.data * scale, "dropout", (x,), lambda g: (g * scale,))


def detach(a) -> Tensor:
    """Same values, cut out of the graph."""
    a = _wrap(a)
    return Tensor(a.data, op="detach")


def embedding(table, indices) -> Tensor:
    """Rows of ``table`` selected by integer ``indices`` (gradient scatter-adds)."""
    table = _wrap(table)
    idx = np.asarray(indices, dtype=np.int64)
    out = table.data[idx]

    def bwd(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return _node(out, "embedding", (table,), bwd)
