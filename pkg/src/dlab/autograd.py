"""Minimal reverse-mode autodiff over numpy arrays.

Every differentiable operation appends a node to the active :class:`Tape`.
Nodes are recorded in execution order, which is already a topological order,
so the backward sweep simply walks the tape in reverse.

Arrays are float32 by default.  The finite-difference oracle evaluates in
float64 when given float64 leaves; ops preserve the dtype of their inputs.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterator

import numpy as np

MAX_RANK = 3

_active: list["Tape"] = []


class ContractError(ValueError):
    """Raised when an operation's precondition is violated."""


class Tensor:
    __slots__ = ("data", "parents", "backward_fn", "forward_fn", "op", "index", "name")

    def __init__(self, data, *, name: str | None = None):
        data = np.asarray(data)
        if data.dtype.kind != "f":
            data = data.astype(np.float32)
        if data.ndim > MAX_RANK:
            raise ContractError(f"rank {data.ndim} exceeds {MAX_RANK}")
        self.data = data
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn = None
        self.forward_fn = None
        self.op = "leaf" if name is not None else "const"
        self.index = -1
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def tracked(self) -> bool:
        return self.index >= 0

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)


class Tape:
    """Records primitive operations for one backward sweep.

    Use as a context manager; operations performed inside it on watched
    leaves (or on tensors derived from them) are recorded.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.leaves: dict[str, Tensor] = {}

    def __enter__(self) -> "Tape":
        _active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.remove(self)

    def watch(self, name: str, array) -> Tensor:
        if name in self.leaves:
            raise ContractError(f"leaf {name!r} registered twice")
        t = Tensor(array, name=name)
        t.index = len(self.nodes)
        self.nodes.append(t)
        self.leaves[name] = t
        return t

    def _record(self, out: Tensor) -> None:
        out.index = len(self.nodes)
        self.nodes.append(out)

    def replay(self) -> bool:
        """Recompute every node from its parents; True if all outputs match bit-exactly."""
        values: dict[int, np.ndarray] = {}
        for node in self.nodes:
            if node.forward_fn is None:
                values[node.index] = node.data
                continue
            args = [values[p.index] if p.tracked else p.data for p in node.parents]
            out = node.forward_fn(*args)
            if out.dtype != node.data.dtype or not np.array_equal(out, node.data):
                return False
            values[node.index] = out
        return True


@contextlib.contextmanager
def no_tape() -> Iterator[None]:
    saved = list(_active)
    _active.clear()
    try:
        yield
    finally:
        _active.extend(saved)


def _tape() -> Tape | None:
    return _active[-1] if _active else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _make(data: np.ndarray, parents: tuple, backward_fn, forward_fn, op: str) -> Tensor:
    out = Tensor(data)
    tape = _tape()
    if tape is not None and any(p.tracked for p in parents):
        out.parents = parents
        out.backward_fn = backward_fn
        out.forward_fn = forward_fn
        out.op = op
        tape._record(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _scalar_like(x, ref: Tensor):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=ref.data.dtype))


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = _scalar_like(b, a)
    fwd = np.add

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(fwd(a.data, b.data), (a, b), back, fwd, "add")


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        b = as_tensor(b)
        a = _scalar_like(a, b)
    a = as_tensor(a)
    b = _scalar_like(b, a)
    fwd = np.subtract

    def back(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _make(fwd(a.data, b.data), (a, b), back, fwd, "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = _scalar_like(b, a)
    fwd = np.multiply

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(fwd(a.data, b.data), (a, b), back, fwd, "mul")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    fwd = np.matmul

    def back(g):
        # promote vectors the way np.matmul does: a -> row, b -> column
        A = a.data[None, :] if a.data.ndim == 1 else a.data
        B = b.data[:, None] if b.data.ndim == 1 else b.data
        G = g
        if b.data.ndim == 1:
            G = np.expand_dims(G, -1)
        if a.data.ndim == 1:
            G = np.expand_dims(G, -2)
        ga = G @ np.swapaxes(B, -1, -2)
        gb = np.swapaxes(A, -1, -2) @ G
        if a.data.ndim == 1:
            ga = ga[..., 0, :]
        if b.data.ndim == 1:
            gb = gb[..., :, 0]
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(fwd(a.data, b.data), (a, b), back, fwd, "matmul")


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    def fwd(x):
        return np.sum(x, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.data.dtype, copy=True),)

    return _make(np.asarray(fwd(a.data)), (a,), back, lambda x: np.asarray(fwd(x)), "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis), 1.0 / n)


def exp(a: Tensor) -> Tensor:
    out_holder = []

    def back(g):
        return (g * out_holder[0],)

    out = _make(np.exp(a.data), (a,), back, np.exp, "exp")
    out_holder.append(out.data)
    return out


def log(a: Tensor) -> Tensor:
    def back(g):
        return (g / a.data,)

    return _make(np.log(a.data), (a,), back, np.log, "log")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def fwd(x):
        return x.reshape(shape)

    def back(g):
        return (g.reshape(a.shape),)

    return _make(fwd(a.data), (a,), back, fwd, "reshape")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    def fwd(x):
        return np.swapaxes(x, i, j)

    def back(g):
        return (np.swapaxes(g, i, j),)

    return _make(fwd(a.data), (a,), back, fwd, "swapaxes")


def getitem(a: Tensor, key) -> Tensor:
    def fwd(x):
        return np.array(x[key])

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return _make(fwd(a.data), (a,), back, fwd, "getitem")


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Embedding lookup: ``table[ids]`` for an integer id array of rank <= 2."""
    ids = np.asarray(ids, dtype=np.int64)

    def fwd(x):
        return x[ids]

    def back(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _make(fwd(table.data), (table,), back, fwd, "take_rows")


def concat(parts: list[Tensor], axis: int) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def fwd(*xs):
        return np.concatenate(xs, axis=axis)

    def back(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            out.append(g[tuple(sl)])
        return tuple(out)

    return _make(fwd(*[p.data for p in parts]), tuple(parts), back, fwd, "concat")


def _softmax_np(x: np.ndarray, scale: float, mask: np.ndarray | None) -> np.ndarray:
    z = x * np.asarray(scale, dtype=x.dtype)
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(x, scale: float = 1.0, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis of ``scale * x``.

    ``mask`` (broadcastable boolean) marks admissible entries; the rest get
    probability exactly zero.  Each row is shifted by its max before ``exp``.
    """
    x = as_tensor(x)

    def fwd(v):
        return _softmax_np(v, scale, mask)

    out_holder = []

    def back(g):
        p = out_holder[0]
        dz = p * (g - (g * p).sum(axis=-1, keepdims=True))
        return (dz * np.asarray(scale, dtype=p.dtype),)

    out = _make(fwd(x.data), (x,), back, fwd, "softmax")
    out_holder.append(out.data)
    return out


def log_softmax(x, scale: float = 1.0) -> Tensor:
    x = as_tensor(x)

    def fwd(v):
        z = v * np.asarray(scale, dtype=v.dtype)
        z = z - z.max(axis=-1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    out_holder = []

    def back(g):
        p = np.exp(out_holder[0])
        dz = g - p * g.sum(axis=-1, keepdims=True)
        return (dz * np.asarray(scale, dtype=p.dtype),)

    out = _make(fwd(x.data), (x,), back, fwd, "log_softmax")
    out_holder.append(out.data)
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x) -> Tensor:
    x = as_tensor(x)

    def fwd(v):
        return v * _sigmoid(v)

    def back(g):
        s = _sigmoid(x.data)
        return (g * (s * (1 + x.data * (1 - s))),)

    return _make(fwd(x.data), (x,), back, fwd, "silu")


def rms_norm(x, scale, eps: float = 1e-6) -> Tensor:
    """Scale-only RMS normalisation over the last axis.

    ``eps`` sits in the denominator so an all-zero row maps to zero.
    """
    x, scale = as_tensor(x), as_tensor(scale)
    d = x.shape[-1]

    def fwd(v, s):
        rms = np.sqrt((v * v).mean(axis=-1, keepdims=True)) + np.asarray(eps, v.dtype)
        return v / rms * s

    def back(g):
        v, s = x.data, scale.data
        rms = np.sqrt((v * v).mean(axis=-1, keepdims=True))
        den = rms + np.asarray(eps, v.dtype)
        n = v / den
        gn = g * s
        # d rms / d v = v / (d * rms); guarded for rms == 0
        safe = np.where(rms > 0, rms, 1).astype(v.dtype)
        dot = (gn * v).sum(axis=-1, keepdims=True)
        gv = gn / den - dot * v / (den * den * safe * d)
        gs = _unbroadcast(g * n, scale.shape)
        return gv, gs

    return _make(fwd(x.data, scale.data), (x, scale), back, fwd, "rms_norm")


# ---------------------------------------------------------------- backward


def reverse_grad(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to every leaf watched on ``tape``.

    Leaves that do not influence ``loss`` receive zero gradients.
    """
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.tracked:
        if loss.index >= len(tape.nodes) or tape.nodes[loss.index] is not loss:
            raise ContractError("loss was not recorded on this tape")
        grads[loss.index] = np.ones_like(loss.data)
        for node in reversed(tape.nodes[: loss.index + 1]):
            g = grads.pop(node.index, None)
            if node.backward_fn is None:
                if g is not None:
                    grads[node.index] = g  # leaf: keep
                continue
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if not parent.tracked:
                    continue
                if parent.index >= node.index:
                    raise RuntimeError("tape is not topologically ordered (cycle)")
                prev = grads.get(parent.index)
                grads[parent.index] = pg if prev is None else prev + pg
    out = {}
    for name, leaf in tape.leaves.items():
        g = grads.get(leaf.index)
        out[name] = np.zeros_like(leaf.data) if g is None else g.astype(leaf.data.dtype, copy=False)
    return out


def finite_diff_check(
    f: Callable[[dict[str, np.ndarray]], float],
    params: dict[str, np.ndarray],
    epsilon: float = 1e-3,
    analytic: dict[str, np.ndarray] | None = None,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` maps a parameter dict to a scalar.  Analytic gradients are obtained by
    running ``f`` on a fresh tape unless supplied.  Returns NaN if ``f`` ever
    does, so callers see the failure.
    """
    params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    if analytic is None:
        with Tape() as tape:
            leaves = {k: tape.watch(k, v) for k, v in params.items()}
            loss = f(leaves)
        analytic = reverse_grad(tape, as_tensor(loss))

    def value(p):
        with no_tape():
            v = f({k: Tensor(a) for k, a in p.items()})
        return float(v.data) if isinstance(v, Tensor) else float(v)

    worst = 0.0
    for name, base in params.items():
        work = {k: v.copy() for k, v in params.items()}
        flat = work[name].reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            hi = value(work)
            flat[i] = orig - epsilon
            lo = value(work)
            flat[i] = orig
            numeric = (hi - lo) / (2 * epsilon)
            if math.isnan(numeric):
                return math.nan
            err = abs(float(ga[i]) - numeric) / (abs(numeric) + 1e-8)
            worst = max(worst, err)
    return worst
