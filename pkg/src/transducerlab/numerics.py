"""Dense float64 tensors with reverse-mode gradients and a finite-difference checker.

Everything is double precision, row-major numpy underneath. Gradients
accumulate additively into ``Tensor.grad``; callers zero them explicitly
between optimizer steps. Tensors are plain values: reading is safe from
anywhere, mutation (including grad accumulation) needs exclusive access.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import BinaryIO, Callable, Sequence

import numpy as np


class NumericsError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

_GRAD_STACK = [True]


class no_grad:
    """Disable tape recording inside a ``with`` block (inference mode)."""

    def __enter__(self):
        _GRAD_STACK.append(False)
        return self

    def __exit__(self, *exc):
        _GRAD_STACK.pop()
        return False


def grad_enabled() -> bool:
    return _GRAD_STACK[-1]


class Tensor:
    """N-d float64 array with an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd", "name")

    def __init__(self, data, requires_grad: bool = False, parents=(), bwd=None,
                 name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._bwd = bwd
        self.name = name

    # -- value plumbing ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def copy(self) -> "Tensor":
        t = Tensor(self.data.copy(), requires_grad=self.requires_grad, name=self.name)
        if self.grad is not None:
            t.grad = self.grad.copy()
        return t

    def __repr__(self):
        return f"Tensor(shape={self.shape}, name={self.name!r})"

    # -- operators -------------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(_wrap(other), neg(self))

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __neg__(self):
        return neg(self)

    # -- reverse mode ------------------------------------------------------

    def backward(self) -> None:
        """Reverse sweep from a scalar; adds into every reachable ``grad``."""
        if self.data.size != 1:
            raise NumericsError("backward() requires a scalar")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        _accumulate(self, np.ones_like(self.data))
        for node in reversed(order):
            if node._bwd is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._bwd(node.grad)):
                if parent.requires_grad and g is not None:
                    _accumulate(parent, g)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def make_node(data, parents: Sequence[Tensor], bwd) -> Tensor:
    """Create a tape node; drops to a constant when recording is off."""
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=tuple(parents), bwd=bwd)
    return Tensor(data)


def parameter(data, name: str = "") -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data
    return make_node(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape),
                                             _unbroadcast(g, b.data.shape)))


def neg(a) -> Tensor:
    a = _wrap(a)
    return make_node(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data
    return make_node(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.data.shape),
                                             _unbroadcast(g * a.data, b.data.shape)))


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise NumericsError("matmul expects 2-d operands")
    out = a.data @ b.data
    return make_node(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def sigmoid(a: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-a.data))
    return make_node(y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return make_node(y, (a,), lambda g: (g * (1.0 - y * y),))


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    m = a.data.max(axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_node(y, (a,), bwd)


def tsum(a: Tensor) -> Tensor:
    return make_node(a.data.sum(), (a,), lambda g: (np.broadcast_to(g, a.data.shape).copy(),))


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    return make_node(a.data.mean(), (a,),
                     lambda g: (np.broadcast_to(g / n, a.data.shape).copy(),))


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.data.shape
    return make_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def gather_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup: rows ``ids`` of ``table``; backward scatter-adds."""
    idx = np.asarray(ids, dtype=np.intp)
    out = table.data[idx]

    def bwd(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, idx, g)
        return (dt,)

    return make_node(out, (table,), bwd)


def pairwise_sum(a: Tensor, b: Tensor) -> Tensor:
    """a (T,J) x b (U,J) -> (T,U,J) with out[t,u] = a[t] + b[u]."""
    out = a.data[:, None, :] + b.data[None, :, :]
    return make_node(out, (a, b), lambda g: (g.sum(axis=1), g.sum(axis=0)))


def layer_norm(x, gain, bias, eps: float = 1e-5):
    """gain * (x - mean) / sqrt(var + eps) + bias over a single vector.

    Accepts Tensors (differentiable) or plain arrays (returns an ndarray).
    """
    if eps <= 0:
        raise NumericsError("layer_norm needs eps > 0")
    if not isinstance(x, Tensor):
        xv, gv, bv = (np.asarray(v, dtype=np.float64) for v in (x, gain, bias))
        if not (xv.shape == gv.shape == bv.shape) or xv.ndim != 1:
            raise NumericsError("layer_norm operands must be equal-length vectors")
        ivar = 1.0 / math.sqrt(xv.var() + eps)
        return gv * ((xv - xv.mean()) * ivar) + bv
    gain = _wrap(gain)
    bias = _wrap(bias)
    if not (x.shape == gain.shape == bias.shape) or x.data.ndim != 1:
        raise NumericsError("layer_norm operands must be equal-length vectors")
    mu = x.data.mean()
    ivar = 1.0 / math.sqrt(x.data.var() + eps)
    xhat = (x.data - mu) * ivar
    y = gain.data * xhat + bias.data

    def bwd(g):
        dxhat = g * gain.data
        dx = ivar * (dxhat - dxhat.mean() - xhat * (dxhat * xhat).mean())
        return dx, g * xhat, g.copy()

    return make_node(y, (x, gain, bias), bwd)


def logsumexp(v):
    """log(sum(exp(v))) with max subtraction; -inf entries are identities.

    Accepts a Tensor (differentiable, scalar node out) or any array-like
    (returns a float).
    """
    if isinstance(v, Tensor):
        if v.data.size == 0:
            raise NumericsError("empty reduction")
        out, w = _lse_with_weights(v.data)

        def bwd(g):
            return (g * w,)

        return make_node(np.float64(out), (v,), bwd)
    arr = np.asarray(v, dtype=np.float64)
    if arr.size == 0:
        raise NumericsError("empty reduction")
    return _lse_with_weights(arr)[0]


def _lse_with_weights(arr: np.ndarray) -> tuple[float, np.ndarray]:
    m = arr.max()
    if m == -np.inf:
        return -np.inf, np.zeros_like(arr)
    e = np.exp(arr - m)
    s = e.sum()
    return float(m + np.log(s)), e / s


def log_softmax(arr: np.ndarray, axis: int = -1) -> np.ndarray:
    """Plain-array log softmax (no tape), used by the DP recursions."""
    m = arr.max(axis=axis, keepdims=True)
    z = arr - m
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------

@dataclass
class GradEntry:
    name: str
    max_rel_err: float
    index: int
    analytic: float
    numeric: float


@dataclass
class GradReport:
    max_rel_err: float
    worst_param: tuple[str, int]
    table: list[GradEntry]


def grad_check(function: Callable[[], Tensor], params: dict[str, Tensor],
               step: float = 1e-4) -> GradReport:
    """Compare reverse-mode gradients of ``function()`` against central differences.

    ``function`` must be deterministic and re-evaluable; it should close over
    ``params`` and return a scalar Tensor. Relative error uses the denominator
    max(|analytic|, |numeric|, 1e-8).
    """
    if step <= 0:
        raise NumericsError("grad_check needs step > 0")
    for t in params.values():
        t.zero_grad()
    loss = function()
    if not np.isfinite(loss.data):
        raise NumericsError("non-finite loss at base evaluation")
    loss.backward()
    analytic = {}
    for name, t in params.items():
        analytic[name] = np.zeros_like(t.data) if t.grad is None else t.grad.copy()

    table: list[GradEntry] = []
    worst = ("", -1)
    worst_err = 0.0
    for name, t in params.items():
        flat = t.data.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        entry = GradEntry(name, 0.0, 0, 0.0, 0.0)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            f_plus = float(function().data)
            flat[i] = keep - step
            f_minus = float(function().data)
            flat[i] = keep
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise NumericsError(f"non-finite loss while perturbing {name}[{i}]")
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(a_flat[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if rel > entry.max_rel_err:
                entry = GradEntry(name, rel, i, a, numeric)
            if rel > worst_err:
                worst_err = rel
                worst = (name, i)
        table.append(entry)
    return GradReport(max_rel_err=worst_err, worst_param=worst, table=table)


# ---------------------------------------------------------------------------
# Checkpoint tensor sections
# ---------------------------------------------------------------------------
# Section layout: name length u32 LE, name UTF-8, rank u32, extents u32 each,
# payload little-endian float64.

def write_tensor_section(fh: BinaryIO, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<I", arr.ndim))
    for extent in arr.shape:
        fh.write(struct.pack("<I", extent))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_tensor_section(fh: BinaryIO) -> tuple[str, np.ndarray]:
    head = fh.read(4)
    if len(head) < 4:
        raise NumericsError("truncated tensor section header")
    (name_len,) = struct.unpack("<I", head)
    name = fh.read(name_len).decode("utf-8")
    (rank,) = struct.unpack("<I", fh.read(4))
    shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(rank))
    count = int(np.prod(shape)) if shape else 1
    payload = fh.read(8 * count)
    if len(payload) < 8 * count:
        raise NumericsError(f"truncated tensor payload for {name!r}")
    arr = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    return name, arr
