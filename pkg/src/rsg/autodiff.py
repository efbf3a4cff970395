"""Dense float64 tensors with a define-by-run reverse-mode tape, Adam, and a
binary checkpoint format.

Broadcasting is limited to scalar-with-tensor; everything else must match
exactly (use :func:`broadcast_to` to expand explicitly).
"""
from __future__ import annotations

import itertools
import struct
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _accel
from .errors import DetachedLossError, MissingGradError, NotScalarError, ShapeMismatchError

_counter = itertools.count()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = next(_counter)
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __getitem__(self, idx):
        return slice_(self, idx)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(out_data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.data.ndim != 0 and b.data.ndim != 0:
        raise ShapeMismatchError(f"{op}: shapes {a.shape} and {b.shape} do not match")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    return np.asarray(g.sum()) if shape == () and g.shape != () else g


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(a.data * b.data, (a, b), bw, "mul")


def square(a: Tensor) -> Tensor:
    return _record(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _record(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sigmoid(a: Tensor) -> Tensor:
    y = np.empty_like(a.data)
    pos = a.data >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ez = np.exp(a.data[~pos])
    y[~pos] = ez / (1.0 + ez)
    return _record(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _record(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    return _record(np.where(keep, a.data, 0.0), (a,), lambda g: (g * keep,), "relu")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; the gradient is zero where clamping was active."""
    keep = (a.data >= lo) & (a.data <= hi)
    return _record(np.clip(a.data, lo, hi), (a,), lambda g: (g * keep,), "clip")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(y, (a,), bw, "softmax")


# -- reductions -----------------------------------------------------------------

def sum_(a: Tensor, axis=None) -> Tensor:
    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _record(a.data.sum(axis=axis), (a,), bw, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis), 1.0 / count) if count else sum_(a, axis)


# -- linear algebra and shape ----------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _record(a.data @ b.data, (a, b), bw, "matmul")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        y = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatchError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    return _record(y, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.data.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit broadcast; the gradient sums over the expanded axes."""
    shape = tuple(shape)
    try:
        y = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeMismatchError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None
    lead = len(shape) - a.data.ndim

    def bw(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, s in enumerate(a.shape) if s == 1 and g.shape[i] != 1)
        return (g.sum(axis=axes, keepdims=True) if axes else g,)

    return _record(y, (a,), bw, "broadcast")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise ShapeMismatchError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _record(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


def slice_(a: Tensor, idx) -> Tensor:
    """Basic or integer-array indexing; gradients scatter-add back."""

    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _record(a.data[idx], (a,), bw, "slice")


def _scatter_rows(n: int, idx: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Rows of ``g`` summed into an n-row array at ``idx`` (sort + reduceat)."""
    out = np.zeros((n,) + g.shape[1:])
    if idx.size == 0:
        return out
    order = np.argsort(idx, kind="stable")
    sidx = idx[order]
    starts = np.concatenate([[0], np.nonzero(np.diff(sidx))[0] + 1])
    out[sidx[starts]] = np.add.reduceat(g[order], starts, axis=0)
    return out


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    indices = np.asarray(indices, dtype=np.int64)
    n = a.shape[axis]
    flat_idx = np.where(indices < 0, indices + n, indices).ravel()

    def bw(g):
        moved = np.moveaxis(g, axis, 0)
        moved = moved.reshape((flat_idx.size,) + moved.shape[indices.ndim:])
        return (np.moveaxis(_scatter_rows(n, flat_idx, moved), 0, axis),)

    return _record(np.take(a.data, indices, axis=axis), (a,), bw, "take")


# -- graph and image kernels --------------------------------------------------------

def edge_matvec_mean(W: Tensor, X: Tensor, src, dst, n: int) -> Tensor:
    """Per-edge messages ``W[e] @ X[src[e]]`` averaged into ``dst`` rows.

    ``W`` is (edges, d_out, d_in), ``X`` is (nodes, d_in).  Rows with no
    incoming edge are zero.
    """
    src = np.ascontiguousarray(src, dtype=np.int64)
    dst = np.ascontiguousarray(dst, dtype=np.int64)
    if W.data.ndim != 3 or X.data.ndim != 2 or W.shape[2] != X.shape[1] or W.shape[0] != len(src):
        raise ShapeMismatchError(f"edge_matvec_mean: shapes {W.shape} and {X.shape} are incompatible")
    deg = np.bincount(dst, minlength=n).astype(np.float64)
    inv = np.divide(1.0, deg, out=np.zeros(n), where=deg > 0)
    Wd = np.ascontiguousarray(W.data)
    Xd = np.ascontiguousarray(X.data)
    out = _accel.edge_matvec_fwd(Wd, Xd, src, dst, inv, n)

    def bw(g):
        return _accel.edge_matvec_bwd(np.ascontiguousarray(g), Wd, Xd, src, dst, inv)

    return _record(out, (W, X), bw, "edge_matvec_mean")


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of (B, C, H, W) input with (O, C, K, K) filters."""
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeMismatchError(f"conv2d: shapes {x.shape} and {w.shape} are incompatible")
    xd = np.ascontiguousarray(x.data)
    wd = np.ascontiguousarray(w.data)
    out = _accel.conv2d_fwd(xd, wd, stride, pad)

    def bw(g):
        return _accel.conv2d_bwd(np.ascontiguousarray(g), xd, wd, stride, pad)

    return _record(out, (x, w), bw, "conv2d")


# -- backward ---------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

    Interior nodes are released afterwards, so a tape runs backward once.
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise NotScalarError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise DetachedLossError("loss does not depend on any tensor requiring grad")
    if loss.is_leaf:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in nodes:
            continue
        nodes[id(t)] = t
        stack.extend(p for p in t._parents if p.requires_grad)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in sorted(nodes.values(), key=lambda t: t._seq, reverse=True):
        g = grads.pop(id(t), None)
        if t.is_leaf:
            if g is not None:
                t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        if g is not None:
            for p, pg in zip(t._parents, t._backward(g)):
                if not p.requires_grad or pg is None:
                    continue
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg
        t._parents = ()
        t._backward = None


# -- parameters, Adam, checkpoints ----------------------------------------------------

class AdamState:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}


def adam_step(params: dict[str, Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update in place.  Callers zero grads afterwards."""
    for k, p in params.items():
        if p.grad is None:
            raise MissingGradError(f"parameter {k!r} has no gradient")
        if state.m[k].shape != p.shape:
            raise ShapeMismatchError(f"adam: moment shape {state.m[k].shape} vs parameter {p.shape}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    # p -= lr * (m/c1) / (sqrt(v/c2) + eps), folded into one step size
    lr_t = state.lr * np.sqrt(c2) / c1
    eps_t = state.eps * np.sqrt(c2)
    for k, p in params.items():
        if not p.data.flags.c_contiguous:
            p.data = np.ascontiguousarray(p.data)
        _accel.adam_update(p.data, np.ascontiguousarray(p.grad), state.m[k], state.v[k],
                           lr_t, state.beta1, state.beta2, eps_t)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


CHECKPOINT_MAGIC = b"RSGT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    from .io import atomic_write_bytes

    atomic_write_bytes(path, checkpoint_bytes(tensors))


def checkpoint_bytes(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())


def parse_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    from .errors import ParseError, SchemaVersionError

    try:
        if buf[:4] != CHECKPOINT_MAGIC:
            raise ParseError("not a checkpoint file (bad magic)")
        version, count = struct.unpack_from("<II", buf, 4)
        if version != CHECKPOINT_VERSION:
            raise SchemaVersionError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
        off = 12
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}Q", buf, off)
            off += 8 * rank
            size = int(np.prod(shape)) if rank else 1
            if off + 8 * size > len(buf):
                raise ParseError(f"checkpoint truncated in tensor {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape).copy()
            off += 8 * size
    except struct.error:
        raise ParseError("checkpoint truncated") from None
    if off != len(buf):
        raise ParseError("trailing bytes after last checkpoint tensor")
    return out
