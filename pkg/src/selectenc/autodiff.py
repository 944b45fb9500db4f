"""Tape-based reverse-mode automatic differentiation on float64 numpy arrays.

Every primitive records a node on the tape of its operands. Backward rules are
written in terms of the same primitives, so with ``create_graph=True`` the
gradient computation is itself recorded and can be differentiated again.

    >>> tape = Tape()
    >>> x = tape.watch(3.0)
    >>> (dx,) = grad(x * x, [x])
    >>> float(dx.data)
    6.0
"""

from __future__ import annotations

import contextlib
import functools
import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "TapeError",
    "NonFiniteError",
    "record",
    "grad",
    "no_record",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "matmul",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "relu",
    "absolute",
    "tsum",
    "mean",
    "reshape",
    "transpose",
    "broadcast_to",
    "sum_to",
    "take",
    "put",
    "concat",
    "softmax",
    "log_softmax",
    "max_pool2d",
    "avg_pool2d",
    "conv2d",
]


class TapeError(ValueError):
    """Raised for misuse of tapes (foreign tensors, missing output...)."""


class NonFiniteError(FloatingPointError):
    """A recorded primitive produced inf or nan."""

    def __init__(self, index: int, op: str):
        super().__init__(f"op #{index} ({op}) produced a non-finite value")
        self.index = index
        self.op = op


_state = threading.local()


def _recording() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_record(disable: bool = True):
    """Evaluate primitives eagerly without attaching results to any tape."""
    prev = _recording()
    _state.enabled = not disable
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    __slots__ = ("index", "op", "inputs", "backward", "out")

    def __init__(self, index, op, inputs, backward):
        self.index = index
        self.op = op
        self.inputs = inputs
        self.backward = backward
        self.out = None


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended in evaluation order, so inputs always precede the nodes
    that consume them. A tape belongs to one computation; call :meth:`release`
    once the gradients have been extracted.
    """

    def __init__(self, check_finite: bool = True):
        self.nodes: list[Node] = []
        self.check_finite = check_finite

    @property
    def watermark(self) -> int:
        return len(self.nodes)

    def watch(self, value) -> "Tensor":
        """Attach a leaf tensor holding a copy of ``value`` to this tape."""
        data = np.array(value.data if isinstance(value, Tensor) else value, dtype=np.float64)
        return self._append("leaf", data, (), None)

    def _append(self, op, data, inputs, backward) -> "Tensor":
        index = len(self.nodes)
        if self.check_finite and not np.isfinite(data).all():
            raise NonFiniteError(index, op)
        node = Node(index, op, inputs, backward)
        out = Tensor(data, self, node)
        node.out = out
        self.nodes.append(node)
        return out

    def release(self) -> None:
        """Drop all nodes; breaks reference cycles between nodes and outputs."""
        for node in self.nodes:
            node.out = None
            node.inputs = ()
            node.backward = None
        self.nodes = []

    def __len__(self) -> int:
        return len(self.nodes)


class Tensor:
    """A float64 array, optionally linked to a node of a :class:`Tape`."""

    __slots__ = ("data", "tape", "node")
    __array_ufunc__ = None

    def __init__(self, data, tape: Tape | None = None, node: Node | None = None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        where = "detached" if self.node is None else f"node={self.node.index}"
        return f"Tensor(shape={self.shape}, {where})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matmul(self, o)
    __pow__ = lambda self, p: power(self, p)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _t(v) -> Tensor:
    return v if isinstance(v, Tensor) else Tensor(np.asarray(v, dtype=np.float64))


def _live(t: Tensor) -> bool:
    return t.node is not None


def _make(op: str, data: np.ndarray, inputs: tuple, backward) -> Tensor:
    if _recording():
        tape = None
        for t in inputs:
            if t.tape is not None:
                if tape is None:
                    tape = t.tape
                elif t.tape is not tape:
                    raise TapeError(f"{op}: operands recorded on different tapes")
        if tape is not None:
            return tape._append(op, data, inputs, backward)
    return Tensor(data)


def record(f: Callable[..., Tensor], inputs: Sequence, check_finite: bool = True):
    """Evaluate ``f`` on freshly watched copies of ``inputs``.

    Returns ``(output, tape, watched)``; ``watched`` are the leaf tensors, to be
    passed as ``wrt`` to :func:`grad`.
    """
    tape = Tape(check_finite=check_finite)
    watched = [tape.watch(v) for v in inputs]
    return f(*watched), tape, watched


def grad(output: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of the scalar ``output`` with respect to each tensor of ``wrt``.

    With ``create_graph`` the backward pass is recorded on the same tape, so the
    returned gradients can be differentiated again.
    """
    if output.size != 1:
        raise ValueError(f"grad needs a scalar output, got shape {output.shape}")
    tape = output.tape
    if tape is None or output.node is None:
        raise TapeError("output is not recorded on a tape")
    for w in wrt:
        if w.tape is not tape or w.node is None:
            raise TapeError("a wrt tensor does not appear on the output's tape")
    upto = output.node.index
    nodes = tape.nodes[: upto + 1]
    grads: dict[int, Tensor] = {upto: Tensor(np.ones_like(output.data))}
    with no_record(not create_graph):
        for node in reversed(nodes):
            g = grads.get(node.index)
            if g is None or node.backward is None:
                continue
            for inp, ig in zip(node.inputs, node.backward(g, node)):
                if ig is None or inp.node is None or inp.tape is not tape:
                    continue
                k = inp.node.index
                prev = grads.get(k)
                grads[k] = ig if prev is None else add(prev, ig)
    out = []
    for w in wrt:
        g = grads.get(w.node.index)
        if g is None:
            g = Tensor(np.zeros_like(w.data))
        out.append(g)
    return out


# ----------------------------------------------------------------------------
# elementwise and broadcasting arithmetic


def _shape_reduce(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(shape) if n == 1 and g.shape[i + lead] != 1
    )
    return g.sum(axis=axes, keepdims=True).reshape(shape) if axes else g.reshape(shape)


def sum_to(a: Tensor, shape: tuple) -> Tensor:
    """Reduce a broadcast result back to ``shape`` (adjoint of broadcast_to)."""
    a = _t(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    in_shape = a.shape

    def back(g, node):
        return (broadcast_to(g, in_shape),)

    return _make("sum_to", _shape_reduce(a.data, shape), (a,), back)


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    a = _t(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    in_shape = a.shape

    def back(g, node):
        return (sum_to(g, in_shape),)

    return _make("broadcast_to", np.broadcast_to(a.data, shape).copy(), (a,), back)


def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    sa, sb = a.shape, b.shape

    def back(g, node):
        return (
            sum_to(g, sa) if _live(a) else None,
            sum_to(g, sb) if _live(b) else None,
        )

    return _make("add", a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    sa, sb = a.shape, b.shape

    def back(g, node):
        return (
            sum_to(g, sa) if _live(a) else None,
            sum_to(neg(g), sb) if _live(b) else None,
        )

    return _make("sub", a.data - b.data, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    sa, sb = a.shape, b.shape

    def back(g, node):
        return (
            sum_to(mul(g, b), sa) if _live(a) else None,
            sum_to(mul(g, a), sb) if _live(b) else None,
        )

    return _make("mul", a.data * b.data, (a, b), back)


def div(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    sa, sb = a.shape, b.shape

    def back(g, node):
        ga = sum_to(div(g, b), sa) if _live(a) else None
        gb = sum_to(neg(div(mul(g, node.out), b)), sb) if _live(b) else None
        return ga, gb

    return _make("div", a.data / b.data, (a, b), back)


def neg(a) -> Tensor:
    a = _t(a)
    return _make("neg", -a.data, (a,), lambda g, node: (neg(g),))


def power(a, p: float) -> Tensor:
    """Elementwise ``a ** p`` for a constant real exponent ``p``."""
    a = _t(a)
    p = float(p)

    def back(g, node):
        if p == 1.0:
            return (g,)
        if p == 2.0:
            return (mul(g, mul(a, 2.0)),)
        return (mul(g, mul(power(a, p - 1.0), p)),)

    with np.errstate(divide="ignore", invalid="ignore"):
        return _make("pow", np.power(a.data, p), (a,), back)


def exp(a) -> Tensor:
    a = _t(a)
    with np.errstate(over="ignore"):
        data = np.exp(a.data)
    return _make("exp", data, (a,), lambda g, node: (mul(g, node.out),))


def log(a) -> Tensor:
    a = _t(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)
    return _make("log", data, (a,), lambda g, node: (div(g, a),))


def tanh(a) -> Tensor:
    a = _t(a)

    def back(g, node):
        y = node.out
        return (mul(g, sub(1.0, mul(y, y))),)

    return _make("tanh", np.tanh(a.data), (a,), back)


def sigmoid(a) -> Tensor:
    a = _t(a)

    def back(g, node):
        y = node.out
        return (mul(g, mul(y, sub(1.0, y))),)

    return _make("sigmoid", 0.5 * (1.0 + np.tanh(0.5 * a.data)), (a,), back)


def relu(a) -> Tensor:
    a = _t(a)
    gate = Tensor((a.data > 0).astype(np.float64))
    return _make("relu", a.data * gate.data, (a,), lambda g, node: (mul(g, gate),))


def absolute(a) -> Tensor:
    a = _t(a)
    sign = Tensor(np.sign(a.data))
    return _make("abs", np.abs(a.data), (a,), lambda g, node: (mul(g, sign),))


# ----------------------------------------------------------------------------
# reductions and shape manipulation


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _t(a)
    in_shape = a.shape
    data = a.data.sum(axis=axis, keepdims=True)
    kept = data.shape

    def back(g, node):
        return (broadcast_to(reshape(g, kept), in_shape),)

    if not keepdims:
        axes = range(a.ndim) if axis is None else np.atleast_1d(axis) % max(a.ndim, 1)
        data = data.reshape(tuple(n for i, n in enumerate(in_shape) if i not in set(axes)))
    return _make("sum", data, (a,), back)


def mean(a) -> Tensor:
    a = _t(a)
    return mul(tsum(a), 1.0 / a.size)


def reshape(a, shape) -> Tensor:
    a = _t(a)
    in_shape = a.shape
    data = a.data.reshape(shape)
    if data.shape == in_shape:
        return a
    return _make("reshape", data, (a,), lambda g, node: (reshape(g, in_shape),))


def transpose(a, axes=None) -> Tensor:
    a = _t(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    data = np.ascontiguousarray(a.data.transpose(axes))
    return _make("transpose", data, (a,), lambda g, node: (transpose(g, inverse),))


def take(a, idx) -> Tensor:
    """Gather from the flattened ``a``; the result has the shape of ``idx``."""
    a = _t(a)
    idx = np.asarray(idx, dtype=np.intp)
    in_shape = a.shape
    return _make(
        "take", a.data.reshape(-1)[idx], (a,), lambda g, node: (put(g, idx, in_shape),)
    )


def put(a, idx, shape) -> Tensor:
    """Scatter-add ``a`` into zeros of ``shape`` at flat positions ``idx`` (adjoint of take)."""
    a = _t(a)
    idx = np.asarray(idx, dtype=np.intp)
    shape = tuple(shape)
    size = int(np.prod(shape))
    data = np.bincount(idx.reshape(-1), weights=a.data.reshape(-1), minlength=size)
    return _make("put", data.reshape(shape), (a,), lambda g, node: (take(g, idx),))


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate the flattened parts into one vector."""
    parts = [_t(p) for p in parts]
    bounds = np.cumsum([0] + [p.size for p in parts])
    shapes = [p.shape for p in parts]

    def back(g, node):
        return tuple(
            reshape(take(g, np.arange(bounds[i], bounds[i + 1])), shapes[i]) if _live(p) else None
            for i, p in enumerate(parts)
        )

    data = np.concatenate([p.data.reshape(-1) for p in parts])
    return _make("concat", data, tuple(parts), back)


def matmul(a, b) -> Tensor:
    """Matrix product of two 2-D tensors."""
    a, b = _t(a), _t(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")

    def back(g, node):
        return (
            matmul(g, transpose(b)) if _live(a) else None,
            matmul(transpose(a), g) if _live(b) else None,
        )

    return _make("matmul", a.data @ b.data, (a, b), back)


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = _t(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)

    def back(g, node):
        s = node.out
        return (mul(s, sub(g, tsum(mul(g, s), axis=-1, keepdims=True))),)

    return _make("softmax", e / e.sum(axis=-1, keepdims=True), (a,), back)


def log_softmax(a) -> Tensor:
    """Log-softmax over the last axis, evaluated with the max-shift."""
    a = _t(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    data = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def back(g, node):
        return (sub(g, mul(exp(node.out), tsum(g, axis=-1, keepdims=True))),)

    return _make("log_softmax", data, (a,), back)


# ----------------------------------------------------------------------------
# image primitives on (channels, height, width) tensors


@functools.lru_cache(maxsize=64)
def _pool_windows(c: int, h: int, w: int) -> np.ndarray:
    """Flat indices of every 2x2 window, shape (c, h//2, w//2, 4), row-major in-window order."""
    base = np.arange(c * h * w).reshape(c, h, w)
    ho, wo = h // 2, w // 2
    base = base[:, : 2 * ho, : 2 * wo]
    win = base.reshape(c, ho, 2, wo, 2).transpose(0, 1, 3, 2, 4).reshape(c, ho, wo, 4)
    win.setflags(write=False)
    return win


def max_pool2d(x) -> Tensor:
    """2x2 max pooling with stride 2; ties go to the first element in row-major order."""
    x = _t(x)
    win = _pool_windows(*x.shape)
    vals = x.data.reshape(-1)[win]
    pick = np.take_along_axis(win, vals.argmax(axis=-1)[..., None], axis=-1)[..., 0]
    return take(x, pick)


@functools.lru_cache(maxsize=64)
def _avg_matrix(h: int, w: int) -> Tensor:
    ho, wo = h // 2, w // 2
    mat = np.zeros((h * w, ho * wo))
    for i in range(2 * ho):
        for j in range(2 * wo):
            mat[i * w + j, (i // 2) * wo + j // 2] = 0.25
    return Tensor(mat)


def avg_pool2d(x) -> Tensor:
    """2x2 average pooling with stride 2."""
    x = _t(x)
    c, h, w = x.shape
    out = matmul(reshape(x, (c, h * w)), _avg_matrix(h, w))
    return reshape(out, (c, h // 2, w // 2))


@functools.lru_cache(maxsize=64)
def _pad_index(c: int, h: int, w: int, p: int) -> np.ndarray:
    hp, wp = h + 2 * p, w + 2 * p
    idx = np.arange(c * hp * wp).reshape(c, hp, wp)[:, p : p + h, p : p + w]
    idx = np.ascontiguousarray(idx)
    idx.setflags(write=False)
    return idx


@functools.lru_cache(maxsize=64)
def _im2col_index(c: int, h: int, w: int, k: int) -> np.ndarray:
    ho, wo = h - k + 1, w - k + 1
    ci, di, dj = np.meshgrid(np.arange(c), np.arange(k), np.arange(k), indexing="ij")
    rows = (ci * h * w + di * w + dj).reshape(-1, 1)
    oi, oj = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
    cols = (oi * w + oj).reshape(1, -1)
    idx = rows + cols
    idx.setflags(write=False)
    return idx


def conv2d(x, weight, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation of x (C, H, W) with weight (O, C, k, k).

    ``padding`` zeros are added on every side (0 gives a 'valid' convolution).
    The op is assembled from take/put/matmul, so its backward stays on the tape.
    """
    x, weight = _t(x), _t(weight)
    o, c, k, k2 = weight.shape
    if k != k2 or x.ndim != 3 or x.shape[0] != c:
        raise ValueError(f"conv2d: input {x.shape} incompatible with kernel {weight.shape}")
    _, h, w = x.shape
    if padding:
        x = put(x, _pad_index(c, h, w, padding), (c, h + 2 * padding, w + 2 * padding))
        h, w = h + 2 * padding, w + 2 * padding
    if h < k or w < k:
        raise ValueError(f"conv2d: kernel {k} larger than padded input {h}x{w}")
    cols = take(x, _im2col_index(c, h, w, k))
    out = matmul(reshape(weight, (o, c * k * k)), cols)
    return reshape(out, (o, h - k + 1, w - k + 1))
