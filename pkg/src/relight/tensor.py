"""Dense 4-D tensors with reverse-mode automatic differentiation.

Every tensor is N x C x H x W.  Operations on tensors that require gradients
record a :class:`Node` carrying a monotonically increasing sequence number;
:func:`backward` collects the nodes reachable from a scalar, orders them by
that number (which is insertion order, hence topological) and walks them in
reverse.  No global tape is kept, so an unused graph is simply garbage.

Broadcasting is limited to scalars and the per-channel convolution bias.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor", "Node", "Graph", "ShapeError",
    "get_dtype", "set_dtype", "precision", "no_grad",
    "tensor", "zeros", "full", "randu", "randn",
    "add", "sub", "mul", "div", "scale", "add_scalar", "neg",
    "absolute", "square", "relu", "reshape", "crop", "diff", "pad_replicate",
    "conv2d", "downsample_avg2x", "upsample_bilinear2x",
    "reduce", "mean", "total", "backward", "grad_check",
]

_DTYPE = np.dtype(np.float32)
_GRAD_ENABLED = True
_SEQ = itertools.count()


class ShapeError(ValueError):
    """Raised when tensor shapes violate an operation's contract."""


def get_dtype() -> np.dtype:
    return _DTYPE


def set_dtype(dtype) -> None:
    """Set the engine-wide float type (``float32`` or ``float64``)."""
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    old = _DTYPE
    set_dtype(dtype)
    try:
        yield
    finally:
        set_dtype(old)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class Node:
    """One recorded operation: its inputs and how to push a gradient back."""

    __slots__ = ("seq", "inputs", "backward_fn", "out_shape", "op")

    def __init__(self, op: str, inputs: Sequence["Tensor"], backward_fn, out_shape):
        self.seq = next(_SEQ)
        self.op = op
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn
        self.out_shape = out_shape


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "__weakref__")

    def __init__(self, data: np.ndarray, requires_grad: bool = False, node: Optional[Node] = None):
        if data.ndim != 4:
            raise ShapeError(f"tensors are 4-D, got shape {data.shape}")
        if min(data.shape) < 1:
            raise ShapeError(f"all dims must be >= 1, got {data.shape}")
        self.data = data
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node = node

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    def __add__(self, other):
        return add_scalar(self, other) if np.isscalar(other) else add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add_scalar(self, -other) if np.isscalar(other) else sub(self, other)

    def __mul__(self, other):
        return scale(self, other) if np.isscalar(other) else mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return scale(self, 1.0 / other) if np.isscalar(other) else div(self, other)

    def __neg__(self):
        return neg(self)


def _wrap(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    tracked = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    if not tracked:
        return Tensor(data)
    return Tensor(data, requires_grad=True, node=Node(op, inputs, backward_fn, data.shape))


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- construction ----------------------------------------------------------

def _check_shape(shape) -> tuple:
    shape = tuple(int(d) for d in shape)
    if len(shape) != 4 or min(shape) < 1:
        raise ShapeError(f"shape must be 4 dims >= 1, got {shape}")
    return shape


def tensor(values, shape=None, requires_grad: bool = False) -> Tensor:
    """Build a tensor from values; ``shape`` reshapes a flat sequence."""
    arr = np.asarray(values, dtype=_DTYPE)
    if shape is not None:
        shape = _check_shape(shape)
        if arr.size != int(np.prod(shape)):
            raise ShapeError(f"{arr.size} values cannot fill shape {shape}")
        arr = arr.reshape(shape)
    return Tensor(np.ascontiguousarray(arr), requires_grad=requires_grad)


def full(shape, value: float, requires_grad: bool = False) -> Tensor:
    return Tensor(np.full(_check_shape(shape), value, dtype=_DTYPE), requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return full(shape, 0.0, requires_grad)


def randu(shape, seed: int, low: float = -1.0, high: float = 1.0, requires_grad: bool = False) -> Tensor:
    rng = np.random.default_rng(seed)
    data = rng.uniform(low, high, size=_check_shape(shape)).astype(_DTYPE)
    return Tensor(data, requires_grad)


def randn(shape, seed: int, std: float = 1.0, requires_grad: bool = False) -> Tensor:
    rng = np.random.default_rng(seed)
    data = (std * rng.standard_normal(_check_shape(shape))).astype(_DTYPE)
    return Tensor(data, requires_grad)


# -- elementwise -----------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _wrap("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return _wrap("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _wrap("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _wrap("div", out, (a, b), lambda g: (g / bd, -g * out / bd))


def scale(a: Tensor, alpha: float) -> Tensor:
    alpha = float(alpha)
    return _wrap("scale", (a.data * alpha).astype(a.data.dtype, copy=False), (a,),
                 lambda g: (g * alpha,))


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _wrap("add_scalar", (a.data + c).astype(a.data.dtype, copy=False), (a,), lambda g: (g,))


def absolute(a: Tensor) -> Tensor:
    # sign(0) == 0, so the subgradient at a kink is 0
    s = np.sign(a.data)
    return _wrap("abs", np.abs(a.data), (a,), lambda g: (g * s,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _wrap("square", ad * ad, (a,), lambda g: (2.0 * g * ad,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _wrap("relu", np.where(mask, a.data, 0).astype(a.data.dtype), (a,),
                 lambda g: (g * mask,))


# -- shape manipulation ----------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = _check_shape(shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    old = a.shape
    return _wrap("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def crop(a: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    """Spatial window ``a[..., top:top+height, left:left+width]``."""
    _, _, H, W = a.shape
    if top < 0 or left < 0 or top + height > H or left + width > W:
        raise ShapeError(f"crop {(top, left, height, width)} outside {a.shape}")
    old = a.shape

    def back(g):
        out = np.zeros(old, dtype=g.dtype)
        out[:, :, top:top + height, left:left + width] = g
        return (out,)

    return _wrap("crop", a.data[:, :, top:top + height, left:left + width].copy(), (a,), back)


def diff(a: Tensor, axis: int) -> Tensor:
    """Forward neighbour difference along H (axis=2) or W (axis=3)."""
    if axis not in (2, 3):
        raise ValueError("axis must be 2 or 3")
    n = a.shape[axis]
    if n < 2:
        raise ShapeError(f"diff along axis {axis} needs >= 2 samples, got {a.shape}")
    lo = [slice(None)] * 4
    hi = [slice(None)] * 4
    lo[axis] = slice(0, n - 1)
    hi[axis] = slice(1, n)
    lo, hi = tuple(lo), tuple(hi)
    old = a.shape

    def back(g):
        out = np.zeros(old, dtype=g.dtype)
        out[hi] += g
        out[lo] -= g
        return (out,)

    return _wrap("diff", a.data[hi] - a.data[lo], (a,), back)


def pad_replicate(a: Tensor, pad: int) -> Tensor:
    """Spatial padding that repeats the border pixels."""
    if pad < 0:
        raise ValueError("pad must be >= 0")
    if pad == 0:
        return a
    N, C, H, W = a.shape
    rows = np.clip(np.arange(-pad, H + pad), 0, H - 1)
    cols = np.clip(np.arange(-pad, W + pad), 0, W - 1)
    out = a.data[:, :, rows][:, :, :, cols]

    def back(g):
        gr = np.zeros((N, C, H, g.shape[3]), dtype=g.dtype)
        np.add.at(gr, (slice(None), slice(None), rows), g)
        gx = np.zeros((N, C, H, W), dtype=g.dtype)
        np.add.at(gx, (slice(None), slice(None), slice(None), cols), gr)
        return (gx,)

    return _wrap("pad_replicate", out, (a,), back)


# -- convolution -----------------------------------------------------------

def _conv_out(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded cross-correlation via im2col and a single matmul.

    ``w`` is (Cout, Cin, k, k) and ``bias`` is stored as (1, Cout, 1, 1).
    """
    N, Cin, H, W = x.shape
    Cout, wc, k, k2 = w.shape
    if wc != Cin:
        raise ShapeError(f"conv2d: weight expects {wc} input channels, got {Cin}")
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd, got {k}x{k2}")
    if H + 2 * pad < k or W + 2 * pad < k:
        raise ShapeError(f"conv2d: {H}x{W} input with pad {pad} is smaller than kernel {k}")
    if bias is not None and bias.shape != (1, Cout, 1, 1):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != (1, {Cout}, 1, 1)")
    Ho, Wo = _conv_out(H, k, stride, pad), _conv_out(W, k, stride, pad)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    # (N, Ho, Wo, Cin, k, k) -> rows of the im2col matrix
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(N * Ho * Wo, Cin * k * k)
    wmat = w.data.reshape(Cout, Cin * k * k)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data.reshape(1, Cout)
    out = np.ascontiguousarray(out.reshape(N, Ho, Wo, Cout).transpose(0, 3, 1, 2))

    inputs = (x, w) if bias is None else (x, w, bias)
    Hp, Wp = xp.shape[2], xp.shape[3]

    def back(g):
        gm = g.transpose(0, 2, 3, 1).reshape(N * Ho * Wo, Cout)
        gw = (gm.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gm @ wmat).reshape(N, Ho, Wo, Cin, k, k)
            gxp = np.zeros((N, Cin, Hp, Wp), dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp
        if bias is None:
            return gx, gw
        gb = gm.sum(axis=0).reshape(1, Cout, 1, 1)
        return gx, gw, gb

    return _wrap("conv2d", out, inputs, back)


# -- resampling ------------------------------------------------------------

def downsample_avg2x(x: Tensor) -> Tensor:
    N, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"downsample_avg2x needs even H and W, got {H}x{W}")
    out = x.data.reshape(N, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))

    def back(g):
        g4 = np.broadcast_to((g * 0.25)[:, :, :, None, :, None], (N, C, H // 2, 2, W // 2, 2))
        return (g4.reshape(N, C, H, W).copy(),)

    return _wrap("downsample_avg2x", out.astype(x.data.dtype, copy=False), (x,), back)


def _up1d(a: np.ndarray, axis: int) -> np.ndarray:
    # output 2m   samples source m - 0.25 -> 0.75*a[m] + 0.25*a[m-1]
    # output 2m+1 samples source m + 0.25 -> 0.75*a[m] + 0.25*a[m+1]
    # neighbours clamp at the borders
    n = a.shape[axis]
    prev = np.take(a, np.maximum(np.arange(n) - 1, 0), axis=axis)
    nxt = np.take(a, np.minimum(np.arange(n) + 1, n - 1), axis=axis)
    even = 0.75 * a + 0.25 * prev
    odd = 0.75 * a + 0.25 * nxt
    out = np.stack([even, odd], axis=axis + 1)
    shape = list(a.shape)
    shape[axis] = 2 * n
    return out.reshape(shape)


def _up1d_T(g: np.ndarray, axis: int) -> np.ndarray:
    shape = list(g.shape)
    n = shape[axis] // 2
    split = shape[:axis] + [n, 2] + shape[axis + 1:]
    g2 = g.reshape(split)
    ge = np.take(g2, 0, axis=axis + 1)
    go = np.take(g2, 1, axis=axis + 1)
    out = 0.75 * (ge + go)
    idx = [slice(None)] * g.ndim
    # even output m routes 0.25 to a[max(m-1, 0)], odd output m to a[min(m+1, n-1)]
    if n > 1:
        dst, src = list(idx), list(idx)
        dst[axis], src[axis] = slice(0, n - 1), slice(1, n)
        out[tuple(dst)] += 0.25 * ge[tuple(src)]
        dst[axis], src[axis] = slice(1, n), slice(0, n - 1)
        out[tuple(dst)] += 0.25 * go[tuple(src)]
    first, last = list(idx), list(idx)
    first[axis], last[axis] = slice(0, 1), slice(n - 1, n)
    out[tuple(first)] += 0.25 * ge[tuple(first)]
    out[tuple(last)] += 0.25 * go[tuple(last)]
    return out


def upsample_bilinear2x(x: Tensor) -> Tensor:
    """Bilinear x2 upsampling with half-pixel centres, edge-clamped."""
    out = _up1d(_up1d(x.data, 2), 3).astype(x.data.dtype, copy=False)
    return _wrap("upsample_bilinear2x", out, (x,),
                 lambda g: (_up1d_T(_up1d_T(g, 3), 2).astype(g.dtype, copy=False),))


# -- reductions ------------------------------------------------------------

def reduce(kind: str, x: Tensor) -> Tensor:
    shape = x.shape
    n = x.size
    if kind == "sum":
        val = x.data.sum(dtype=np.float64)
        factor = 1.0
    elif kind == "mean":
        val = x.data.sum(dtype=np.float64) / n
        factor = 1.0 / n
    else:
        raise ValueError(f"unknown reduction {kind!r}")
    out = np.full((1, 1, 1, 1), val, dtype=x.data.dtype)

    def back(g):
        return (np.full(shape, g.reshape(-1)[0] * factor, dtype=g.dtype),)

    return _wrap(kind, out, (x,), back)


def mean(x: Tensor) -> Tensor:
    return reduce("mean", x)


def total(x: Tensor) -> Tensor:
    return reduce("sum", x)


# -- backward --------------------------------------------------------------

class Graph:
    """Recorded operations reachable from one output, in insertion order."""

    def __init__(self, nodes: list):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Graph":
        seen = set()
        nodes = []
        stack = [out]
        while stack:
            t = stack.pop()
            node = t.node
            if node is None or id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append((node, t))
            stack.extend(node.inputs)
        nodes.sort(key=lambda pair: pair[0].seq)
        return cls(nodes)

    def __len__(self):
        return len(self.nodes)


def backward(loss: Tensor, wrt: Optional[Iterable[Tensor]] = None) -> dict:
    """Back-propagate from a (1,1,1,1) scalar.

    Leaf gradients are assigned (not accumulated) to ``.grad``.  Leaves listed
    in ``wrt`` that the graph never touches get zero gradients.  Returns a map
    from ``id(leaf)`` to its gradient array.
    """
    if loss.shape != (1, 1, 1, 1):
        raise ShapeError(f"backward needs a (1,1,1,1) scalar, got {loss.shape}")
    if loss.node is None:
        raise ValueError("backward: loss is not attached to a graph")
    graph = Graph.from_output(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node, out in reversed(graph.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if inp.node is None:
                leaves[key] = inp
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    result = {}
    for key, leaf in leaves.items():
        leaf.grad = np.asarray(grads[key], dtype=leaf.data.dtype).reshape(leaf.shape)
        result[key] = leaf.grad
    if wrt is not None:
        for leaf in wrt:
            if id(leaf) not in result:
                leaf.grad = np.zeros_like(leaf.data)
                result[id(leaf)] = leaf.grad
    return result


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
               indices: Optional[Sequence[int]] = None) -> float:
    """Max elementwise relative error between autodiff and central differences.

    The relative error uses ``max(|a|, |b|, 1e-8)`` as denominator.  Only the
    flat ``indices`` are probed when given.
    """
    if x.data.dtype != np.float64:
        raise TypeError("grad_check needs a float64 tensor; use precision('float64')")
    leaf = Tensor(x.data.copy(), requires_grad=True)
    backward(f(leaf), wrt=[leaf])
    analytic = leaf.grad.reshape(-1)
    flat = leaf.data.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    worst = 0.0
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = f(leaf).item()
            flat[i] = orig - h
            fm = f(leaf).item()
            flat[i] = orig
            numeric = (fp - fm) / (2 * h)
            a = analytic[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
