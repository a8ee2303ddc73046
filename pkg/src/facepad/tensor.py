"""
Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every primitive records a closure mapping the output gradient to one
gradient per parent.  ``backward`` walks the recorded graph once in reverse
topological order and accumulates into the ``grad`` of leaf tensors that
require it.  Leaf gradients accumulate across calls until ``zero_grad``.

Convolution uses the cross-correlation convention (no kernel flip).
"""

from __future__ import annotations

import numbers
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, ShapeError

__all__ = [
    "Tensor",
    "tensor",
    "matmul",
    "conv2d",
    "relu",
    "maxpool2d",
    "upsample2x",
    "reshape",
    "transpose",
    "tsum",
    "mean",
    "stack",
    "softmax",
    "softmax_cross_entropy",
    "backward",
    "graph_nodes",
    "zero_grad",
    "gradient_check",
]


class Tensor:
    """n-dimensional float64 array with an optional accumulated gradient."""

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op=""):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(_parents)
        self._backward = _backward
        self.op = op

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def values(self):
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data.copy()

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, numbers.Real):
            return mul(self, 1.0 / float(other))
        return mul(self, reciprocal(_lift(other)))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    def backward(self):
        backward(self)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn, op):
    # wraps without copying; ``data`` is always a fresh array here
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.grad = None
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad, out._parents, out._backward = True, parents, backward_fn
    else:
        out.requires_grad, out._parents, out._backward = False, (), None
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise ----------------------------------------------------------
def add(a, b):
    a, b = _lift(a), _lift(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}") from None

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, (a, b), _bw, "add")


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    a, b = _lift(a), _lift(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}") from None

    def _bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(data, (a, b), _bw, "mul")


def reciprocal(a):
    data = 1.0 / a.data
    return _make(data, (a,), lambda g: (-g * data * data,), "reciprocal")


def relu(x):
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def softmax(logits):
    """Plain (non-differentiable) softmax over the last axis."""
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# -- shape ops ------------------------------------------------------------
def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} into {shape}") from None
    src = x.shape
    return _make(data, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def take(x, index):
    data = x.data[index]
    src = x.shape

    def _bw(g):
        out = np.zeros(src)
        np.add.at(out, index, g)
        return (out,)

    return _make(data, (x,), _bw, "take")


def stack(tensors: Sequence[Tensor], axis=0):
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise ContractError("stack needs at least one tensor")
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack needs equal shapes, got {sorted(shapes)}")
    data = np.stack([t.data for t in tensors], axis=axis)

    def _bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(data, tuple(tensors), _bw, "stack")


# -- reductions -----------------------------------------------------------
def tsum(x, axis=None):
    data = np.sum(x.data, axis=axis)
    src = x.shape

    def _bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(data, (x,), _bw, "sum")


def mean(x, axis=None):
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis) * (1.0 / float(count))


# -- linear algebra -------------------------------------------------------
def matmul(a, b):
    """Matrix product of 2-D operands, or of 3-D operands with equal batch extent."""
    a, b = _lift(a), _lift(b)
    if a.ndim != b.ndim or a.ndim not in (2, 3):
        raise ShapeError(f"matmul needs two 2-D or two 3-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or (a.ndim == 3 and a.shape[0] != b.shape[0]):
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def _bw(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _make(data, (a, b), _bw, "matmul")


def conv2d(x, kernels, stride=1, padding=0):
    """2-D cross-correlation of ``x`` (C×H×W or N×C×H×W) with O×C×kh×kw kernels."""
    x, kernels = _lift(x), _lift(kernels)
    if stride < 1 or padding < 0:
        raise ContractError(f"need stride >= 1 and padding >= 0, got {stride}, {padding}")
    batched = x.ndim == 4
    if x.ndim not in (3, 4) or kernels.ndim != 4:
        raise ShapeError(f"conv2d needs C×H×W or N×C×H×W input and 4-D kernels, got {x.shape}, {kernels.shape}")
    X = x.data if batched else x.data[None]
    n, c, h, w = X.shape
    o, ci, kh, kw = kernels.shape
    if ci != c:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernels {kernels.shape}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    # channel-major im2col: cols[c, di, dj, n, i, j] = xpad[n, c, i*stride + di, j*stride + dj]
    xt = X.transpose(1, 0, 2, 3)
    if padding:
        xt = np.pad(xt, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((c, kh, kw, n, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
    cols = cols.reshape(c * kh * kw, n * ho * wo)
    kmat = kernels.data.reshape(o, c * kh * kw)
    out = (kmat @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)

    def _bw(g):
        g4 = g if batched else g[None]
        gmat = g4.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
        dk = dx = None
        if kernels.requires_grad:
            dk = (gmat @ cols.T).reshape(o, c, kh, kw)
        if x.requires_grad:
            dcols = (kmat.T @ gmat).reshape(c, kh, kw, n, ho, wo)
            dxp = np.zeros(xt.shape)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += dcols[:, i, j]
            dx = dxp[:, :, padding:padding + h, padding:padding + w].transpose(1, 0, 2, 3)
            dx = dx if batched else dx[0]
        return dx, dk

    return _make(out if batched else out[0], (x, kernels), _bw, "conv2d")


def maxpool2d(x, window=2, stride=None):
    """Window max over the last two axes.  Partial windows are not allowed."""
    stride = window if stride is None else stride
    if x.ndim not in (3, 4):
        raise ShapeError(f"maxpool2d needs C×H×W or N×C×H×W input, got {x.shape}")
    h, w = x.shape[-2:]
    if window > h or window > w or (h - window) % stride or (w - window) % stride:
        raise ShapeError(f"pooling window {window} / stride {stride} incompatible with extent {h}x{w}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    win = sliding_window_view(x.data, (window, window), axis=(-2, -1))[..., ::stride, ::stride, :, :]
    flat = win.reshape(win.shape[:-2] + (window * window,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    src = x.shape

    def _bw(g):
        dx = np.zeros(src)
        lead = np.indices(arg.shape)
        rows = lead[-2] * stride + arg // window
        cols = lead[-1] * stride + arg % window
        where = tuple(lead[:-2]) + (rows, cols)
        if stride >= window:
            dx[where] = g  # windows do not overlap
        else:
            np.add.at(dx, where, g)
        return (dx,)

    assert out.shape[-2:] == (ho, wo)
    return _make(out, (x,), _bw, "maxpool2d")


def upsample2x(x):
    """Nearest-neighbour upsampling by two over the last two axes."""
    data = x.data.repeat(2, axis=-2).repeat(2, axis=-1)
    src = x.shape

    def _bw(g):
        g = g.reshape(g.shape[:-2] + (src[-2], 2, src[-1], 2))
        return (g.sum(axis=(-3, -1)),)

    return _make(data, (x,), _bw, "upsample2x")


# -- losses ---------------------------------------------------------------
def softmax_cross_entropy(logits, labels):
    """-log softmax(logits)[label], stabilized by log-sum-exp.

    ``logits`` is K (single label) or N×K (labels of length N, loss averaged).
    """
    logits = _lift(logits)
    z = logits.data
    single = z.ndim == 1
    Z = z[None] if single else z
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if Z.ndim != 2 or lab.shape != (Z.shape[0],):
        raise ShapeError(f"logits {logits.shape} do not match labels of shape {lab.shape}")
    k = Z.shape[1]
    if np.any(lab < 0) or np.any(lab >= k):
        raise IndexError(f"label out of range [0, {k}): {lab.tolist()}")
    shift = Z - Z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shift).sum(axis=1))
    rows = np.arange(Z.shape[0])
    losses = lse - shift[rows, lab]
    n = Z.shape[0]

    def _bw(g):
        p = np.exp(shift - lse[:, None])
        p[rows, lab] -= 1.0
        p *= g / n
        return (p[0] if single else p,)

    return _make(np.array(losses.mean()), (logits,), _bw, "softmax_xent")


# -- graph traversal ------------------------------------------------------
def graph_nodes(root: Tensor):
    """Recorded nodes reachable from ``root`` in topological order (inputs first)."""
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor):
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph_nodes(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def zero_grad(params: Iterable[Tensor]):
    for p in params:
        p.grad = None


def gradient_check(f: Callable[[Tensor], Tensor], x: Tensor, eps=1e-5):
    """Max relative error between the analytic gradient and central differences.

    The relative error of one coordinate is
    ``|analytic - numeric| / max(floor, |analytic| + |numeric|)`` where
    ``floor`` is 1e-6 of the largest gradient entry (at least 1e-12).  Without
    it, entries many orders below the rest are dominated by finite-difference
    rounding rather than by any error in the analytic gradient.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    probe = Tensor(x.data, requires_grad=True)
    out = f(probe)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ContractError("gradient_check needs f to return a scalar tensor")
    backward(out)
    analytic = np.zeros_like(probe.data) if probe.grad is None else probe.grad
    base = x.data.copy()
    numeric = np.empty_like(base)
    flat_num = numeric.reshape(-1)
    for i in range(base.size):
        bumped = base.copy().reshape(-1)
        bumped[i] += eps
        hi = f(Tensor(bumped.reshape(base.shape))).item()
        bumped[i] -= 2 * eps
        lo = f(Tensor(bumped.reshape(base.shape))).item()
        flat_num[i] = (hi - lo) / (2 * eps)
    floor = max(1e-12, 1e-6 * max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0)))
    err = np.abs(analytic - numeric) / np.maximum(floor, np.abs(analytic) + np.abs(numeric))
    return float(err.max())
