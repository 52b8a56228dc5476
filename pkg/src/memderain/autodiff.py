"""Minimal define-by-run reverse-mode autodiff over numpy arrays.

Only the operations needed by the de-raining model, the memory bank and the
losses are provided.  Every op returns a new :class:`Tensor` that remembers its
parents and a closure mapping the upstream gradient to one gradient per parent.
Nodes receive a monotonically increasing id when they are created, so the
construction order is a valid topological order of the graph and
:func:`backward` simply walks the reachable nodes in decreasing id order.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_node_ids = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, memory update)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._id = next(_node_ids)
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operator sugar ---------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def backward(loss: Tensor, grad: Optional[np.ndarray] = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

    Nodes are visited once each, in reverse construction order.  Gradients
    from several uses of the same tensor are summed.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if grad is None:
        grad = np.ones_like(loss.data)

    nodes = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._id in nodes:
            continue
        nodes[t._id] = t
        stack.extend(p for p in t._parents if p.requires_grad)

    grads = {loss._id: grad}
    for nid in sorted(nodes, reverse=True):
        t = nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        if t._backward is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for parent, pg in zip(t._parents, t._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = pg


# --------------------------------------------------------------------------
# elementwise / shape ops
# --------------------------------------------------------------------------

def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)), "mul")


def div(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, a.shape), _unbroadcast(-g * out / bd, b.shape)

    return _make(out, (a, b), bw, "div")


def tabs(x: Tensor) -> Tensor:
    s = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * s,), "abs")


def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at 0 is 0."""
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def getitem(x: Tensor, idx) -> Tensor:
    shape = x.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx, g) if _has_advanced(idx) else out.__setitem__(idx, g)
        return (out,)

    return _make(np.asarray(x.data[idx]), (x,), bw, "getitem")


def _has_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack two NCHW tensors along channels: ``a`` first, then ``b``."""
    if a.ndim != 4 or b.ndim != 4:
        raise DimensionError("concat_channels expects NCHW tensors")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise DimensionError(f"cannot concat {a.shape} and {b.shape} along channels")
    return concat([a, b], axis=1)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def vector_norm(x: Tensor, axis: int = -1, keepdims: bool = True) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at a zero vector is taken as 0."""
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    safe = np.where(n > 0, n, 1.0)

    def bw(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (gk * x.data / safe * (n > 0),)

    out = n if keepdims else np.squeeze(n, axis=axis)
    return _make(out, (x,), bw, "norm")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), bw, "softmax")


# --------------------------------------------------------------------------
# convolution family (NCHW, zero padding)
# --------------------------------------------------------------------------

def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int):
    """Returns (output NCHW, columns) with columns laid out (Cin*kh*kw, N*Ho*Wo)."""
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho, wo = _conv_out(h, kh, stride, pad), _conv_out(wd, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    xc = x.transpose(1, 0, 2, 3)
    cols = np.empty((cin, kh, kw, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xc[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
    cols = cols.reshape(cin * kh * kw, n * ho * wo)
    out = (w.reshape(cout, -1) @ cols).reshape(cout, n, ho, wo)
    return out.transpose(1, 0, 2, 3), cols


def _grad_matrix(g: np.ndarray) -> np.ndarray:
    return g.transpose(1, 0, 2, 3).reshape(g.shape[1], -1)


def _conv_input_grad(g: np.ndarray, w: np.ndarray, in_shape: tuple, stride: int, pad: int) -> np.ndarray:
    """Adjoint of the conv w.r.t. its input: scatter-add of W^T g back onto the input grid."""
    n, cout, ho, wo = g.shape
    _, cin, kh, kw = w.shape
    _, _, h, wd = in_shape
    dcols = (w.reshape(cout, -1).T @ _grad_matrix(g)).reshape(cin, kh, kw, n, ho, wo)
    # a strided conv may leave the last rows/cols of the padded input unread
    hp = max(h + 2 * pad, (ho - 1) * stride + kh)
    wp = max(wd + 2 * pad, (wo - 1) * stride + kw)
    dx = np.zeros((cin, n, hp, wp), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += dcols[:, i, j]
    return np.ascontiguousarray(dx[:, :, pad:pad + h, pad:pad + wd].transpose(1, 0, 2, 3))


def _conv_weight_grad(g: np.ndarray, cols: np.ndarray, w_shape: tuple) -> np.ndarray:
    return (_grad_matrix(g) @ cols.T).reshape(w_shape)


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (N,Cin,H,W) with ``w`` (Cout,Cin,kh,kw)."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError("conv2d expects 4-D input and kernel")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d: input has {x.shape[1]} channels, kernel expects {w.shape[1]}")
    if stride < 1 or padding < 0:
        raise ContractError("stride must be positive and padding non-negative")
    kh, kw = w.shape[2:]
    if _conv_out(x.shape[2], kh, stride, padding) < 1 or _conv_out(x.shape[3], kw, stride, padding) < 1:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {x.shape[2:]}")
    out, cols = _conv_forward(x.data, w.data, stride, padding)
    if b is not None:
        if b.shape != (w.shape[0],):
            raise DimensionError(f"conv2d: bias shape {b.shape} != ({w.shape[0]},)")
        out = out + b.data.reshape(1, -1, 1, 1)
    in_shape, wd = x.shape, w.data

    def bw(g):
        gx = _conv_input_grad(g, wd, in_shape, stride, padding) if x.requires_grad else None
        gw = _conv_weight_grad(g, cols, wd.shape) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _make(np.ascontiguousarray(out), parents, bw, "conv2d")


def transposed_conv2d(y: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 2,
                      padding: int = 0, output_padding: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d` w.r.t. its input.

    ``w`` has shape (Cin, Cout, kh, kw) where Cin matches ``y``; output side is
    ``(H-1)*stride - 2*padding + kh + output_padding``.  With a 3x3 kernel,
    stride 2, padding 1 and output_padding 1 the output is exactly 2H x 2W.
    """
    if y.ndim != 4 or w.ndim != 4:
        raise DimensionError("transposed_conv2d expects 4-D input and kernel")
    if y.shape[1] != w.shape[0]:
        raise DimensionError(f"transposed_conv2d: input has {y.shape[1]} channels, kernel expects {w.shape[0]}")
    n, _, h, wd_ = y.shape
    cout, kh, kw = w.shape[1], w.shape[2], w.shape[3]
    ho = (h - 1) * stride - 2 * padding + kh + output_padding
    wo = (wd_ - 1) * stride - 2 * padding + kw + output_padding
    if ho < 1 or wo < 1 or not 0 <= output_padding < stride:
        raise DimensionError("transposed_conv2d: invalid output geometry")
    out_shape = (n, cout, ho, wo)
    wdat = w.data
    out = _conv_input_grad(y.data, wdat, out_shape, stride, padding)
    if b is not None:
        if b.shape != (cout,):
            raise DimensionError(f"transposed_conv2d: bias shape {b.shape} != ({cout},)")
        out = out + b.data.reshape(1, -1, 1, 1)

    def bw(g):
        gy, cols = _conv_forward(g, wdat, stride, padding)
        gw = _conv_weight_grad(y.data, cols, wdat.shape) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        return (gy if y.requires_grad else None), gw, gb

    parents = (y, w) if b is None else (y, w, b)
    return _make(np.ascontiguousarray(out), parents, bw, "transposed_conv2d")


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2.

    Ties send the gradient to the first element of the window in row-major
    order (``np.argmax`` semantics).
    """
    if x.ndim != 4:
        raise DimensionError("maxpool2d expects NCHW")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2d needs even spatial dims, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        d = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(d, arg[..., None], g[..., None], axis=-1)
        d = d.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (d,)

    return _make(out, (x,), bw, "maxpool2d")
