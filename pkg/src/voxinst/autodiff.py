"""Dense N-d tensors with reverse-mode automatic differentiation.

The graph is recorded implicitly: every differentiable operation returns a
Tensor holding references to its parents and a closure that routes the
incoming gradient to them. `backward()` runs the closures in reverse
topological order, which is exactly the tape contract (each recorded op is
visited once, unused leaves keep a zero/None gradient).

Spatial tensors are channel-first [C, X, Y, Z]. f32 is the training dtype;
building the same graph from f64 arrays switches the whole computation to
f64 for gradient checking.
"""

import contextlib
from itertools import product as _iterprod

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ShapeError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # -- graph construction -------------------------------------------------

    def backward(self):
        """Reverse-mode pass from a scalar; fills .grad on every
        requires_grad node reachable from here."""
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar loss")
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def relu(self):
        return relu(self)


def _as_tensor(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data, parents, backward_fn):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward_fn = backward_fn
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g, shape):
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise and structural ops -----------------------------------------


def add(a, b):
    b = _as_tensor(b, a.dtype)
    try:
        data = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from e

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _node(data, (a, b), bwd)


def mul(a, b):
    b = _as_tensor(b, a.dtype)
    try:
        data = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from e

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(data, (a, b), bwd)


def scale(x, c):
    c = float(c)

    def bwd(g):
        _accum(x, g * c)

    return _node(x.data * np.asarray(c, dtype=x.dtype), (x,), bwd)


def relu(x):
    mask = x.data > 0

    def bwd(g):
        _accum(x, g * mask)

    return _node(np.where(mask, x.data, 0), (x,), bwd)


def tensor_sum(x, axis=None, keepdims=False):
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        gg = np.asarray(g)
        if not keepdims and axis is not None:
            gg = np.expand_dims(gg, axis)
        _accum(x, np.broadcast_to(gg, x.data.shape).copy())

    return _node(data, (x,), bwd)


def tensor_mean(x, axis=None, keepdims=False):
    count = x.data.size if axis is None else np.prod([x.data.shape[a] for a in np.atleast_1d(axis)])
    s = tensor_sum(x, axis, keepdims)
    return scale(s, 1.0 / float(count))


def reshape(x, shape):
    data = x.data.reshape(shape)

    def bwd(g):
        _accum(x, g.reshape(x.data.shape))

    return _node(data, (x,), bwd)


def concat(tensors, axis=0):
    if not tensors:
        raise ShapeError("concat of zero tensors")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def bwd(g):
        start = 0
        for t, n in zip(tensors, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + n)
            _accum(t, g[tuple(sl)])
            start += n

    return _node(data, tuple(tensors), bwd)


def gather_cols(x, idx):
    """Select columns of a 2-d tensor: [R, N], idx [M] -> [R, M]."""
    if x.data.ndim != 2:
        raise ShapeError(f"gather_cols expects 2-d input, got {x.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    data = x.data[:, idx]

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None), idx), g)
        _accum(x, gx)

    return _node(data, (x,), bwd)


def l2norm(x, axis=0, keepdims=False, guard=1e-12):
    """Euclidean norm along `axis`; gradient uses x/max(n, guard)."""
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))

    def bwd(g):
        gg = np.asarray(g)
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(x, gg * x.data / np.maximum(n, guard))

    data = n if keepdims else np.squeeze(n, axis=axis)
    return _node(data, (x,), bwd)


def l2_normalize(x, axis=0, eps=1e-8):
    """x / max(||x||, eps) along `axis`. The zero vector stays zero."""
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    nc = np.maximum(n, eps)
    y = x.data / nc

    def bwd(g):
        s = (g * y).sum(axis=axis, keepdims=True)
        big = n > eps
        _accum(x, np.where(big, (g - y * s) / nc, g / eps))

    return _node(y, (x,), bwd)


# -- convolution family ------------------------------------------------------


def _im2col(xp, k, stride, dilation, out_sp):
    """Padded input [C, Xp, Yp, Zp] -> column matrix [C*k^3, prod(out_sp)]."""
    c = xp.shape[0]
    s0, s1, s2, s3 = xp.strides
    view = as_strided(
        xp,
        (c, k, k, k, *out_sp),
        (s0, s1 * dilation, s2 * dilation, s3 * dilation, s1 * stride, s2 * stride, s3 * stride),
    )
    return view.reshape(c * k * k * k, -1)


def _scatter_taps(buf, taps, k, stride, dilation, in_sp):
    """Adjoint of _im2col: accumulate taps [C, k, k, k, *in_sp] into buf [C, L?]."""
    for a, b, c in _iterprod(range(k), range(k), range(k)):
        buf[
            :,
            a * dilation : a * dilation + (in_sp[0] - 1) * stride + 1 : stride,
            b * dilation : b * dilation + (in_sp[1] - 1) * stride + 1 : stride,
            c * dilation : c * dilation + (in_sp[2] - 1) * stride + 1 : stride,
        ] += taps[:, a, b, c]


def _conv_out_dim(n, k, stride, dilation, pad):
    return (n + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def _resolve_pad(padding, k, dilation):
    if padding == "same":
        if k % 2 == 0:
            raise ShapeError("'same' padding requires an odd kernel")
        return dilation * (k - 1) // 2
    return int(padding)


def conv3d(x, w, b=None, stride=1, dilation=1, padding="same"):
    """3-d cross-correlation. x [Ci, X, Y, Z], w [Co, Ci, k, k, k], b [Co].

    'same' padding (p = d*(k-1)/2) preserves spatial dims at stride 1.
    Output dims follow floor((n + 2p - d*(k-1) - 1)/s) + 1.
    """
    if x.data.ndim != 4 or w.data.ndim != 5:
        raise ShapeError(f"conv3d: input {x.shape}, weights {w.shape}")
    co, ci, k = w.shape[0], w.shape[1], w.shape[2]
    if w.shape[2:] != (k, k, k):
        raise ShapeError("conv3d expects cubic kernels")
    if x.shape[0] != ci:
        raise ShapeError(f"conv3d: {x.shape[0]} input channels, weights expect {ci}")
    if stride < 1 or dilation < 1:
        raise ShapeError("stride and dilation must be >= 1")
    p = _resolve_pad(padding, k, dilation)
    in_sp = x.shape[1:]
    out_sp = tuple(_conv_out_dim(n, k, stride, dilation, p) for n in in_sp)
    if min(out_sp) < 1:
        raise ShapeError(f"conv3d: output would be empty for input {x.shape}")

    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (p, p)))
    col = _im2col(xp, k, stride, dilation, out_sp)
    wf = w.data.reshape(co, -1)
    out = (wf @ col).reshape(co, *out_sp)
    if b is not None:
        if b.shape != (co,):
            raise ShapeError(f"conv3d: bias shape {b.shape}, expected ({co},)")
        out = out + b.data.reshape(-1, 1, 1, 1)

    parents = (x, w) if b is None else (x, w, b)

    def bwd(g):
        gf = g.reshape(co, -1)
        if b is not None:
            _accum(b, g.sum(axis=(1, 2, 3)))
        if w.requires_grad or x.requires_grad:
            # col recomputed instead of cached: trades one copy for memory.
            xp2 = np.pad(x.data, ((0, 0), (p, p), (p, p), (p, p)))
            if w.requires_grad:
                col2 = _im2col(xp2, k, stride, dilation, out_sp)
                _accum(w, (gf @ col2.T).reshape(w.data.shape))
            if x.requires_grad:
                taps = (wf.T @ gf).reshape(ci, k, k, k, *out_sp)
                dxp = np.zeros_like(xp2)
                _scatter_taps(dxp, taps, k, stride, dilation, out_sp)
                sl = tuple(slice(p, p + n) for n in in_sp)
                _accum(x, dxp[(slice(None), *sl)])

    return _node(out, parents, bwd)


def conv_transpose3d(x, w, b=None, stride=1, dilation=1, padding=0, output_padding=0):
    """Adjoint of conv3d: <conv3d(a; W), y> == <a, conv_transpose3d(y; W)>.

    x [Ci, X, Y, Z], w [Ci, Co, k, k, k] (first axis consumes x's channels).
    Output dim per axis: (n-1)*s - 2p + d*(k-1) + 1 + output_padding.
    """
    if x.data.ndim != 4 or w.data.ndim != 5:
        raise ShapeError(f"conv_transpose3d: input {x.shape}, weights {w.shape}")
    ci, co, k = w.shape[0], w.shape[1], w.shape[2]
    if w.shape[2:] != (k, k, k):
        raise ShapeError("conv_transpose3d expects cubic kernels")
    if x.shape[0] != ci:
        raise ShapeError(f"conv_transpose3d: {x.shape[0]} input channels, weights expect {ci}")
    p, op = int(padding), int(output_padding)
    in_sp = x.shape[1:]
    buf_sp = tuple((n - 1) * stride + dilation * (k - 1) + 1 + op for n in in_sp)
    out_sp = tuple(n - 2 * p for n in buf_sp)
    if min(out_sp) < 1:
        raise ShapeError("conv_transpose3d: output would be empty")

    xf = x.data.reshape(ci, -1)
    wf = w.data.reshape(ci, -1)
    taps = (wf.T @ xf).reshape(co, k, k, k, *in_sp)
    buf = np.zeros((co, *buf_sp), dtype=x.dtype)
    _scatter_taps(buf, taps, k, stride, dilation, in_sp)
    crop = tuple(slice(p, ln - p) for ln in buf_sp)
    out = buf[(slice(None), *crop)]
    if b is not None:
        if b.shape != (co,):
            raise ShapeError(f"conv_transpose3d: bias shape {b.shape}, expected ({co},)")
        out = out + b.data.reshape(-1, 1, 1, 1)

    parents = (x, w) if b is None else (x, w, b)

    def bwd(g):
        if b is not None:
            _accum(b, g.sum(axis=(1, 2, 3)))
        if w.requires_grad or x.requires_grad:
            gb = np.zeros((co, *buf_sp), dtype=g.dtype)
            gb[(slice(None), *crop)] = g
            col = _im2col(gb, k, stride, dilation, in_sp)
            if x.requires_grad:
                _accum(x, (wf @ col).reshape(ci, *in_sp))
            if w.requires_grad:
                _accum(w, (xf @ col.T).reshape(w.data.shape))

    return _node(out, parents, bwd)


def maxpool3d(x):
    """2x2x2 max pooling, stride 2. Gradient goes to the first maximal
    element of each window in (dx, dy, dz) scan order."""
    c, X, Y, Z = x.shape
    if X % 2 or Y % 2 or Z % 2:
        raise ShapeError(f"maxpool3d needs even spatial dims, got {x.shape}")
    xo, yo, zo = X // 2, Y // 2, Z // 2
    win = (
        x.data.reshape(c, xo, 2, yo, 2, zo, 2)
        .transpose(0, 1, 3, 5, 2, 4, 6)
        .reshape(c, xo, yo, zo, 8)
    )
    amax = win.argmax(axis=-1)
    out = np.take_along_axis(win, amax[..., None], axis=-1)[..., 0]

    def bwd(g):
        gw = np.zeros((c, xo, yo, zo, 8), dtype=g.dtype)
        np.put_along_axis(gw, amax[..., None], g[..., None], axis=-1)
        gx = (
            gw.reshape(c, xo, yo, zo, 2, 2, 2)
            .transpose(0, 1, 4, 2, 5, 3, 6)
            .reshape(c, X, Y, Z)
        )
        _accum(x, gx)

    return _node(out, (x,), bwd)


def pad_end3d(x, pads):
    """Zero-pad the high end of the spatial axes: pads = (px, py, pz)."""
    px, py, pz = pads
    data = np.pad(x.data, ((0, 0), (0, px), (0, py), (0, pz)))

    def bwd(g):
        _accum(x, g[:, : x.shape[1], : x.shape[2], : x.shape[3]])

    return _node(data, (x,), bwd)


def crop3d(x, dims):
    """Crop spatial axes down to dims = (X, Y, Z), keeping the low corner."""
    X, Y, Z = dims
    data = x.data[:, :X, :Y, :Z]

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[:, :X, :Y, :Z] = g
        _accum(x, gx)

    return _node(data, (x,), bwd)
