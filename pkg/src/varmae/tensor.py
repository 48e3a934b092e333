"""Minimal n-dimensional tensor engine with reverse-mode autodiff.

Everything is stored as float64 numpy arrays. Each differentiable op
records its parents and a closure that routes the upstream gradient to
them; ``Tensor.backward`` walks the graph once in reverse topological
order. Gradients accumulate additively, so a tensor used twice gets the
sum of both contributions.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError

_GRAD_ENABLED = True

_GELU_C = 0.7978845608  # sqrt(2/pi), tanh-approximation constant
_GELU_A = 0.044715


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the with-block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A numpy-backed n-d array that can participate in autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        """Populate grads of every reachable requires_grad tensor.

        Only defined for scalar outputs (a loss).
        """
        if self.data.size != 1:
            raise ContractError("backward requires a scalar loss tensor")
        order = _topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple, backward) -> Tensor:
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        out._parents = parents
        out._backward = backward
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _topo_order(root: Tensor) -> list:
    order: list = []
    visited: set = set()
    stack: list = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


# ---------------------------------------------------------------------------
# elementwise and reduction ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        _accumulate(a, -g)

    return _make(-a.data, (a,), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data / b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), backward)


def power(a, p: float) -> Tensor:
    a = _as_tensor(a)
    p = float(p)
    data = a.data ** p

    def backward(g):
        _accumulate(a, g * p * a.data ** (p - 1.0))

    return _make(data, (a,), backward)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    data = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * data)

    return _make(data, (a,), backward)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    data = np.tanh(a.data)

    def backward(g):
        _accumulate(a, g * (1.0 - data * data))

    return _make(data, (a,), backward)


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    # evaluate exp on the non-positive side only so large |x| cannot overflow
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    data = stable_sigmoid(a.data)

    def backward(g):
        _accumulate(a, g * data * (1.0 - data))

    return _make(data, (a,), backward)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = _as_tensor(a)
    x = a.data
    t = np.tanh(_GELU_C * (x + _GELU_A * (x * x * x)))
    data = 0.5 * x * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
        _accumulate(a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du))

    return _make(data, (a,), backward)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(gg, a.data.shape))

    return _make(data, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = 1
        for ax in axes:
            count *= a.data.shape[ax]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def max_along_axis(a, axis: int) -> Tensor:
    """Maximum along one axis; gradient flows to the first (lowest-index) argmax."""
    a = _as_tensor(a)
    idx = np.argmax(a.data, axis=axis)
    data = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis).squeeze(axis)

    def backward(g):
        buf = np.zeros_like(a.data)
        np.put_along_axis(buf, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        _accumulate(a, buf)

    return _make(data, (a,), backward)


def max_pool_axis(a, axis: int = 0) -> Tensor:
    """Elementwise max over one axis (the modality axis); ties go to the lowest index."""
    a = _as_tensor(a)
    if a.data.shape[axis] == 0:
        raise ContractError("max_pool_axis requires a non-empty pooling axis")
    return max_along_axis(a, axis)


def softmax(a) -> Tensor:
    """Softmax along the last axis."""
    a = _as_tensor(a)
    m = a.data.max(axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=-1, keepdims=True)
        _accumulate(a, (g - dot) * data)

    return _make(data, (a,), backward)


# ---------------------------------------------------------------------------
# shape and gather ops
# ---------------------------------------------------------------------------


def reshape(a, shape: tuple) -> Tensor:
    a = _as_tensor(a)
    data = a.data.reshape(shape)

    def backward(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _make(data, (a,), backward)


def transpose(a, axes: tuple) -> Tensor:
    a = _as_tensor(a)
    data = a.data.transpose(axes)

    def backward(g):
        inverse = [0] * len(axes)
        for i, ax in enumerate(axes):
            inverse[ax] = i
        _accumulate(a, g.transpose(inverse))

    return _make(data, (a,), backward)


def getitem(a, idx) -> Tensor:
    """Basic (slice/int) indexing; every input position selected at most once."""
    a = _as_tensor(a)
    data = a.data[idx]

    def backward(g):
        buf = np.zeros_like(a.data)
        buf[idx] = g
        _accumulate(a, buf)

    return _make(data, (a,), backward)


def index_select(a, indices) -> Tensor:
    """Gather rows (axis 0); repeated indices accumulate gradient."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    data = a.data[idx]

    def backward(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        _accumulate(a, buf)

    return _make(data, (a,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]

    def backward(g):
        pos = 0
        for t, n in zip(ts, sizes):
            sl = (slice(None),) * axis + (slice(pos, pos + n),)
            _accumulate(t, g[sl])
            pos += n

    return _make(data, tuple(ts), backward)


def pad3d(a, pad: int) -> Tensor:
    """Zero-pad the three spatial axes of a C×H×W×D tensor by `pad` on each side."""
    a = _as_tensor(a)
    if a.data.ndim != 4:
        raise DimensionError("pad3d expects a C×H×W×D tensor")
    p = int(pad)
    data = np.pad(a.data, ((0, 0), (p, p), (p, p), (p, p)))
    _, H, W, D = a.data.shape

    def backward(g):
        _accumulate(a, g[:, p:p + H, p:p + W, p:p + D])

    return _make(data, (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra and network ops
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError("matmul operands must have at least 2 dimensions")
    data = a.data @ b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _make(data, (a, b), backward)


def linear(x, w, b) -> Tensor:
    """Affine map along the last axis: x[... , F_in] -> [... , F_out]."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if w.data.ndim != 2:
        raise DimensionError("linear weights must be F_out×F_in")
    f_out, f_in = w.data.shape
    if x.data.shape[-1] != f_in:
        raise DimensionError(
            f"linear input trailing extent {x.data.shape[-1]} != F_in {f_in}")
    if b.data.shape != (f_out,):
        raise DimensionError(f"linear bias must have extent {f_out}")
    data = x.data @ w.data.T + b.data

    def backward(g):
        g2 = g.reshape(-1, f_out)
        if w.requires_grad:
            _accumulate(w, g2.T @ x.data.reshape(-1, f_in))
        if b.requires_grad:
            _accumulate(b, g2.sum(axis=0))
        if x.requires_grad:
            _accumulate(x, g @ w.data)

    return _make(data, (x, w, b), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to mean 0 / variance ~1, then scale and shift."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    f = x.data.shape[-1]
    if gamma.data.shape != (f,) or beta.data.shape != (f,):
        raise DimensionError(f"layer_norm affine params must have extent {f}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=lead))
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=lead))
        if x.requires_grad:
            dxhat = g * gamma.data
            dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
            _accumulate(x, dx)

    return _make(data, (x, gamma, beta), backward)


def attention(q, k, v, heads: int) -> Tensor:
    """Multi-head self-attention over a T×E sequence."""
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    if q.data.ndim != 2:
        raise DimensionError("attention expects T×E inputs")
    t, e = q.data.shape
    if k.data.shape != (t, e) or v.data.shape != (t, e):
        raise DimensionError("attention q/k/v shapes must match")
    if e % heads != 0:
        raise ConfigurationError(f"embedding width {e} not divisible by {heads} heads")
    hd = e // heads
    qh = transpose(reshape(q, (t, heads, hd)), (1, 0, 2))
    kh = transpose(reshape(k, (t, heads, hd)), (1, 0, 2))
    vh = transpose(reshape(v, (t, heads, hd)), (1, 0, 2))
    scores = mul(matmul(qh, transpose(kh, (0, 2, 1))), 1.0 / math.sqrt(hd))
    out = matmul(softmax(scores), vh)
    return reshape(transpose(out, (1, 0, 2)), (t, e))


_AXIS_NAMES = ("height", "width", "depth")


def conv3d(x, w, b, stride: int = 1) -> Tensor:
    """3D convolution of a C_in×H×W×D volume with C_out×C_in×k×k×k weights.

    No padding; each spatial extent must satisfy (extent - k) % stride == 0,
    giving outputs of extent (extent - k) / stride + 1. With kernel == stride
    this partitions the volume into non-overlapping patches.
    """
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.data.ndim != 4:
        raise DimensionError("conv3d input must be C_in×H×W×D")
    if w.data.ndim != 5 or not (w.data.shape[2] == w.data.shape[3] == w.data.shape[4]):
        raise DimensionError("conv3d weights must be C_out×C_in×k×k×k with a cubic kernel")
    c_out, c_in, k = w.data.shape[0], w.data.shape[1], w.data.shape[2]
    if x.data.shape[0] != c_in:
        raise DimensionError(
            f"conv3d channel axis mismatch: input has {x.data.shape[0]}, weights expect {c_in}")
    if b.data.shape != (c_out,):
        raise DimensionError(f"conv3d bias must have extent {c_out}")
    stride = int(stride)
    if stride < 1:
        raise ConfigurationError("conv3d stride must be positive")
    spatial = x.data.shape[1:]
    for name, extent in zip(_AXIS_NAMES, spatial):
        if k > extent:
            raise DimensionError(f"conv3d kernel {k} exceeds {name} extent {extent}")
        if (extent - k) % stride != 0:
            raise DimensionError(
                f"conv3d {name} extent {extent} incompatible with kernel {k} stride {stride}")
    ho, wo, do = ((ext - k) // stride + 1 for ext in spatial)

    xd = x.data
    cols = np.empty((c_in, k, k, k, ho, wo, do))
    for i in range(k):
        for j in range(k):
            for l in range(k):
                cols[:, i, j, l] = xd[:, i:i + stride * ho:stride,
                                      j:j + stride * wo:stride,
                                      l:l + stride * do:stride]
    cols = cols.reshape(c_in * k ** 3, ho * wo * do)
    wmat = w.data.reshape(c_out, c_in * k ** 3)
    data = (wmat @ cols + b.data[:, None]).reshape(c_out, ho, wo, do)

    def backward(g):
        gmat = g.reshape(c_out, -1)
        if w.requires_grad:
            _accumulate(w, (gmat @ cols.T).reshape(w.data.shape))
        if b.requires_grad:
            _accumulate(b, gmat.sum(axis=1))
        if x.requires_grad:
            gcols = (wmat.T @ gmat).reshape(c_in, k, k, k, ho, wo, do)
            gx = np.zeros_like(xd)
            for i in range(k):
                for j in range(k):
                    for l in range(k):
                        gx[:, i:i + stride * ho:stride,
                           j:j + stride * wo:stride,
                           l:l + stride * do:stride] += gcols[:, i, j, l]
            _accumulate(x, gx)

    return _make(data, (x, w, b), backward)


def conv_transpose3d(x, w, b, stride: int) -> Tensor:
    """Transposed 3D convolution with kernel == stride (non-overlapping upsampling).

    x: C_in×H×W×D, w: C_in×C_out×k×k×k with k == stride, output C_out×(H·k)×(W·k)×(D·k).
    """
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.data.ndim != 4:
        raise DimensionError("conv_transpose3d input must be C_in×H×W×D")
    if w.data.ndim != 5 or not (w.data.shape[2] == w.data.shape[3] == w.data.shape[4]):
        raise DimensionError("conv_transpose3d weights must be C_in×C_out×k×k×k")
    c_in, c_out, k = w.data.shape[0], w.data.shape[1], w.data.shape[2]
    if k != int(stride):
        raise ConfigurationError("conv_transpose3d supports kernel == stride only")
    if x.data.shape[0] != c_in:
        raise DimensionError(
            f"conv_transpose3d channel axis mismatch: input has {x.data.shape[0]}, weights expect {c_in}")
    if b.data.shape != (c_out,):
        raise DimensionError(f"conv_transpose3d bias must have extent {c_out}")
    _, h, wd, d = x.data.shape
    xd = x.data

    t = np.tensordot(w.data, xd, axes=([0], [0]))       # (C_out,k,k,k,H,W,D)
    out = t.transpose(0, 4, 1, 5, 2, 6, 3).reshape(c_out, h * k, wd * k, d * k)
    data = out + b.data.reshape(-1, 1, 1, 1)

    def backward(g):
        g6 = g.reshape(c_out, h, k, wd, k, d, k).transpose(0, 2, 4, 6, 1, 3, 5)
        if w.requires_grad:
            gw = np.tensordot(g6, xd, axes=([4, 5, 6], [1, 2, 3]))
            _accumulate(w, gw.transpose(4, 0, 1, 2, 3))
        if b.requires_grad:
            _accumulate(b, g.sum(axis=(1, 2, 3)))
        if x.requires_grad:
            _accumulate(x, np.tensordot(w.data, g6, axes=([1, 2, 3, 4], [0, 1, 2, 3])))

    return _make(data, (x, w, b), backward)
