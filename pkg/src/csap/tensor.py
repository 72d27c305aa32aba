"""Dense tensors with tape-style reverse-mode differentiation.

Every tensor wraps a row-major NumPy buffer. Operations that touch a tensor
with ``requires_grad`` record their parents and a backward closure on the
output; :func:`backward` orders that record topologically and sweeps it once.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtr

from .errors import GraphStateError, NumericError, ShapeError

MAX_RANK = 5
FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """Immutable-by-convention n-d array of float32 or float64 scalars."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            if dtype is not None:
                raise TypeError(f"unsupported dtype {arr.dtype}")
            arr = arr.astype(np.float32)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds the rank cap of {MAX_RANK}")
        if any(n < 1 for n in arr.shape):
            raise ShapeError(f"all extents must be >= 1, got {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = ""

    # -- metadata -------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ShapeError(f"tensor of shape {self.shape} is not a scalar")

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def astype(self, dtype) -> Tensor:
        src = self
        target = np.dtype(dtype)

        def bw(g):
            return (g.astype(src.dtype),)

        return _result(self.data.astype(target), (self,), bw, "astype")

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operators --------------------------------------------------------
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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False) -> Tensor:
        return mean(self, axis, keepdims)

    def backward(self) -> None:
        backward(self)


class Parameter(Tensor):
    """Trainable leaf tensor; its gradient buffer always matches its shape."""

    __slots__ = ("name",)

    def __init__(self, data, dtype=None, name: str = ""):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.grad = np.zeros_like(self.data)
        self.name = name

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def assign(self, value) -> None:
        """Replace the value in place; shape must be preserved."""
        arr = np.asarray(value, dtype=self.data.dtype)
        if arr.shape != self.data.shape:
            raise ShapeError(f"cannot assign {arr.shape} to parameter of shape {self.shape}")
        self.data = np.ascontiguousarray(arr)

    def __repr__(self):
        return f"Parameter(name={self.name!r}, shape={self.shape}, dtype={self.dtype})"


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], bw: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = bw
        out._op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- computation graph ----------------------------------------------------
class ComputeGraph:
    """Topologically ordered record of the operations that produced ``output``."""

    def __init__(self, output: Tensor):
        self.output = output
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.nodes = order

    def __len__(self):
        return len(self.nodes)

    def reverse_sweep(self, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(self.output): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad = node.grad + g.astype(node.dtype, copy=False)
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg
            # one sweep per recorded forward
            node._parents = ()
            node._backward = None
            node._op = "consumed"


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._op == "consumed":
        raise GraphStateError("graph already consumed by a previous backward pass")
    if loss._backward is None and not loss.requires_grad:
        raise GraphStateError("backward called before a recorded forward pass")
    graph = ComputeGraph(loss)
    graph.reverse_sweep(np.ones_like(loss.data))


# -- elementwise ----------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _result(a.data / b.data, (a, b), bw, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    def bw(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _result(a.data**exponent, (a,), bw, "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return _result(out, (a,), bw, "exp")


def log(a: Tensor) -> Tensor:
    def bw(g):
        return (g / a.data,)

    return _result(np.log(a.data), (a,), bw, "log")


def gelu(a: Tensor) -> Tensor:
    """GELU with the exact Gaussian CDF."""
    x = a.data
    cdf = ndtr(x)

    def bw(g):
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        return (g * (cdf + x * pdf),)

    return _result((x * cdf).astype(x.dtype, copy=False), (a,), bw, "gelu")


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# -- shape ----------------------------------------------------------------
def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    def bw(g):
        return (g.reshape(a.shape),)

    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.shape} to {tuple(shape)}") from exc
    return _result(out, (a,), bw, "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inverse),)

    return _result(a.data.transpose(axes), (a,), bw, "transpose")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"cannot concatenate shapes {[t.shape for t in tensors]}") from exc
    return _result(out, tensors, bw, "concat")


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = range(a.ndim) if axis is None else np.atleast_1d(axis)
    count = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


# -- linear algebra -------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError as exc:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}") from exc

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight (+ bias)`` with ``weight`` stored as (in, out)."""
    out = matmul(x, weight)
    return out if bias is None else out + bias


# -- normalization --------------------------------------------------------
def _check_finite(x: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{op} received non-finite input")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} invalid for shape {x.shape}")
    _check_finite(x.data, "softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite(x.data, "log_softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), bw, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last (channel) axis, then scale and shift."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match channels {x.shape[-1]}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        lead = tuple(range(x.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gamma.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgamma, dbeta

    return _result(out.astype(x.dtype, copy=False), (x, gamma, beta), bw, "layer_norm")


# -- spatial resampling (last two axes are H, W) --------------------------
def avg_pool2d(x: Tensor, r: int) -> Tensor:
    """Mean over non-overlapping r x r windows."""
    *lead, h, w = x.shape
    if r < 1 or h % r or w % r:
        raise ShapeError(f"pool ratio {r} does not divide spatial extents {h}x{w}")
    blocks = x.data.reshape(*lead, h // r, r, w // r, r)
    # float64 accumulation keeps constant windows exact
    out = (blocks.astype(np.float64).sum(axis=(-3, -1)) / (r * r)).astype(x.dtype)

    def bw(g):
        g = np.repeat(np.repeat(g, r, axis=-2), r, axis=-1) / (r * r)
        return (g.astype(x.dtype, copy=False),)

    return _result(out, (x,), bw, "avg_pool2d")


def adaptive_windows(n_in: int, n_out: int) -> list[tuple[int, int]]:
    """Window [floor(i*n_in/n_out), ceil((i+1)*n_in/n_out)) for each output cell."""
    return [(i * n_in // n_out, -(-(i + 1) * n_in // n_out)) for i in range(n_out)]


def _indicator(n_in: int, n_out: int) -> np.ndarray:
    m = np.zeros((n_out, n_in))
    for i, (lo, hi) in enumerate(adaptive_windows(n_in, n_out)):
        m[i, lo:hi] = 1.0
    return m


def _size2(size) -> tuple[int, int]:
    if isinstance(size, (tuple, list)):
        return int(size[0]), int(size[1])
    return int(size), int(size)


def adaptive_avg_pool2d(x: Tensor, size) -> Tensor:
    """Pool the last two axes to ``size`` (int or (h, w)) with floor/ceil windows."""
    *_, h, w = x.shape
    sh, sw = _size2(size)
    if sh < 1 or sw < 1:
        raise ShapeError(f"output size must be >= 1, got {(sh, sw)}")
    ind_h, ind_w = _indicator(h, sh), _indicator(w, sw)
    counts = np.outer(ind_h.sum(1), ind_w.sum(1))
    out = ((ind_h @ x.data.astype(np.float64) @ ind_w.T) / counts).astype(x.dtype)

    def bw(g):
        return ((ind_h.T @ (g / counts) @ ind_w).astype(x.dtype),)

    return _result(out, (x,), bw, "adaptive_avg_pool2d")


def _bilinear_taps(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.maximum(src, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    return i0, i1, lam


def interpolation_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Dense (n_out, n_in) half-pixel bilinear weights along one axis."""
    i0, i1, lam = _bilinear_taps(n_in, n_out)
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), i0), 1.0 - lam)
    np.add.at(m, (np.arange(n_out), i1), lam)
    return m


def bilinear_resize(x: Tensor, height: int, width: int) -> Tensor:
    """Half-pixel bilinear resize of the last two axes (align-corners off)."""
    if height < 1 or width < 1:
        raise ShapeError(f"target extents must be >= 1, got {(height, width)}")
    *_, h, w = x.shape
    dt = x.dtype
    h0, h1, lh = _bilinear_taps(h, height)
    w0, w1, lw = _bilinear_taps(w, width)
    # lerp form a + t*(b - a): constants pass through bit-exactly
    a = np.take(x.data, h0, axis=-2)
    rows = a + lh.astype(dt)[:, None] * (np.take(x.data, h1, axis=-2) - a)
    b = np.take(rows, w0, axis=-1)
    out = b + lw.astype(dt) * (np.take(rows, w1, axis=-1) - b)
    mh = interpolation_matrix(h, height).astype(dt)
    mw = interpolation_matrix(w, width).astype(dt)

    def bw(g):
        return (mh.T @ g @ mw,)

    return _result(out.astype(dt, copy=False), (x,), bw, "bilinear_resize")


# -- convolutions (NCHW) --------------------------------------------------
def conv1x1(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Pointwise convolution; ``weight`` is (C_out, C_in)."""
    if x.ndim != 4 or weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise ShapeError(f"conv1x1 shape mismatch: input {x.shape}, weight {weight.shape}")
    xt = transpose(x, (0, 2, 3, 1))
    out = matmul(xt, transpose(weight, (1, 0)))
    if bias is not None:
        out = out + bias
    return transpose(out, (0, 3, 1, 2))


def depthwise_conv3x3(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-channel 3x3 convolution, stride 1, zero same-padding; ``weight`` is (C, 3, 3)."""
    if x.ndim != 4 or weight.shape != (x.shape[1], 3, 3):
        raise ShapeError(f"depthwise shape mismatch: input {x.shape}, weight {weight.shape}")
    _, c, h, w = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros_like(x.data)
    for i in range(3):
        for j in range(3):
            out += weight.data[None, :, i, j, None, None] * xp[:, :, i : i + h, j : j + w]
    if bias is not None:
        out += bias.data[None, :, None, None]

    def bw(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(weight.data)
        for i in range(3):
            for j in range(3):
                gxp[:, :, i : i + h, j : j + w] += g * weight.data[None, :, i, j, None, None]
                gw[:, i, j] = (g * xp[:, :, i : i + h, j : j + w]).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gxp[:, :, 1:-1, 1:-1], gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, bw, "depthwise_conv3x3")


def conv3x3(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Dense 3x3 convolution with padding 1; ``weight`` is (C_out, C_in, 3, 3)."""
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[1:] != (x.shape[1], 3, 3):
        raise ShapeError(f"conv3x3 shape mismatch: input {x.shape}, weight {weight.shape}")
    b, c, h, w = x.shape
    cout = weight.shape[0]
    ho, wo = (h - 1) // stride + 1, (w - 1) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((b, ho, wo, c, 3, 3), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            patch = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            cols[..., i, j] = patch.transpose(0, 2, 3, 1)
    cols = cols.reshape(b * ho * wo, c * 9)
    wmat = weight.data.reshape(cout, c * 9)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(b, ho, wo, cout).transpose(0, 3, 1, 2)

    def bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(b * ho * wo, cout)
        gw = (gmat.T @ cols).reshape(weight.shape)
        gcols = (gmat @ wmat).reshape(b, ho, wo, c, 3, 3)
        gxp = np.zeros_like(xp)
        for i in range(3):
            for j in range(3):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                    ..., i, j
                ].transpose(0, 3, 1, 2)
        gb = gmat.sum(axis=0) if bias is not None else None
        return gxp[:, :, 1:-1, 1:-1], gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(np.ascontiguousarray(out), parents, bw, "conv3x3")


# -- layout helpers -------------------------------------------------------
def tokens_to_spatial(x: Tensor, height: int, width: int) -> Tensor:
    """(B, N, D) tokens to (B, D, H, W) maps."""
    b, n, d = x.shape
    if n != height * width:
        raise ShapeError(f"token count {n} != {height}x{width}")
    return transpose(x, (0, 2, 1)).reshape(b, d, height, width)


def spatial_to_tokens(x: Tensor) -> Tensor:
    """(B, D, H, W) maps to (B, H*W, D) tokens."""
    b, d, h, w = x.shape
    return transpose(x.reshape(b, d, h * w), (0, 2, 1))


# -- losses ---------------------------------------------------------------
def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean per-pixel cross-entropy; ``logits`` is (B, K, ...), ``labels`` (B, ...)."""
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    _check_finite(logits.data, "cross_entropy")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    picked = np.take_along_axis(logp, labels[:, None].astype(np.int64), axis=1)
    count = labels.size
    loss = np.asarray(-picked.sum() / count, dtype=z.dtype)

    def bw(g):
        grad = np.exp(logp)
        np.put_along_axis(
            grad,
            labels[:, None].astype(np.int64),
            np.take_along_axis(grad, labels[:, None].astype(np.int64), axis=1) - 1.0,
            axis=1,
        )
        return (grad * (g / count),)

    return _result(loss, (logits,), bw, "cross_entropy")

