"""Dense NCHW tensors with tape-based reverse-mode automatic differentiation.

Covers exactly the operator set the segmentation network needs: dilated
convolution, bilinear upsampling, batched matmul, the pointwise family,
softmax, reductions/pooling and layout ops. Values are float32 by default
(float64 supported, used by gradient checks); reductions, convolution inner
products and interpolation accumulate in float64 before casting back, and
convolution adds its terms in a fixed (ci, kh, kw) order so results are
bit-identical to a naive triple-loop reference.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "NumericalError",
    "Tensor",
    "Parameter",
    "add",
    "sub",
    "mul",
    "relu",
    "sigmoid",
    "softplus",
    "reciprocal",
    "sqrt",
    "scale",
    "add_const",
    "softmax_axis",
    "tsum",
    "tmean",
    "max_all",
    "conv2d",
    "conv2d_output_extent",
    "avg_pool2d",
    "bilinear_upsample",
    "interp_matrix",
    "matmul",
    "concat",
    "narrow",
    "permute",
    "reshape",
    "expand_axis",
    "grad_check",
]

_F64 = np.float64


class NumericalError(ArithmeticError):
    """A forward or backward pass produced NaN or Inf."""


def _assert_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericalError(f"non-finite values in {what}")


def _as_pair(v, name: str) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


class Tensor:
    """N-dimensional array of reals with optional gradient tracking.

    Data is immutable after creation except for the grad buffer (and the
    in-place updates the optimizer applies to parameters).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        _assert_finite(arr, "tensor data")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-replay the tape from a scalar root.

        Every reachable grad-tracked tensor ends up holding d(root)/d(self);
        contributions accumulate additively across fan-out.
        """
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar root")
        if not self.requires_grad:
            raise ValueError("backward() on a tensor without gradient tracking")
        topo: list[Tensor] = []
        visited: set[int] = {id(self)}
        stack: list[tuple[Tensor, object]] = [(self, iter(self._parents))]
        while stack:
            node, it = stack[-1]
            nxt = None
            for p in it:
                if p.requires_grad and id(p) not in visited:
                    nxt = p
                    break
            if nxt is None:
                topo.append(node)
                stack.pop()
            else:
                visited.add(id(nxt))
                stack.append((nxt, iter(nxt._parents)))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad.astype(_F64, copy=False))
        for node in topo:
            if node.grad is not None:
                _assert_finite(node.grad, f"gradient of {node._op}")

    # operator sugar; scalars are treated as captured constants
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_const(self, float(other))

    def __radd__(self, other):
        return add_const(self, float(other))

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_const(self, -float(other))

    def __rsub__(self, other):
        return add_const(scale(self, -1.0), float(other))

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def softplus(self):
        return softplus(self)

    def reciprocal(self):
        return reciprocal(self)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def permute(self, *axes):
        return permute(self, axes if len(axes) > 1 else axes[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, grad={self.requires_grad})"


class Parameter:
    """A named, grad-tracked tensor; the name is the checkpoint key."""

    __slots__ = ("name", "value")

    def __init__(self, name: str, value: Tensor):
        value.requires_grad = True
        self.name = name
        self.value = value

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def _result_dtype(*tensors: Tensor):
    return np.result_type(*[t.data.dtype for t in tensors])


def _from_op(data64: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    arr = data64.astype(_result_dtype(*parents), copy=False)
    _assert_finite(arr, f"output of {op}")
    out.data = arr
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out._op = op
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _accum(p: Tensor, g: np.ndarray) -> None:
    if not p.requires_grad:
        return
    g = g.astype(p.data.dtype, copy=False)
    if p.grad is None:
        p.grad = np.zeros_like(p.data)
    p.grad += g


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# pointwise family


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    data = a.data.astype(_F64) + b.data.astype(_F64)

    def bw(g):
        _accum(a, g)
        _accum(b, g)

    return _from_op(data, (a, b), bw, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    data = a.data.astype(_F64) - b.data.astype(_F64)

    def bw(g):
        _accum(a, g)
        _accum(b, -g)

    return _from_op(data, (a, b), bw, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    a64 = a.data.astype(_F64)
    b64 = b.data.astype(_F64)

    def bw(g):
        _accum(a, g * b64)
        _accum(b, g * a64)

    return _from_op(a64 * b64, (a, b), bw, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def bw(g):
        _accum(x, g * c)

    return _from_op(x.data.astype(_F64) * c, (x,), bw, "scale")


def add_const(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def bw(g):
        _accum(x, g)

    return _from_op(x.data.astype(_F64) + c, (x,), bw, "add_const")


def relu(x: Tensor) -> Tensor:
    x64 = x.data.astype(_F64)
    mask = x64 > 0.0

    def bw(g):
        _accum(x, g * mask)

    return _from_op(np.where(mask, x64, 0.0), (x,), bw, "relu")


def _sigmoid64(x64: np.ndarray) -> np.ndarray:
    # stable on both signs: never exponentiates a positive argument
    z = np.exp(-np.abs(x64))
    return np.where(x64 >= 0.0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid64(x.data.astype(_F64))

    def bw(g):
        _accum(x, g * y * (1.0 - y))

    return _from_op(y, (x,), bw, "sigmoid")


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x), evaluated as max(x, 0) + log1p(e^-|x|)."""
    x64 = x.data.astype(_F64)
    data = np.maximum(x64, 0.0) + np.log1p(np.exp(-np.abs(x64)))
    sig = _sigmoid64(x64)

    def bw(g):
        _accum(x, g * sig)

    return _from_op(data, (x,), bw, "softplus")


def reciprocal(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore"):
        y = 1.0 / x.data.astype(_F64)

    def bw(g):
        _accum(x, -g * y * y)

    return _from_op(y, (x,), bw, "reciprocal")


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data.astype(_F64))

    def bw(g):
        _accum(x, g * 0.5 / y)

    return _from_op(y, (x,), bw, "sqrt")


def softmax_axis(x: Tensor, axis: int) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax_axis: axis {axis} out of bounds for ndim {x.ndim}")
    x64 = x.data.astype(_F64)
    shifted = x64 - np.max(x64, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True, dtype=_F64)

    def bw(g):
        inner = np.sum(g * y, axis=axis, keepdims=True, dtype=_F64)
        _accum(x, (g - inner) * y)

    return _from_op(y, (x,), bw, "softmax")


# ---------------------------------------------------------------------------
# reductions


def tsum(x: Tensor, axis=None) -> Tensor:
    data = np.sum(x.data, axis=axis, dtype=_F64)

    def bw(g):
        if axis is None:
            _accum(x, np.broadcast_to(g, x.shape))
        else:
            _accum(x, np.broadcast_to(np.expand_dims(g, axis), x.shape))

    return _from_op(np.asarray(data), (x,), bw, "sum")


def tmean(x: Tensor, axis=None) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    s = tsum(x, axis)
    return scale(s, 1.0 / count)


def max_all(x: Tensor) -> Tensor:
    """Global max; the subgradient routes to the first maximal element."""
    data = np.max(x.data.astype(_F64))
    idx = int(np.argmax(x.data))

    def bw(g):
        d = np.zeros(x.shape, dtype=_F64)
        d.flat[idx] = g.reshape(-1)[0] if g.ndim else g
        _accum(x, d)

    return _from_op(np.asarray(data), (x,), bw, "max")


# ---------------------------------------------------------------------------
# convolution and pooling


def conv2d_output_extent(n: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None,
           stride=1, padding=0, dilation=1) -> Tensor:
    """2-D convolution with zero padding, stride and dilation, NCHW/OIKhKw.

    Inner products accumulate in float64 in a fixed (ci, kh, kw) term order,
    so the result is bit-identical to a sequential per-element loop.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("conv2d: x must be NCHW and w must be OIKhKw")
    n, ci, h, wd = x.shape
    co, ci_w, kh, kw = w.shape
    if ci != ci_w:
        raise ValueError(f"conv2d: channel mismatch (input {ci}, kernel {ci_w})")
    sh, sw = _as_pair(stride, "stride")
    ph, pw = _as_pair(padding, "padding")
    dh, dw = _as_pair(dilation, "dilation")
    if sh < 1 or sw < 1 or dh < 1 or dw < 1 or ph < 0 or pw < 0:
        raise ValueError("conv2d: stride/dilation must be >= 1 and padding >= 0")
    ho = conv2d_output_extent(h, kh, sh, ph, dh)
    wo = conv2d_output_extent(wd, kw, sw, pw, dw)
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d: non-positive output extent ({ho}, {wo})")
    if b is not None and b.shape != (co,):
        raise ValueError("conv2d: bias must have one value per output channel")

    hslices = [slice(i * dh, i * dh + (ho - 1) * sh + 1, sh) for i in range(kh)]
    wslices = [slice(j * dw, j * dw + (wo - 1) * sw + 1, sw) for j in range(kw)]

    xp = np.pad(x.data.astype(_F64), ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    w64 = w.data.astype(_F64)
    out = np.zeros((n, co, ho, wo), dtype=_F64)
    tmp = np.empty_like(out)
    for c in range(ci):
        for i, hs in enumerate(hslices):
            for j, ws in enumerate(wslices):
                np.multiply(xp[:, c, hs, ws][:, None], w64[None, :, c, i, j, None, None], out=tmp)
                out += tmp
    if b is not None:
        out += b.data.astype(_F64)[None, :, None, None]

    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        # gradients accumulate per kernel tap (deterministic but BLAS-ordered;
        # only the forward pins a sequential accumulation order)
        if b is not None:
            _accum(b, g.sum(axis=(0, 2, 3)))
        dw_arr = np.zeros_like(w64) if w.requires_grad else None
        dxp = np.zeros_like(xp) if x.requires_grad else None
        for i, hs in enumerate(hslices):
            for j, ws in enumerate(wslices):
                if dw_arr is not None:
                    dw_arr[:, :, i, j] = np.tensordot(g, xp[:, :, hs, ws], axes=([0, 2, 3], [0, 2, 3]))
                if dxp is not None:
                    contrib = np.tensordot(g, w64[:, :, i, j], axes=([1], [0]))
                    dxp[:, :, hs, ws] += np.moveaxis(contrib, 3, 1)
        if dw_arr is not None:
            _accum(w, dw_arr)
        if dxp is not None:
            _accum(x, dxp[:, :, ph:ph + h, pw:pw + wd])

    return _from_op(out, parents, bw, "conv2d")


def avg_pool2d(x: Tensor, k, stride=None, padding=0) -> Tensor:
    """Average pooling whose divisor is the full window size, zero padding included."""
    if x.ndim != 4:
        raise ValueError("avg_pool2d: x must be NCHW")
    kh, kw = _as_pair(k, "k")
    sh, sw = _as_pair(stride if stride is not None else k, "stride")
    ph, pw = _as_pair(padding, "padding")
    n, c, h, wd = x.shape
    if h + 2 * ph < kh or wd + 2 * pw < kw:
        raise ValueError("avg_pool2d: window larger than padded input")
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1

    xp = np.pad(x.data.astype(_F64), ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out = np.zeros((n, c, ho, wo), dtype=_F64)
    for i in range(kh):
        hs = slice(i, i + (ho - 1) * sh + 1, sh)
        for j in range(kw):
            out += xp[:, :, hs, slice(j, j + (wo - 1) * sw + 1, sw)]
    out /= kh * kw

    def bw(g):
        dxp = np.zeros_like(xp)
        gi = g / (kh * kw)
        for i in range(kh):
            hs = slice(i, i + (ho - 1) * sh + 1, sh)
            for j in range(kw):
                dxp[:, :, hs, slice(j, j + (wo - 1) * sw + 1, sw)] += gi
        _accum(x, dxp[:, :, ph:ph + h, pw:pw + wd])

    return _from_op(out, (x,), bw, "avg_pool2d")


def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic (n_out, n_in) bilinear sampling matrix.

    Sample centers follow the half-pixel convention (i + 0.5) * n_in/n_out - 0.5,
    clamped to the valid range.
    """
    m = np.zeros((n_out, n_in), dtype=_F64)
    pos = (np.arange(n_out, dtype=_F64) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1.0)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = pos - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - w1)
    np.add.at(m, (rows, i1), w1)
    return m


def bilinear_upsample(x: Tensor, factor=None, size: tuple[int, int] | None = None) -> Tensor:
    """Bilinear enlargement to an integer factor or an explicit target size."""
    if x.ndim != 4:
        raise ValueError("bilinear_upsample: x must be NCHW")
    n, c, h, w = x.shape
    if size is not None:
        ho, wo = int(size[0]), int(size[1])
    elif factor is not None:
        f = float(factor)
        if f <= 0:
            raise ValueError("bilinear_upsample: factor must be positive")
        ho, wo = int(math.floor(h * f)), int(math.floor(w * f))
    else:
        raise ValueError("bilinear_upsample: give factor or size")
    if ho < h or wo < w:
        raise ValueError(f"bilinear_upsample: downscaling requested ({h}x{w} -> {ho}x{wo})")
    mh = interp_matrix(h, ho)
    mw = interp_matrix(w, wo)
    out = np.matmul(np.matmul(mh, x.data.astype(_F64)), mw.T)

    def bw(g):
        _accum(x, np.matmul(np.matmul(mh.T, g), mw))

    return _from_op(out, (x,), bw, "bilinear_upsample")


# ---------------------------------------------------------------------------
# matmul and layout


def _unbroadcast_batch(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax in range(g.ndim - 2):
        if shape[ax] == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product (...M,K) x (...K,N); batch extents broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul: operands must have at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner extents disagree ({a.shape} x {b.shape})")
    a64 = a.data.astype(_F64)
    b64 = b.data.astype(_F64)
    out = np.matmul(a64, b64)

    def bw(g):
        _accum(a, _unbroadcast_batch(np.matmul(g, np.swapaxes(b64, -1, -2)), a.shape))
        _accum(b, _unbroadcast_batch(np.matmul(np.swapaxes(a64, -1, -2), g), b.shape))

    return _from_op(out, (a, b), bw, "matmul")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    ts = list(tensors)
    if not ts:
        raise ValueError("concat: empty input")
    base = list(ts[0].shape)
    for t in ts[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(other[i] != base[i] for i in range(len(base)) if i != axis % len(base)):
            raise ValueError("concat: non-concat extents differ")
    data = np.concatenate([t.data.astype(_F64) for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _from_op(data, tuple(ts), bw, "concat")


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis; the gradient scatters back in place."""
    if not 0 <= start and start + length <= x.shape[axis]:
        raise ValueError("narrow: slice out of range")
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def bw(g):
        d = np.zeros(x.shape, dtype=_F64)
        d[sl] = g
        _accum(x, d)

    return _from_op(x.data[sl].astype(_F64), (x,), bw, "narrow")


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ValueError(f"permute: invalid axis order {axes}")
    inv = np.argsort(axes)

    def bw(g):
        _accum(x, np.transpose(g, inv))

    return _from_op(np.transpose(x.data.astype(_F64), axes), (x,), bw, "permute")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in (shape if isinstance(shape, (tuple, list)) else (shape,)))
    if int(np.prod(shape)) != x.size:
        raise ValueError(f"reshape: cannot view {x.shape} as {shape}")

    def bw(g):
        _accum(x, g.reshape(x.shape))

    return _from_op(x.data.astype(_F64).reshape(shape), (x,), bw, "reshape")


def expand_axis(x: Tensor, axis: int, n: int) -> Tensor:
    """Repeat a unit axis n times; the gradient sums back over the copies."""
    if x.shape[axis] != 1:
        raise ValueError(f"expand_axis: axis {axis} has extent {x.shape[axis]}, need 1")

    def bw(g):
        _accum(x, g.sum(axis=axis, keepdims=True))

    return _from_op(np.repeat(x.data.astype(_F64), n, axis=axis), (x,), bw, "expand_axis")


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-3,
               indices: Sequence[int] | None = None) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    The function is evaluated on float64 copies; the error at each checked
    element is |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    x64 = Tensor(x.data.astype(_F64), requires_grad=True)
    y = f(x64)
    if y.size != 1:
        raise ValueError("grad_check: f must be scalar-valued")
    y.backward()
    analytic = np.zeros(x.shape, dtype=_F64) if x64.grad is None else x64.grad.copy()
    base = x64.data
    idxs = range(base.size) if indices is None else indices
    worst = 0.0
    for i in idxs:
        xp = base.copy()
        xp.flat[i] += eps
        fp = float(f(Tensor(xp)).data)
        xm = base.copy()
        xm.flat[i] -= eps
        fm = float(f(Tensor(xm)).data)
        numeric = (fp - fm) / (2.0 * eps)
        a = float(analytic.flat[i])
        rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
        worst = max(worst, rel)
    return worst
