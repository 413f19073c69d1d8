"""Reverse-mode autodiff on numpy arrays, plus the handful of image layers the
guidance network needs.

The engine is a plain tape: every operation records its parents and a closure
that scatters the incoming gradient back onto them.  ``Tensor.backward`` walks
the tape once in reverse topological order.  Nothing here is clever about
memory; graphs are rebuilt per step and garbage-collected wholesale, which is
the right trade for a network this small (~55K parameters).

Storage is float32 by default.  Passing float64 arrays everywhere switches the
whole computation to double precision, which the gradient checks use to get
finite differences with headroom.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError

_FLOAT_DTYPES = (np.float32, np.float64)
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

_grad_enabled = True


class no_grad:
    """Context manager that suppresses tape construction."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A numpy array with an optional gradient and a backward closure.

    ``grad`` is ``None`` until ``backward`` reaches this node; repeated
    backward passes accumulate.  Call ``reset_grad`` between optimizer steps.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._grad_fn = None

    # -- plumbing ---------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _bad_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def reset_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{flag})"

    # -- tape -------------------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from this scalar through the recorded tape.

        Gradients accumulate into ``.grad`` of every reachable tensor that
        requires grad, leaves and intermediates alike.
        """
        if self.data.size != 1:
            raise ContractError(
                f"backward requires a scalar, got shape {self.data.shape}"
            )
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        _accum(self, np.ones_like(self.data))
        for node in reversed(topo):
            if node._grad_fn is not None and node.grad is not None:
                node._grad_fn(node.grad)

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and not isinstance(shape[0], int) else shape)


def _bad_item(t: Tensor):
    raise ContractError(f"item() requires a single element, got shape {t.shape}")


def _accum(t: Tensor, g: np.ndarray) -> None:
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
    t.grad = g if t.grad is None else t.grad + g


def from_op(data: np.ndarray, parents, grad_fn) -> Tensor:
    """Build a tensor from an op result, wiring the tape if grad is enabled.

    ``grad_fn(g)`` must scatter the output gradient ``g`` onto the parents
    with ``_accum`` (exported as ``accumulate_grad``).  Other modules use this
    hook to register losses with handwritten gradients.
    """
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


accumulate_grad = _accum


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# -- elementwise / reduction ops ------------------------------------------


def add(a: Tensor, b) -> Tensor:
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        def bwd_s(g):
            _accum(a, g)
        return from_op(a.data + a.dtype.type(b), (a,), bwd_s)
    b = _as_tensor(b)
    _check_same_shape(a, b, "add")

    def bwd(g):
        _accum(a, g)
        _accum(b, g)

    return from_op(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b) -> Tensor:
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        def bwd_s(g):
            _accum(a, g)
        return from_op(a.data - a.dtype.type(b), (a,), bwd_s)
    b = _as_tensor(b)
    _check_same_shape(a, b, "sub")

    def bwd(g):
        _accum(a, g)
        _accum(b, -g)

    return from_op(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b) -> Tensor:
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        s = a.dtype.type(b)

        def bwd_s(g):
            _accum(a, g * s)

        return from_op(a.data * s, (a,), bwd_s)
    b = _as_tensor(b)
    _check_same_shape(a, b, "mul")

    def bwd(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return from_op(a.data * b.data, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    return from_op(-a.data, (a,), lambda g: _accum(a, -g))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    val = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        gg = g
        if not keepdims and axis is not None:
            gg = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(gg, a.shape).astype(a.dtype, copy=False))

    return from_op(np.asarray(val), (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    val = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.size if axis is None else a.data.size // val.size

    def bwd(g):
        gg = g
        if not keepdims and axis is not None:
            gg = np.expand_dims(g, axis)
        _accum(a, (np.broadcast_to(gg, a.shape) / count).astype(a.dtype, copy=False))

    return from_op(np.asarray(val), (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape) if not isinstance(shape, int) else (shape,)
    return from_op(a.data.reshape(shape), (a,), lambda g: _accum(a, g.reshape(a.shape)))


# -- parameter container ----------------------------------------------------


@dataclass
class LayerParams:
    """Weight/bias pair for one layer."""

    weight: Tensor
    bias: Tensor

    def tensors(self):
        return (self.weight, self.bias)


def conv_params(in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                dtype=np.float32) -> LayerParams:
    """Kaiming fan-in init for a convolution; weight is (out, in, k, k)."""
    fan_in = in_ch * kernel * kernel
    w = rng.standard_normal((out_ch, in_ch, kernel, kernel)) * math.sqrt(2.0 / fan_in)
    b = np.zeros(out_ch)
    return LayerParams(Tensor(w.astype(dtype), requires_grad=True),
                       Tensor(b.astype(dtype), requires_grad=True))


def deconv_params(in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                  dtype=np.float32) -> LayerParams:
    """Init for a transposed convolution; weight is (in, out, k, k)."""
    fan_in = in_ch * kernel * kernel
    w = rng.standard_normal((in_ch, out_ch, kernel, kernel)) * math.sqrt(2.0 / fan_in)
    b = np.zeros(out_ch)
    return LayerParams(Tensor(w.astype(dtype), requires_grad=True),
                       Tensor(b.astype(dtype), requires_grad=True))


def layer_norm_params(channels: int, dtype=np.float32) -> LayerParams:
    return LayerParams(Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
                       Tensor(np.zeros(channels, dtype=dtype), requires_grad=True))


# -- convolution core --------------------------------------------------------


def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    """Unfold (B,C,H,W) into (B, C*k*k, OH*OW) patch columns."""
    b, c, h, w = x.shape
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((b, c, k, k, oh, ow), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            cols[:, :, ki, kj] = x[:, :, ki:ki + stride * oh:stride,
                                   kj:kj + stride * ow:stride]
    return cols.reshape(b, c * k * k, oh * ow), oh, ow


def _col2im(cols: np.ndarray, b: int, c: int, h: int, w: int,
            k: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of ``_im2col``: scatter-add columns back onto the image grid."""
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols6 = cols.reshape(b, c, k, k, oh, ow)
    for ki in range(k):
        for kj in range(k):
            xp[:, :, ki:ki + stride * oh:stride,
               kj:kj + stride * ow:stride] += cols6[:, :, ki, kj]
    if pad:
        return xp[:, :, pad:pad + h, pad:pad + w]
    return xp


def _check_image_input(x: Tensor, params: LayerParams, op: str,
                       weight_in_axis: int) -> None:
    if x.ndim != 4:
        raise DimensionError(f"{op}: input must be (B,C,H,W), got {x.shape}")
    w = params.weight
    if w.ndim != 4:
        raise DimensionError(f"{op}: weight must be 4-d, got {w.shape}")
    kh, kw = w.shape[2], w.shape[3]
    if kh != kw or kh not in (1, 3):
        raise ContractError(f"{op}: kernel must be 1x1 or 3x3, got {kh}x{kw}")
    if x.shape[1] != w.shape[weight_in_axis]:
        raise DimensionError(
            f"{op}: input has {x.shape[1]} channels, weight expects "
            f"{w.shape[weight_in_axis]}"
        )
    if x.dtype != w.dtype:
        raise ContractError(
            f"{op}: input dtype {x.dtype} does not match weight dtype {w.dtype}"
        )


def conv2d(x: Tensor, params: LayerParams, stride: int = 1) -> Tensor:
    """Same-padded convolution; stride 2 halves the spatial size exactly.

    Weight layout is (out_ch, in_ch, k, k) with zero padding (k-1)//2, so a
    3x3 stride-1 kernel preserves H and W and stride 2 maps them to H/2, W/2.
    Input H and W must be divisible by the stride.
    """
    x = _as_tensor(x)
    _check_image_input(x, params, "conv2d", 1)
    if stride not in (1, 2):
        raise ContractError(f"conv2d: stride must be 1 or 2, got {stride}")
    b, cin, h, w = x.shape
    if h % stride or w % stride:
        raise ContractError(
            f"conv2d: spatial size {h}x{w} not divisible by stride {stride}"
        )
    cout = params.weight.shape[0]
    k = params.weight.shape[2]
    pad = (k - 1) // 2
    cols, oh, ow = _im2col(x.data, k, stride, pad)
    wm = params.weight.data.reshape(cout, cin * k * k)
    out = np.matmul(wm, cols) + params.bias.data[:, None]
    out = out.reshape(b, cout, oh, ow)

    def bwd(g):
        gf = g.reshape(b, cout, oh * ow)
        if params.weight.requires_grad:
            _accum(params.weight,
                   np.einsum("bol,bil->oi", gf, cols).reshape(params.weight.shape))
        if params.bias.requires_grad:
            _accum(params.bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = np.matmul(wm.T, gf)
            _accum(x, _col2im(dcols, b, cin, h, w, k, stride, pad))

    return from_op(out, (x, params.weight, params.bias), bwd)


def deconv2d(x: Tensor, params: LayerParams, stride: int = 1) -> Tensor:
    """Transposed convolution, the exact adjoint of ``conv2d``.

    Weight layout is (in_ch, out_ch, k, k).  With k=3, padding 1 and output
    padding stride-1 the output is exactly (H*stride, W*stride), so stride 2
    undoes a stride-2 ``conv2d``.  For zero bias,
    ``<conv2d(x, p, s), y> == <x, deconv2d(y, p', s)>`` holds bit-for-close
    when ``p'`` wraps the same weight array.
    """
    x = _as_tensor(x)
    _check_image_input(x, params, "deconv2d", 0)
    if stride not in (1, 2):
        raise ContractError(f"deconv2d: stride must be 1 or 2, got {stride}")
    b, cin, h, w = x.shape
    cout = params.weight.shape[1]
    k = params.weight.shape[2]
    pad = (k - 1) // 2
    oh, ow = h * stride, w * stride
    wm = params.weight.data.reshape(cin, cout * k * k)
    xf = x.data.reshape(b, cin, h * w)
    cols = np.matmul(wm.T, xf)
    out = _col2im(cols, b, cout, oh, ow, k, stride, pad)
    out = out + params.bias.data[None, :, None, None]

    def bwd(g):
        gcols, goh, gow = _im2col(g, k, stride, pad)
        if x.requires_grad:
            _accum(x, np.matmul(wm, gcols).reshape(b, cin, h, w))
        if params.weight.requires_grad:
            _accum(params.weight,
                   np.einsum("bil,bjl->ij", xf, gcols).reshape(params.weight.shape))
        if params.bias.requires_grad:
            _accum(params.bias, g.sum(axis=(0, 2, 3)))

    return from_op(out, (x, params.weight, params.bias), bwd)


# -- normalization / activations ---------------------------------------------


def layer_norm(x: Tensor, params: LayerParams, eps: float = 1e-5) -> Tensor:
    """Normalize over the channel axis independently at every pixel."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"layer_norm: input must be (B,C,H,W), got {x.shape}")
    c = x.shape[1]
    if params.weight.shape != (c,) or params.bias.shape != (c,):
        raise DimensionError(
            f"layer_norm: affine params must have shape ({c},), got "
            f"{params.weight.shape} / {params.bias.shape}"
        )
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv_std
    gamma = params.weight.data[None, :, None, None]
    out = gamma * xhat + params.bias.data[None, :, None, None]

    def bwd(g):
        if params.weight.requires_grad:
            _accum(params.weight, (g * xhat).sum(axis=(0, 2, 3)))
        if params.bias.requires_grad:
            _accum(params.bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxhat = g * gamma
            m1 = dxhat.mean(axis=1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
            _accum(x, inv_std * (dxhat - m1 - xhat * m2))

    return from_op(out, (x, params.weight, params.bias), bwd)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian error linear unit, x * Phi(x) with the true erf."""
    x = _as_tensor(x)
    phi = 0.5 * (1.0 + erf(x.data * x.dtype.type(_INV_SQRT2)))
    out = x.data * phi

    def bwd(g):
        pdf = np.exp(-0.5 * x.data * x.data) * x.dtype.type(_INV_SQRT2PI)
        _accum(x, g * (phi + x.data * pdf))

    return from_op(out, (x,), bwd)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    x = _as_tensor(x)
    if not 0.0 < slope < 1.0:
        raise ContractError(f"leaky_relu: slope must be in (0,1), got {slope}")
    s = x.dtype.type(slope)
    mask = x.data >= 0

    def bwd(g):
        _accum(x, np.where(mask, g, g * s))

    return from_op(np.where(mask, x.data, x.data * s), (x,), bwd)


def channel_softmax(x: Tensor) -> Tensor:
    """Softmax over the channel axis of a (B,C,H,W) tensor, max-shifted."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"channel_softmax: input must be (B,C,H,W), got {x.shape}")
    if x.shape[1] < 2:
        raise ContractError(
            f"channel_softmax: needs at least 2 channels, got {x.shape[1]}"
        )
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        dot = (g * s).sum(axis=1, keepdims=True)
        _accum(x, s * (g - dot))

    return from_op(s, (x,), bwd)
