"""The guidance network: a five-layer fully-convolutional encoder/decoder.

Two stride-2 convolutions squeeze the image to quarter resolution, three
transposed convolutions bring it back, and a channel softmax turns the last
feature map into n per-pixel weights that sum to one.  With the default
widths (36, 72, 36, 18) and n = 3 the whole thing is 54,435 parameters, small
enough to train per image collection in minutes on a CPU.

Spatial sizes must be divisible by 4 because of the two downsampling stages;
``forward_padded`` reflects the border out to the next multiple and crops the
maps back, so callers can feed arbitrary sizes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, InputRangeError
from .tensor import LayerParams, Tensor

_DEFAULT_WIDTHS = (36, 72, 36, 18)


@dataclass
class SsgNet:
    """Parameters of the guidance network."""

    enc1: LayerParams
    enc2: LayerParams
    dec1: LayerParams
    dec2: LayerParams
    dec3: LayerParams
    ln1: LayerParams
    ln2: LayerParams
    ln3: LayerParams
    ln4: LayerParams
    n_eigenmaps: int
    widths: tuple

    @staticmethod
    def build(n_eigenmaps: int = 3, widths=_DEFAULT_WIDTHS, seed: int = 0,
              dtype=np.float32) -> "SsgNet":
        if n_eigenmaps < 2:
            raise ContractError(
                f"n_eigenmaps must be >= 2 (softmax needs competition between "
                f"channels), got {n_eigenmaps}"
            )
        widths = tuple(int(w) for w in widths)
        if len(widths) != 4 or any(w < 1 for w in widths):
            raise ContractError(f"widths must be 4 positive ints, got {widths}")
        w1, w2, w3, w4 = widths
        rng = np.random.default_rng(seed)
        return SsgNet(
            enc1=T.conv_params(3, w1, 3, rng, dtype=dtype),
            enc2=T.conv_params(w1, w2, 3, rng, dtype=dtype),
            dec1=T.deconv_params(w2, w3, 3, rng, dtype=dtype),
            dec2=T.deconv_params(w3, w4, 3, rng, dtype=dtype),
            dec3=T.deconv_params(w4, n_eigenmaps, 3, rng, dtype=dtype),
            ln1=T.layer_norm_params(w1, dtype=dtype),
            ln2=T.layer_norm_params(w2, dtype=dtype),
            ln3=T.layer_norm_params(w3, dtype=dtype),
            ln4=T.layer_norm_params(w4, dtype=dtype),
            n_eigenmaps=n_eigenmaps,
            widths=widths,
        )

    def parameters(self) -> list:
        """(name, tensor) pairs in a fixed order; the checkpoint order."""
        out = []
        for lname in ("enc1", "enc2", "dec1", "dec2", "dec3",
                      "ln1", "ln2", "ln3", "ln4"):
            layer: LayerParams = getattr(self, lname)
            out.append((f"{lname}.weight", layer.weight))
            out.append((f"{lname}.bias", layer.bias))
        return out

    def astype(self, dtype) -> "SsgNet":
        """A copy of the network with parameters cast to ``dtype``."""
        kwargs = {}
        for lname in ("enc1", "enc2", "dec1", "dec2", "dec3",
                      "ln1", "ln2", "ln3", "ln4"):
            layer: LayerParams = getattr(self, lname)
            kwargs[lname] = LayerParams(
                Tensor(layer.weight.data.astype(dtype), requires_grad=True),
                Tensor(layer.bias.data.astype(dtype), requires_grad=True),
            )
        return SsgNet(n_eigenmaps=self.n_eigenmaps, widths=self.widths, **kwargs)


def param_count(net: SsgNet) -> int:
    return sum(p.size for _, p in net.parameters())


def _check_image_batch(x: Tensor) -> None:
    if x.ndim != 4 or x.shape[1] != 3:
        raise DimensionError(f"input must be (B, 3, H, W), got {x.shape}")
    lo = float(x.data.min())
    hi = float(x.data.max())
    if not (np.isfinite(lo) and np.isfinite(hi)):
        raise InputRangeError("input contains non-finite values")
    if lo < 0.0 or hi > 1.0:
        raise InputRangeError(f"input values must lie in [0, 1], got [{lo}, {hi}]")


def forward(net: SsgNet, image) -> Tensor:
    """Per-pixel guidance maps for a batch of images in [0, 1].

    Output is (B, n, H, W) with every pixel's channel vector on the simplex.
    H and W must be divisible by 4; use ``forward_padded`` otherwise.
    """
    x = image if isinstance(image, Tensor) else Tensor(image)
    _check_image_batch(x)
    _, _, h, w = x.shape
    if h % 4 or w % 4:
        raise ContractError(
            f"spatial size {h}x{w} not divisible by 4; use forward_padded"
        )
    y = T.conv2d(x, net.enc1, stride=2)
    y = T.gelu(T.layer_norm(y, net.ln1))
    y = T.conv2d(y, net.enc2, stride=2)
    y = T.gelu(T.layer_norm(y, net.ln2))
    y = T.deconv2d(y, net.dec1, stride=2)
    y = T.leaky_relu(T.layer_norm(y, net.ln3), slope=0.2)
    y = T.deconv2d(y, net.dec2, stride=2)
    y = T.leaky_relu(T.layer_norm(y, net.ln4), slope=0.2)
    y = T.deconv2d(y, net.dec3, stride=1)
    return T.channel_softmax(y)


def _crop(t: Tensor, h: int, w: int) -> Tensor:
    if t.shape[2] == h and t.shape[3] == w:
        return t
    data = t.data[:, :, :h, :w]

    def bwd(g):
        gg = np.zeros_like(t.data)
        gg[:, :, :h, :w] = g
        T.accumulate_grad(t, gg)

    return T.from_op(data, (t,), bwd)


def forward_padded(net: SsgNet, image) -> Tensor:
    """``forward`` for arbitrary sizes: reflect-pad to a multiple of 4, run
    the network, crop the maps back to the input size."""
    x = image if isinstance(image, Tensor) else Tensor(image)
    _check_image_batch(x)
    _, _, h, w = x.shape
    ph = (-h) % 4
    pw = (-w) % 4
    if ph == 0 and pw == 0:
        return forward(net, x)
    if (h == 1 and ph) or (w == 1 and pw):
        raise ContractError("cannot reflect-pad a 1-pixel dimension")
    if x.requires_grad:
        raise ContractError(
            "forward_padded does not route gradients through the reflect "
            "padding; pad the input to a multiple of 4 yourself"
        )
    padded = np.pad(x.data, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="reflect")
    out = forward(net, Tensor(padded, requires_grad=x.requires_grad))
    return _crop(out, h, w)


@dataclass
class FusionLayer:
    """A 1x1 convolution mixing n guidance maps into c_out channels."""

    params: LayerParams

    @property
    def n_in(self) -> int:
        return self.params.weight.shape[1]

    @property
    def c_out(self) -> int:
        return self.params.weight.shape[0]

    @staticmethod
    def uniform(n_in: int, c_out: int = 1, dtype=np.float32) -> "FusionLayer":
        """Deterministic equal-weight mix, the default for the CLI."""
        if n_in < 1 or c_out < 1:
            raise ContractError("fusion needs n_in >= 1 and c_out >= 1")
        w = np.full((c_out, n_in, 1, 1), 1.0 / n_in, dtype=dtype)
        b = np.zeros(c_out, dtype=dtype)
        return FusionLayer(LayerParams(Tensor(w, requires_grad=True),
                                       Tensor(b, requires_grad=True)))

    @staticmethod
    def from_weights(weights, bias=None, dtype=np.float32) -> "FusionLayer":
        w = np.asarray(weights, dtype=dtype)
        if w.ndim == 1:
            w = w[None, :, None, None]
        elif w.ndim == 2:
            w = w[:, :, None, None]
        if w.ndim != 4 or w.shape[2:] != (1, 1):
            raise DimensionError(f"fusion weights must be (c_out, n_in, 1, 1), got {w.shape}")
        b = np.zeros(w.shape[0], dtype=dtype) if bias is None \
            else np.asarray(bias, dtype=dtype)
        if b.shape != (w.shape[0],):
            raise DimensionError("fusion bias shape mismatch")
        return FusionLayer(LayerParams(Tensor(w, requires_grad=True),
                                       Tensor(b, requires_grad=True)))

    @staticmethod
    def random(n_in: int, c_out: int = 1, seed: int = 0,
               dtype=np.float32) -> "FusionLayer":
        rng = np.random.default_rng(seed)
        return FusionLayer(T.conv_params(n_in, c_out, 1, rng, dtype=dtype))


def fuse_guidance(fusion: FusionLayer, maps) -> Tensor:
    """Mix (B, n, H, W) guidance maps into (B, c_out, H, W) guidance."""
    y = maps if isinstance(maps, Tensor) else Tensor(maps)
    if y.ndim != 4:
        raise DimensionError(f"maps must be (B, n, H, W), got {y.shape}")
    if y.shape[1] != fusion.n_in:
        raise DimensionError(
            f"fusion expects {fusion.n_in} maps, got {y.shape[1]}"
        )
    return T.conv2d(y, fusion.params, stride=1)
