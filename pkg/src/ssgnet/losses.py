"""Unsupervised training objective and the optimizer driving it.

The eigen term pulls each guidance channel toward the bottom of the graph
Laplacian's spectrum (summed channel quadratic forms, averaged over the
batch).  The spatial term is a concave double-well penalty
``|y|^g + |1 - y|^g - 1`` with g in (0, 1), zero exactly at 0 and 1 and
positive in between, so it pushes every pixel's weights toward a hard
assignment while the softmax keeps them on the simplex.  The total is
``eigen + lambda * spatial``, optionally divided by the pixel count.

The quadratic form and the penalty register themselves on the autodiff tape
with handwritten gradients; the sparsity term keeps a subgradient of zero in
a small band around its kinks at 0 and 1.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .graph import GraphKind, SparseGraph, build_image_graph
from .model import SsgNet, forward_padded
from .tensor import Tensor

_KINK_BAND = 1e-6


@dataclass
class LossConfig:
    """Loss weights; defaults match the training recipe used throughout."""

    lam: float = 40.0
    gamma: float = 0.9
    normalize_per_pixel: bool = False

    def __post_init__(self):
        if not (0.0 < self.gamma < 1.0):
            raise ContractError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.lam < 0.0:
            raise ContractError(f"lambda must be >= 0, got {self.lam}")


def _check_maps(y: Tensor) -> tuple:
    if y.ndim != 4:
        raise DimensionError(f"maps must be (B, n, H, W), got {y.shape}")
    return y.shape


def _as_lap_list(laps, batch: int, n_pixels: int) -> list:
    if isinstance(laps, SparseGraph):
        laps = [laps] * batch
    laps = list(laps)
    if len(laps) != batch:
        raise DimensionError(
            f"need one Laplacian per batch item, got {len(laps)} for {batch}"
        )
    for lap in laps:
        if lap.kind is not GraphKind.LAPLACIAN:
            raise ContractError("eigen loss expects Laplacian graphs")
        if lap.n_nodes != n_pixels:
            raise DimensionError(
                f"Laplacian has {lap.n_nodes} nodes for {n_pixels} pixels"
            )
    return laps


def eigen_loss(y, laps) -> Tensor:
    """Mean over the batch of the summed channel quadratic forms y_k^T L y_k.

    ``laps`` is one Laplacian shared by the batch or a sequence of one per
    item.  Accumulation runs in float64 regardless of the map dtype; the
    gradient ``2 L y / B`` is cast back to the map dtype.
    """
    y = y if isinstance(y, Tensor) else Tensor(y)
    b, n, h, w = _check_maps(y)
    laps = _as_lap_list(laps, b, h * w)
    yd = y.data.reshape(b, n, h * w).astype(np.float64, copy=False)
    ly = np.empty((b, n, h * w), dtype=np.float64)
    total = 0.0
    for i in range(b):
        for k in range(n):
            ly[i, k] = laps[i].matvec(yd[i, k])
            total += float(yd[i, k] @ ly[i, k])
    val = total / b

    def bwd(g):
        scale = 2.0 * float(g) / b
        T.accumulate_grad(y, (scale * ly).reshape(y.shape).astype(y.dtype))

    return T.from_op(np.asarray(val, dtype=y.dtype), (y,), bwd)


def spatial_loss(y, gamma: float = 0.9) -> Tensor:
    """Mean over the batch of the summed per-pixel sparsity penalties.

    Each entry contributes ``|y|^gamma + |1 - y|^gamma`` and each pixel
    subtracts 1, so a pixel whose channel weights sum to one scores zero
    exactly when one channel owns it outright.  Within ``1e-6`` of the kinks
    at 0 and 1 the corresponding gradient term is taken to be zero.
    """
    if not (0.0 < gamma < 1.0):
        raise ContractError(f"gamma must lie in (0, 1), got {gamma}")
    y = y if isinstance(y, Tensor) else Tensor(y)
    b, n, h, w = _check_maps(y)
    a0 = np.abs(y.data)
    a1 = np.abs(1.0 - y.data)
    pen = a0 ** gamma + a1 ** gamma
    val = (float(pen.sum(dtype=np.float64)) - b * h * w) / b

    def bwd(g):
        scale = gamma * float(g) / b
        t0 = np.where(a0 <= _KINK_BAND, 0.0,
                      np.sign(y.data) * np.maximum(a0, _KINK_BAND) ** (gamma - 1.0))
        t1 = np.where(a1 <= _KINK_BAND, 0.0,
                      np.sign(1.0 - y.data) * np.maximum(a1, _KINK_BAND) ** (gamma - 1.0))
        T.accumulate_grad(y, (scale * (t0 - t1)).astype(y.dtype))

    return T.from_op(np.asarray(val, dtype=y.dtype), (y,), bwd)


def _combine(eigen: Tensor, spatial: Tensor, cfg: LossConfig,
             n_pixels: int) -> Tensor:
    total = eigen + spatial * float(cfg.lam)
    if cfg.normalize_per_pixel:
        total = total * (1.0 / n_pixels)
    return total


def total_loss(y, laps, cfg: LossConfig) -> Tensor:
    """``eigen + lambda * spatial``, optionally per-pixel normalized."""
    y = y if isinstance(y, Tensor) else Tensor(y)
    _, _, h, w = _check_maps(y)
    return _combine(eigen_loss(y, laps), spatial_loss(y, cfg.gamma), cfg, h * w)


# -- optimizer ---------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment estimates keyed by parameter name."""

    lr: float
    beta1: float
    beta2: float
    eps: float
    step: int
    m: dict
    v: dict

    @staticmethod
    def init(params, lr: float = 1e-4, beta1: float = 0.9,
             beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        if lr < 0:
            raise ContractError(f"lr must be >= 0, got {lr}")
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ContractError("betas must lie in [0, 1)")
        m = {name: np.zeros_like(p.data) for name, p in params}
        v = {name: np.zeros_like(p.data) for name, p in params}
        return AdamState(lr, beta1, beta2, eps, 0, m, v)


def gather_grads(params) -> dict:
    """Collect ``{name: grad}`` from parameters after a backward pass."""
    grads = {}
    for name, p in params:
        if p.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient")
        grads[name] = p.grad
    return grads


def adam_step(params, grads, state: AdamState) -> None:
    """One bias-corrected Adam update; parameters are modified in place.

    ``grads`` maps parameter names to gradient arrays (``gather_grads`` builds
    it from the tape); a missing or empty gradient is a contract violation.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params:
        g = grads.get(name)
        if g is None:
            raise ContractError(f"parameter {name!r} has no gradient")
        if g.shape != p.data.shape:
            raise DimensionError(
                f"gradient for {name!r} has shape {g.shape}, "
                f"expected {p.data.shape}"
            )
        if name not in state.m:
            raise ContractError(f"parameter {name!r} unknown to this optimizer")
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[name] / c1
        v_hat = state.v[name] / c2
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


# -- training loop -----------------------------------------------------------


@dataclass
class TraceRow:
    step: int
    l_eigen: float
    l_spatial: float
    l_ssg: float
    wall_ms: float


@dataclass
class TrainResult:
    net: SsgNet
    adam: AdamState
    trace: list = field(default_factory=list)

    def checkpoint(self):
        """Serializable ``(model_entries, opt_entries)`` of the final state."""
        from .dataio import checkpoint_from_model
        return checkpoint_from_model(self.net, self.adam)


def build_dataset_graphs(images, k: int = 10, eta: float = 1.0,
                         progress=None) -> list:
    """One Laplacian per image, built once up front.

    Graphs are cached by image content hash, so duplicated images share a
    single Laplacian build.
    """
    laps = []
    cache: dict[bytes, SparseGraph] = {}
    for i, img in enumerate(images):
        key = hashlib.sha256(np.ascontiguousarray(img).tobytes()).digest()
        lap = cache.get(key)
        if lap is None:
            _, lap = build_image_graph(img, k=k, eta=eta)
            cache[key] = lap
        laps.append(lap)
        if progress is not None:
            progress(i + 1, len(images))
    return laps


def train(net: SsgNet, images, cfg: LossConfig, steps: int, batch: int,
          seed: int = 0, k: int = 10, eta: float = 1.0, lr: float = 1e-4,
          beta1: float = 0.9, beta2: float = 0.999,
          laps=None, step_hook=None) -> TrainResult:
    """Unsupervised training on a list of (3, H, W) images in [0, 1].

    Graph Laplacians are built once per image (or passed in via ``laps``).
    Batches are drawn with a seeded generator, without replacement when the
    dataset is large enough.  The returned trace has one row per step with
    both loss components; wall time is measurement, everything else is
    bit-reproducible for fixed inputs and seed.

    ``step_hook(row, net, adam)`` runs after each optimizer step.
    """
    if steps < 1 or batch < 1:
        raise ContractError(f"need steps >= 1 and batch >= 1, got {steps}, {batch}")
    images = [np.ascontiguousarray(im, dtype=np.float32) for im in images]
    if not images:
        raise ContractError("training needs at least one image")
    shape = images[0].shape
    if any(im.shape != shape for im in images):
        raise ContractError("all training images must share one resolution")
    if laps is None:
        laps = build_dataset_graphs(images, k=k, eta=eta)
    _, h, w = shape
    _as_lap_list(laps, len(images), h * w)
    params = net.parameters()
    adam = AdamState.init(params, lr=lr, beta1=beta1, beta2=beta2)
    rng = np.random.default_rng(seed)
    trace: list[TraceRow] = []
    n_img = len(images)
    for step in range(1, steps + 1):
        t0 = time.perf_counter()
        idx = rng.choice(n_img, size=batch, replace=batch > n_img)
        x = np.stack([images[i] for i in idx])
        y = forward_padded(net, Tensor(x))
        e = eigen_loss(y, [laps[i] for i in idx])
        s = spatial_loss(y, cfg.gamma)
        total = _combine(e, s, cfg, h * w)
        for _, p in params:
            p.reset_grad()
        total.backward()
        adam_step(params, gather_grads(params), adam)
        row = TraceRow(step, float(e.data), float(s.data), float(total.data),
                       (time.perf_counter() - t0) * 1e3)
        trace.append(row)
        if step_hook is not None:
            step_hook(row, net, adam)
    return TrainResult(net=net, adam=adam, trace=trace)
