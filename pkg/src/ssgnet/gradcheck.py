"""Finite-difference verification of every analytic gradient in the package.

Each check rebuilds a small scalar loss around one operation on freshly drawn
random inputs, backpropagates, then probes a couple of coordinates with
central differences; ten such trials run per operation.  The error metric is
``|analytic - fd| / max(|analytic|, |fd|, 1)``.

Step sizes and tolerances track the arithmetic: float64 uses h = 1e-5 against
1e-6, float32 uses h = 1e-2 against 1e-4 (losses are kept O(1) so FD noise
stays well under the bar), and the end-to-end pass pushes a 16x16 image
through the whole network and objective in float64 with h = 1e-4 against
1e-4.  Nonsmooth ops are probed away from their kinks, at least ten steps
clear.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .assets import builtin_images
from .errors import ContractError
from .graph import build_image_graph
from .losses import LossConfig, eigen_loss, spatial_loss, total_loss
from .model import SsgNet, fuse_guidance, FusionLayer, forward
from .tensor import LayerParams, Tensor


@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    tol: float
    passed: bool

    def line(self) -> str:
        mark = "ok" if self.passed else "FAIL"
        return (f"[{mark:4s}] {self.name:<28s} max_rel_err={self.max_rel_err:.3e} "
                f"tol={self.tol:.0e}")


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1.0)


def _fd_check(name, make, h, tol, rng, n_trials: int = 10,
              n_coords: int = 2) -> GradCheckResult:
    """Compare backprop against central differences.

    ``make()`` draws fresh random leaves and returns ``(build_loss, leaves)``;
    each of the ``n_trials`` trials backpropagates once and then probes
    ``n_coords`` coordinates of every leaf.
    """
    worst = 0.0
    for _ in range(n_trials):
        build_loss, leaves = make()
        for _, t in leaves:
            t.reset_grad()
        loss = build_loss()
        loss.backward()
        grads = {}
        for label, t in leaves:
            if t.grad is None:
                raise ContractError(f"{name}: leaf {label} received no gradient")
            grads[label] = t.grad.copy()
        for label, t in leaves:
            flat = t.data.reshape(-1)
            k = min(n_coords, flat.size)
            coords = rng.choice(flat.size, size=k, replace=False)
            step = t.dtype.type(h)
            for c in coords:
                orig = flat[c]
                xp = orig + step
                xm = orig - step
                flat[c] = xp
                fp = float(build_loss().data)
                flat[c] = xm
                fm = float(build_loss().data)
                flat[c] = orig
                fd = (fp - fm) / (float(xp) - float(xm))
                worst = max(worst, rel_err(float(grads[label].reshape(-1)[c]), fd))
    return GradCheckResult(name, worst, tol, worst <= tol)


def _rand(rng, shape, dtype, lo: float = -1.0, hi: float = 1.0) -> Tensor:
    data = rng.uniform(lo, hi, size=shape).astype(dtype)
    return Tensor(data, requires_grad=True)


def _const(rng, shape, dtype) -> Tensor:
    return Tensor(rng.standard_normal(shape).astype(dtype))


def _proj_mean(out: Tensor, r: Tensor) -> Tensor:
    return (out * r).mean()


def run_op_checks(bits: int = 64, seed: int = 0) -> list:
    """The per-operation suite at one precision, ten random inputs per op."""
    if bits == 64:
        dtype, h, tol = np.float64, 1e-5, 1e-6
    elif bits == 32:
        dtype, h, tol = np.float32, 1e-2, 1e-4
    else:
        raise ContractError(f"bits must be 32 or 64, got {bits}")
    rng = np.random.default_rng(seed)
    results = []

    def check(name, make):
        results.append(_fd_check(f"{name}/f{bits}", make, h, tol, rng))

    def pair_op(op):
        def make():
            a = _rand(rng, (3, 4), dtype)
            b = _rand(rng, (3, 4), dtype)
            r = _const(rng, (3, 4), dtype)
            return (lambda: _proj_mean(op(a, b), r)), [("a", a), ("b", b)]
        return make

    check("add", pair_op(lambda a, b: a + b))
    check("mul", pair_op(lambda a, b: a * b))

    def unary_op(op):
        def make():
            a = _rand(rng, (3, 4), dtype)
            r = _const(rng, (3, 4), dtype)
            return (lambda: _proj_mean(op(a), r)), [("a", a)]
        return make

    check("scalar-affine", unary_op(lambda a: a * 2.5 - 0.7))
    check("neg", unary_op(lambda a: -a))

    def make_sum_axis():
        c = _rand(rng, (2, 3, 4), dtype)
        r = _const(rng, (2, 4), dtype)
        return (lambda: _proj_mean(c.sum(axis=1), r)), [("c", c)]

    def make_mean_all():
        c = _rand(rng, (2, 3, 4), dtype)
        return (lambda: c.mean() * 3.0), [("c", c)]

    def make_reshape():
        c = _rand(rng, (2, 3, 4), dtype)
        r = _const(rng, (24,), dtype)
        return (lambda: _proj_mean(c.reshape(24), r)), [("c", c)]

    check("sum-axis", make_sum_axis)
    check("mean-all", make_mean_all)
    check("reshape", make_reshape)

    def conv_maker(stride, out_hw):
        def make():
            x = _rand(rng, (2, 3, 8, 8), dtype, 0.0, 1.0)
            p = LayerParams(_rand(rng, (4, 3, 3, 3), dtype, -0.5, 0.5),
                            _rand(rng, (4,), dtype, -0.2, 0.2))
            r = _const(rng, (2, 4, out_hw, out_hw), dtype)
            return ((lambda: _proj_mean(T.conv2d(x, p, stride=stride), r)),
                    [("x", x), ("w", p.weight), ("b", p.bias)])
        return make

    check("conv2d-s1", conv_maker(1, 8))
    check("conv2d-s2", conv_maker(2, 4))

    def make_conv1x1():
        x = _rand(rng, (2, 3, 8, 8), dtype, 0.0, 1.0)
        p = LayerParams(_rand(rng, (2, 3, 1, 1), dtype, -0.5, 0.5),
                        _rand(rng, (2,), dtype, -0.2, 0.2))
        r = _const(rng, (2, 2, 8, 8), dtype)
        return ((lambda: _proj_mean(T.conv2d(x, p, stride=1), r)),
                [("x", x), ("w", p.weight), ("b", p.bias)])

    check("conv2d-1x1", make_conv1x1)

    def deconv_maker(stride, out_hw):
        def make():
            x = _rand(rng, (2, 4, 4, 4), dtype)
            p = LayerParams(_rand(rng, (4, 3, 3, 3), dtype, -0.5, 0.5),
                            _rand(rng, (3,), dtype, -0.2, 0.2))
            r = _const(rng, (2, 3, out_hw, out_hw), dtype)
            return ((lambda: _proj_mean(T.deconv2d(x, p, stride=stride), r)),
                    [("x", x), ("w", p.weight), ("b", p.bias)])
        return make

    check("deconv2d-s1", deconv_maker(1, 4))
    check("deconv2d-s2", deconv_maker(2, 8))

    def make_layer_norm():
        x = _rand(rng, (2, 5, 4, 4), dtype)
        p = LayerParams(_rand(rng, (5,), dtype, 0.5, 1.5),
                        _rand(rng, (5,), dtype, -0.3, 0.3))
        r = _const(rng, (2, 5, 4, 4), dtype)
        return ((lambda: _proj_mean(T.layer_norm(x, p), r)),
                [("x", x), ("gamma", p.weight), ("beta", p.bias)])

    check("layer-norm", make_layer_norm)

    def act_maker(op):
        def make():
            x = _rand(rng, (2, 4, 3, 3), dtype, -2.0, 2.0)
            r = _const(rng, (2, 4, 3, 3), dtype)
            return (lambda: _proj_mean(op(x), r)), [("x", x)]
        return make

    check("gelu", act_maker(T.gelu))
    check("softmax", act_maker(T.channel_softmax))

    def make_leaky():
        # magnitudes at least 0.2 keep every coordinate 10+ FD steps from the kink
        off = rng.uniform(0.2, 1.2, size=(2, 4, 3, 3))
        sign = rng.choice([-1.0, 1.0], size=off.shape)
        x = Tensor((off * sign).astype(dtype), requires_grad=True)
        r = _const(rng, (2, 4, 3, 3), dtype)
        return (lambda: _proj_mean(T.leaky_relu(x), r)), [("x", x)]

    check("leaky-relu", make_leaky)

    image = builtin_images(count=1, size=8, seed=3)[0]
    _, lap = build_image_graph(image, k=4, eta=1.0)

    def loss_maker(build):
        def make():
            # inside (0.15, 0.85): clear of the spatial-loss kinks at 0 and 1
            y = _rand(rng, (1, 2, 8, 8), dtype, 0.15, 0.85)
            return (lambda: build(y)), [("y", y)]
        return make

    # scaled to O(1) so the float32 probe is not drowned by value rounding
    check("eigen-loss", loss_maker(lambda y: eigen_loss(y, lap) * (1.0 / 64.0)))
    check("spatial-loss",
          loss_maker(lambda y: spatial_loss(y, gamma=0.9) * (1.0 / 64.0)))
    cfg = LossConfig(lam=2.0, gamma=0.9, normalize_per_pixel=True)
    check("total-loss", loss_maker(lambda y: total_loss(y, lap, cfg)))

    return results


def run_end_to_end(seed: int = 0) -> GradCheckResult:
    """Whole pipeline in float64: image -> network -> combined loss."""
    rng = np.random.default_rng(seed)
    net = SsgNet.build(n_eigenmaps=3, seed=seed).astype(np.float64)
    image = builtin_images(count=1, size=16, seed=11)[0].astype(np.float64)
    _, lap = build_image_graph(image, k=6, eta=1.0)
    x = Tensor(image[None])
    cfg = LossConfig(lam=40.0, gamma=0.9, normalize_per_pixel=True)

    def make():
        build_loss = lambda: total_loss(forward(net, x), lap, cfg)
        return build_loss, list(net.parameters())

    return _fd_check("end-to-end/f64", make, h=1e-4, tol=1e-4, rng=rng,
                     n_trials=1, n_coords=3)


def run_fusion_end_to_end(seed: int = 0) -> GradCheckResult:
    """Gradient flow through map fusion into a downstream scalar objective."""
    rng = np.random.default_rng(seed)

    def make():
        fusion = FusionLayer.random(3, c_out=1, seed=seed, dtype=np.float64)
        y = _rand(rng, (1, 3, 6, 6), np.float64, 0.1, 0.9)
        target = _const(rng, (1, 1, 6, 6), np.float64)

        def build_loss():
            diff = fuse_guidance(fusion, y) - target
            return (diff * diff).mean()

        return build_loss, [("maps", y), ("w", fusion.params.weight),
                            ("b", fusion.params.bias)]

    return _fd_check("fusion-e2e/f64", make, h=1e-5, tol=1e-6, rng=rng,
                     n_trials=1, n_coords=5)


def run_all(seed: int = 0) -> list:
    """Both precisions, fusion, and the end-to-end pass."""
    results = run_op_checks(64, seed=seed)
    results += run_op_checks(32, seed=seed)
    results.append(run_fusion_end_to_end(seed=seed))
    results.append(run_end_to_end(seed=seed))
    return results
