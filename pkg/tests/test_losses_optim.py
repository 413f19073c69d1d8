"""Eigen and sparsity losses, Adam, and the training loop."""

import numpy as np
import pytest

from conftest import graph_from_dense, random_image
from ssgnet import losses as L
from ssgnet.errors import ContractError, DimensionError
from ssgnet.graph import GraphKind, build_image_graph
from ssgnet.model import SsgNet, forward
from ssgnet.tensor import Tensor


def path2_laplacian():
    return graph_from_dense([[1.0, -1.0], [-1.0, 1.0]], GraphKind.LAPLACIAN)


# -- eigen loss -------------------------------------------------------------------

def test_eigen_loss_two_node_frozen():
    """One map over a two-pixel path with values (1, 0): the quadratic form
    is 1 and its gradient 2 L y = (2, -2)."""
    y = Tensor(np.array([1.0, 0.0], dtype=np.float32).reshape(1, 1, 1, 2),
               requires_grad=True)
    loss = L.eigen_loss(y, [path2_laplacian()])
    assert float(loss.data) == pytest.approx(1.0, abs=1e-7)
    loss.backward()
    np.testing.assert_allclose(y.grad.reshape(-1), [2.0, -2.0], atol=1e-6)


def test_eigen_loss_zero_on_constant_maps(rng):
    img = random_image(rng, 4, 4)
    _, lap = build_image_graph(img, k=3)
    y = Tensor(np.full((1, 2, 4, 4), 0.5, dtype=np.float32))
    loss = L.eigen_loss(y, [lap])
    assert abs(float(loss.data)) < 1e-10


def test_eigen_loss_batch_mean(rng):
    img = random_image(rng, 4, 4)
    _, lap = build_image_graph(img, k=3)
    ya = rng.random((1, 2, 4, 4)).astype(np.float32)
    single = float(L.eigen_loss(Tensor(ya), [lap]).data)
    double = float(L.eigen_loss(Tensor(np.concatenate([ya, ya])),
                                [lap, lap]).data)
    assert double == pytest.approx(single, rel=1e-6)


def test_eigen_loss_contracts(rng):
    img = random_image(rng, 4, 4)
    aff, lap = build_image_graph(img, k=3)
    y = Tensor(np.zeros((1, 2, 4, 4), dtype=np.float32))
    with pytest.raises(DimensionError):
        L.eigen_loss(y, [lap, lap])          # laps/batch mismatch
    with pytest.raises(ContractError):
        L.eigen_loss(y, [aff])               # wrong graph kind
    with pytest.raises(DimensionError):
        L.eigen_loss(y, [path2_laplacian()])  # node/pixel mismatch


# -- spatial loss ------------------------------------------------------------------

def test_spatial_loss_one_hot_frozen():
    """A fully one-hot pixel contributes exactly 2 after the per-pixel shift."""
    y = np.zeros((1, 3, 2, 2), dtype=np.float32)
    y[0, 0] = 1.0
    loss = L.spatial_loss(Tensor(y), gamma=0.9)
    assert float(loss.data) == pytest.approx(2.0 * 4, abs=1e-6)


def test_spatial_loss_uniform_frozen():
    y = np.full((1, 3, 2, 2), 1.0 / 3.0, dtype=np.float32)
    per_pixel = 3 * (1 / 3) ** 0.9 + 3 * (2 / 3) ** 0.9 - 1
    assert per_pixel == pytest.approx(2.199, abs=1e-3)
    loss = L.spatial_loss(Tensor(y), gamma=0.9)
    assert float(loss.data) == pytest.approx(4 * per_pixel, rel=1e-5)


def test_spatial_loss_kink_subgradient_finite():
    """At exact 0/1 the kinked term's infinite slope is dropped; what is
    left is the finite slope of the opposite term, magnitude gamma."""
    y = Tensor(np.zeros((1, 2, 1, 2), dtype=np.float32), requires_grad=True)
    y.data[0, 0, 0, :] = 1.0  # channel 0 owns both pixels outright
    L.spatial_loss(y, gamma=0.9).backward()
    assert np.isfinite(y.grad).all()
    np.testing.assert_allclose(y.grad[0, 0], 0.9, atol=1e-6)
    np.testing.assert_allclose(y.grad[0, 1], -0.9, atol=1e-6)


def test_spatial_loss_interior_gradient_sign():
    # the penalty is symmetric about 0.5, so its slope vanishes there
    y = Tensor(np.full((1, 2, 1, 1), 0.5, dtype=np.float64),
               requires_grad=True)
    L.spatial_loss(y).backward()
    assert np.abs(y.grad).max() < 1e-12
    # slightly off-center the slope points away from the midpoint
    y2 = Tensor(np.full((1, 2, 1, 1), 0.6, dtype=np.float64),
                requires_grad=True)
    L.spatial_loss(y2).backward()
    assert y2.grad[0, 0, 0, 0] < 0  # descending pushes 0.6 toward 1


def test_spatial_loss_gamma_contract():
    y = Tensor(np.zeros((1, 2, 1, 1), dtype=np.float32))
    for bad in (0.0, 1.0, -0.3):
        with pytest.raises(ContractError):
            L.spatial_loss(y, gamma=bad)


# -- combined loss ------------------------------------------------------------------

def test_total_loss_composition(rng):
    img = random_image(rng, 4, 4)
    _, lap = build_image_graph(img, k=3)
    y = Tensor(rng.random((1, 2, 4, 4)).astype(np.float32))
    e = float(L.eigen_loss(y, [lap]).data)
    s = float(L.spatial_loss(y).data)
    cfg = L.LossConfig(lam=40.0)
    t = float(L.total_loss(y, [lap], cfg).data)
    assert t == pytest.approx(e + 40.0 * s, rel=1e-5)
    tn = float(L.total_loss(y, [lap],
                            L.LossConfig(lam=40.0, normalize_per_pixel=True)).data)
    assert tn == pytest.approx(t / 16.0, rel=1e-5)
    t0 = float(L.total_loss(y, [lap], L.LossConfig(lam=0.0)).data)
    assert t0 == pytest.approx(e, rel=1e-5)


def test_loss_config_contracts():
    with pytest.raises(ContractError):
        L.LossConfig(gamma=1.0)
    with pytest.raises(ContractError):
        L.LossConfig(lam=-1.0)


# -- Adam ----------------------------------------------------------------------------

def one_param(value=0.0):
    p = Tensor(np.array([value], dtype=np.float32), requires_grad=True)
    return [("p", p)], p


def test_adam_first_step_size():
    """With unit gradient the bias-corrected first step equals the learning
    rate almost exactly."""
    params, p = one_param(0.0)
    state = L.AdamState.init(params, lr=1e-3)
    L.adam_step(params, {"p": np.array([1.0], dtype=np.float32)}, state)
    assert p.data[0] == pytest.approx(-1e-3, rel=1e-5)
    assert state.step == 1


def test_adam_zero_lr_keeps_params_bitwise():
    params, p = one_param(0.37)
    before = p.data.copy()
    state = L.AdamState.init(params, lr=0.0)
    for _ in range(3):
        L.adam_step(params, {"p": np.array([2.0], dtype=np.float32)}, state)
    assert np.array_equal(p.data, before)
    assert state.step == 3


def test_adam_minimizes_quadratic():
    params, p = one_param(0.0)
    state = L.AdamState.init(params, lr=0.1)
    for _ in range(300):
        g = 2.0 * (p.data - 3.0)
        L.adam_step(params, {"p": g.astype(np.float32)}, state)
    assert p.data[0] == pytest.approx(3.0, abs=1e-2)


def test_adam_step_contracts():
    params, _ = one_param()
    state = L.AdamState.init(params)
    with pytest.raises(ContractError):
        L.adam_step(params, {}, state)
    with pytest.raises(DimensionError):
        L.adam_step(params, {"p": np.zeros(2, dtype=np.float32)}, state)
    stranger = Tensor(np.zeros(1, dtype=np.float32), requires_grad=True)
    with pytest.raises(ContractError):
        L.adam_step([("q", stranger)], {"q": np.zeros(1, dtype=np.float32)},
                    state)


def test_gather_grads_requires_backward():
    params, p = one_param()
    with pytest.raises(ContractError):
        L.gather_grads(params)
    from ssgnet.tensor import tsum
    tsum(p).backward()
    grads = L.gather_grads(params)
    np.testing.assert_array_equal(grads["p"], [1.0])


# -- training loop -----------------------------------------------------------------

def make_images(rng, n=3, size=16):
    return [random_image(rng, size, size) for _ in range(n)]


def test_train_smoke_and_trace(rng):
    imgs = make_images(rng)
    net = SsgNet.build(seed=0)
    steps = []
    res = L.train(net, imgs, L.LossConfig(), steps=3, batch=2, seed=0, k=4,
                  step_hook=lambda row, n_, a_: steps.append(row.step))
    assert steps == [1, 2, 3]
    assert len(res.trace) == 3
    for row in res.trace:
        assert row.l_ssg == pytest.approx(row.l_eigen + 40.0 * row.l_spatial,
                                          rel=1e-5)
        assert row.wall_ms >= 0.0
    assert res.net is net
    model_e, opt_e = res.checkpoint()
    assert set(model_e) >= {n for n, _ in net.parameters()}
    assert opt_e  # optimizer state travels with the result


def test_train_deterministic_same_seed(rng):
    imgs = make_images(rng, n=2)
    a = L.train(SsgNet.build(seed=0), imgs, L.LossConfig(), steps=3, batch=2,
                seed=7, k=4)
    b = L.train(SsgNet.build(seed=0), imgs, L.LossConfig(), steps=3, batch=2,
                seed=7, k=4)
    assert [r.l_ssg for r in a.trace] == [r.l_ssg for r in b.trace]
    for (na, pa), (nb, pb) in zip(a.net.parameters(), b.net.parameters()):
        assert na == nb and np.array_equal(pa.data, pb.data)


def test_train_contracts(rng):
    net = SsgNet.build(seed=0)
    with pytest.raises(ContractError):
        L.train(net, [], L.LossConfig(), steps=1, batch=1)
    with pytest.raises(ContractError):
        L.train(net, make_images(rng, 1), L.LossConfig(), steps=0, batch=1)
    mixed = [random_image(rng, 16, 16), random_image(rng, 12, 12)]
    with pytest.raises(ContractError):
        L.train(net, mixed, L.LossConfig(), steps=1, batch=1)


def test_dataset_graphs_cache_by_content(rng):
    img = random_image(rng, 8, 8)
    laps = L.build_dataset_graphs([img, img.copy(), random_image(rng, 8, 8)],
                                  k=4)
    assert laps[0] is laps[1]
    assert laps[0] is not laps[2]


def test_train_accepts_prebuilt_laplacians(rng):
    imgs = make_images(rng, n=2, size=8)
    laps = L.build_dataset_graphs(imgs, k=4)
    res = L.train(SsgNet.build(seed=0), imgs, L.LossConfig(), steps=2,
                  batch=2, seed=0, laps=laps)
    assert len(res.trace) == 2
