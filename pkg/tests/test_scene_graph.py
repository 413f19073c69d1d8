"""Pixel features, exact KNN, affinity/Laplacian construction."""

import numpy as np
import pytest

from conftest import graph_from_dense, random_image, two_block_image, \
    union_find_components
from ssgnet import graph as G
from ssgnet.errors import ContractError, DimensionError, InputRangeError
from ssgnet.graph import GraphKind


def knn_oracle(feats, k):
    """Exhaustive nearest neighbors with the same sequential distance
    accumulation and lower-index tie-break as the library."""
    n = feats.shape[0]
    d2 = np.zeros((n, n))
    for f in range(feats.shape[1]):
        diff = feats[:, f][:, None] - feats[:, f][None, :]
        d2 += diff * diff
    np.fill_diagonal(d2, np.inf)
    out = np.empty((n, k), dtype=np.int64)
    idx = np.arange(n)
    for i in range(n):
        order = np.lexsort((idx, d2[i]))
        out[i] = order[:k]
    return out


# -- features -----------------------------------------------------------------

def test_feature_rows():
    img = np.zeros((3, 2, 4), dtype=np.float32)
    img[0, 1, 3] = 0.25  # red of pixel (y=1, x=3)
    f = G.extract_features(img, eta=1.0)
    assert len(f) == 8
    row = f[1 * 4 + 3]
    assert isinstance(row, G.PixelFeature)
    assert row.r == 0.25 and row.g == 0.0 and row.b == 0.0
    # widest dimension spans [0, eta)
    assert row.d_x == pytest.approx(3.0 / 4.0)
    assert row.d_y == pytest.approx(1.0 / 4.0)


def test_feature_eta_scaling():
    img = np.full((3, 4, 4), 0.5, dtype=np.float32)
    f = G.extract_features(img, eta=2.0)
    assert f[3].d_x == pytest.approx(2.0 * 3.0 / 4.0)
    f0 = G.extract_features(img, eta=0.0)
    assert all(f0[i].d_x == 0.0 and f0[i].d_y == 0.0 for i in range(16))


def test_feature_contracts():
    with pytest.raises(DimensionError):
        G.extract_features(np.zeros((1, 4, 4), dtype=np.float32))
    with pytest.raises(InputRangeError):
        G.extract_features(np.full((3, 2, 2), 1.5, dtype=np.float32))
    with pytest.raises(ContractError):
        G.extract_features(np.zeros((3, 2, 2), dtype=np.float32), eta=-1.0)


# -- exact KNN ------------------------------------------------------------------

def test_knn_matches_exhaustive_oracle(rng):
    for trial in range(5):
        img = random_image(rng, 5 + trial, 6)
        f = G.extract_features(img, eta=1.0)
        k = int(rng.integers(1, 6))
        expect = knn_oracle(f.array, k)
        np.testing.assert_array_equal(G.knn_search(f, k, "brute"), expect)
        np.testing.assert_array_equal(G.knn_search(f, k, "grid"), expect)


def test_knn_ties_resolve_to_lower_index():
    # constant image: all colors equal, many exactly-tied distances
    img = np.full((3, 4, 4), 0.5, dtype=np.float32)
    f = G.extract_features(img, eta=1.0)
    nb = G.knn_search(f, 3)
    np.testing.assert_array_equal(nb, knn_oracle(f.array, 3))
    # pixel 0 at the corner: unit-grid neighbours, ties broken by index
    assert nb[0, 0] == 1


def test_knn_brute_grid_agree_on_random(rng):
    img = random_image(rng, 9, 7)
    f = G.extract_features(img, eta=1.0)
    for k in (1, 4, 10):
        np.testing.assert_array_equal(G.knn_search(f, k, "brute"),
                                      G.knn_search(f, k, "grid"))


def test_knn_contracts():
    f = G.extract_features(np.zeros((3, 2, 2), dtype=np.float32))
    with pytest.raises(ContractError):
        G.knn_search(f, 0)
    with pytest.raises(ContractError):
        G.knn_search(f, 4)  # k must stay below n
    with pytest.raises(ContractError):
        G.knn_search(f, 1, method="kdtree")
    f0 = G.extract_features(np.zeros((3, 2, 2), dtype=np.float32), eta=0.0)
    with pytest.raises(ContractError):
        G.knn_search(f0, 1, method="grid")


# -- affinity -------------------------------------------------------------------

def test_affinity_values_2x2_constant():
    """Hand-worked graph: constant 2x2 image, k=1.

    With equal colors the metric is purely spatial (step 0.5), every pixel
    picks its lowest-index unit-distance neighbour, and one-directional
    picks halve under the (W + W^T)/2 symmetrization.
    """
    img = np.full((3, 2, 2), 0.5, dtype=np.float32)
    f = G.extract_features(img, eta=1.0)
    nb = G.knn_search(f, 1)
    np.testing.assert_array_equal(nb, [[1], [0], [0], [1]])
    w = G.build_affinity(f, nb).to_dense()
    expect = np.zeros((4, 4))
    expect[0, 1] = expect[1, 0] = 0.5        # mutual pick
    expect[0, 2] = expect[2, 0] = 0.25       # one-directional
    expect[1, 3] = expect[3, 1] = 0.25
    np.testing.assert_allclose(w, expect, atol=1e-15)


def test_affinity_bitwise_symmetric(rng):
    img = random_image(rng, 8, 8)
    aff, _ = G.build_image_graph(img, k=6)
    d = aff.to_dense()
    assert np.array_equal(d, d.T)
    assert (aff.values > 0).all()
    assert np.all(np.diag(d) == 0.0)


def test_affinity_weight_formula(rng):
    img = random_image(rng, 4, 4)
    f = G.extract_features(img, eta=1.0)
    nb = G.knn_search(f, 2)
    w = G.build_affinity(f, nb).to_dense()
    # every stored weight never exceeds clamp(1 - distance) of its pair
    for i in range(16):
        for j in range(16):
            if w[i, j] == 0:
                continue
            d = np.linalg.norm(f.array[i] - f.array[j])
            full = min(max(1.0 - d, 0.0), 1.0)
            assert w[i, j] <= full + 1e-12
            assert w[i, j] >= 0.5 * full - 1e-12


def test_affinity_rejects_self_loops():
    f = G.extract_features(np.full((3, 2, 2), 0.5, dtype=np.float32))
    with pytest.raises(ContractError):
        G.build_affinity(f, np.array([[0], [0], [0], [0]]))


# -- Laplacian -----------------------------------------------------------------

def test_laplacian_two_node_frozen():
    w = graph_from_dense([[0.0, 1.0], [1.0, 0.0]], GraphKind.AFFINITY)
    lap = G.build_laplacian(w)
    np.testing.assert_array_equal(lap.to_dense(), [[1.0, -1.0], [-1.0, 1.0]])
    y = np.array([1.0, 0.0])
    assert G.quadratic_form(lap, y) == pytest.approx(1.0, abs=1e-15)
    assert G.quadratic_form_edge_sum(lap, y) == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_allclose(G.quadratic_form_grad(lap, y), [2.0, -2.0],
                               atol=1e-15)


def test_laplacian_rows_sum_to_zero(rng):
    img = random_image(rng, 7, 7)
    _, lap = G.build_image_graph(img, k=5)
    ones = np.ones(lap.n_nodes)
    assert np.abs(lap.matvec(ones)).max() < 1e-12


def test_laplacian_psd_and_dual_forms(rng):
    img = random_image(rng, 6, 8)
    _, lap = G.build_image_graph(img, k=4)
    for _ in range(10):
        y = rng.standard_normal(lap.n_nodes)
        qf = G.quadratic_form(lap, y)
        es = G.quadratic_form_edge_sum(lap, y)
        assert qf >= -1e-9
        assert abs(qf - es) <= 1e-9 * max(1.0, abs(qf))
        np.testing.assert_allclose(G.quadratic_form_grad(lap, y),
                                   2.0 * lap.matvec(y), atol=1e-12)


def test_laplacian_requires_symmetric_affinity():
    w = graph_from_dense([[0.0, 1.0], [0.5, 0.0]], GraphKind.AFFINITY)
    with pytest.raises(ContractError):
        G.build_laplacian(w)
    lap = graph_from_dense([[1.0, -1.0], [-1.0, 1.0]], GraphKind.LAPLACIAN)
    with pytest.raises(ContractError):
        G.build_laplacian(lap)  # wrong kind


def test_component_count_matches_union_find(rng):
    img = two_block_image(6, 8)
    aff, lap = G.build_image_graph(img, k=3)
    edges = list(zip(aff.row_ids.tolist(), aff.col_indices.tolist()))
    expect = union_find_components(aff.n_nodes, edges)
    assert expect == 2
    assert G.connected_component_count(aff) == expect
    assert G.connected_component_count(lap) == expect

    smooth = random_image(rng, 6, 6)
    aff2, _ = G.build_image_graph(smooth, k=6)
    edges2 = list(zip(aff2.row_ids.tolist(), aff2.col_indices.tolist()))
    assert G.connected_component_count(aff2) == \
        union_find_components(aff2.n_nodes, edges2)


def test_matrix_market_round_trip(tmp_path, rng):
    import scipy.io

    img = random_image(rng, 5, 5)
    _, lap = G.build_image_graph(img, k=4)
    path = tmp_path / "lap.mtx"
    G.write_matrix_market(lap, path)
    back = scipy.io.mmread(str(path)).toarray()
    np.testing.assert_allclose(back, lap.to_dense(), atol=1e-14)


def test_sparse_graph_matvec_matches_dense(rng):
    img = random_image(rng, 5, 6)
    _, lap = G.build_image_graph(img, k=4)
    y = rng.standard_normal(lap.n_nodes)
    np.testing.assert_allclose(lap.matvec(y), lap.to_dense() @ y, atol=1e-12)
    with pytest.raises(DimensionError):
        lap.matvec(np.ones(3))
