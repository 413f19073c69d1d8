"""Shared fixtures and small helpers for the test suite."""

import numpy as np
import pytest

from ssgnet.graph import GraphKind, SparseGraph, build_image_graph


def random_image(rng, h, w):
    """A smooth-ish random (3, h, w) float32 image in [0, 1]."""
    base = rng.random((3, h, w))
    # average neighbours a little so the KNN graph is not pure noise
    sm = base.copy()
    sm[:, 1:, :] = 0.5 * (sm[:, 1:, :] + base[:, :-1, :])
    sm[:, :, 1:] = 0.5 * (sm[:, :, 1:] + base[:, :, :-1])
    return np.ascontiguousarray(sm, dtype=np.float32)


def two_block_image(h=6, w=8):
    """Left half black, right half white: two far-apart feature clusters."""
    img = np.zeros((3, h, w), dtype=np.float32)
    img[:, :, w // 2:] = 1.0
    return img


def graph_from_dense(dense, kind=GraphKind.LAPLACIAN):
    """Build a SparseGraph holding exactly the nonzeros of ``dense``."""
    dense = np.asarray(dense, dtype=np.float64)
    n = dense.shape[0]
    rows, cols = np.nonzero(dense)
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.add.at(offsets[1:], rows, 1)
    offsets = np.cumsum(offsets)
    return SparseGraph(n_nodes=n, row_offsets=offsets,
                       col_indices=cols.astype(np.int64),
                       values=dense[rows, cols], kind=kind)


def union_find_components(n, edges):
    """Component count over (i, j) pairs; independent of the library walk."""
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, j in edges:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj
    return len({find(i) for i in range(n)})


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_lap():
    """Laplacian of a small fixed image, shared by read-only tests."""
    img = two_block_image(4, 4)
    _, lap = build_image_graph(img, k=3, eta=1.0)
    return lap
