"""Pixel affinity graphs and their Laplacians.

Every pixel is a node described by the feature vector
``(r, g, b, eta*x/max(h,w), eta*y/max(h,w))``.  Edges connect each pixel to
its k nearest neighbors in that feature space, weighted by
``clamp(1 - ||phi_i - phi_j||, 0, 1)``, then symmetrized as ``(W + W^T)/2``.
The Laplacian is the usual ``D - W`` stored in CSR with float64 values.

Determinism is a hard requirement here: neighbor searches break distance ties
by the lower pixel index, squared distances are accumulated feature by
feature in a fixed order, and all float reductions go through ``np.bincount``
(a sequential scan), so identical inputs give bit-identical graphs on every
run and both k-NN strategies agree exactly.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ContractError, DimensionError, InputRangeError

_BRUTE_LIMIT = 16384
_OFFSET_BATCH = 32


class GraphKind(enum.Enum):
    AFFINITY = "affinity"
    LAPLACIAN = "laplacian"


@dataclass
class SparseGraph:
    """Square sparse matrix in CSR form; values are float64.

    Instances are treated as immutable after construction.  ``row_ids`` holds
    the row index of every stored entry (the CSR expansion), precomputed once
    because the matvec and edge iteration both want it.
    """

    n_nodes: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray
    kind: GraphKind
    row_ids: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.row_offsets = np.ascontiguousarray(self.row_offsets, dtype=np.int64)
        self.col_indices = np.ascontiguousarray(self.col_indices, dtype=np.int64)
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.row_offsets.shape != (self.n_nodes + 1,):
            raise DimensionError(
                f"row_offsets must have {self.n_nodes + 1} entries, "
                f"got {self.row_offsets.shape}"
            )
        if self.col_indices.shape != self.values.shape:
            raise DimensionError("col_indices and values length mismatch")
        if self.row_ids is None:
            counts = np.diff(self.row_offsets)
            self.row_ids = np.repeat(np.arange(self.n_nodes, dtype=np.int64), counts)

    @property
    def nnz(self) -> int:
        return int(self.col_indices.shape[0])

    def matvec(self, y: np.ndarray) -> np.ndarray:
        """Matrix-vector product; float64, deterministic accumulation order."""
        y = np.asarray(y, dtype=np.float64)
        if y.shape != (self.n_nodes,):
            raise DimensionError(
                f"matvec expects shape ({self.n_nodes},), got {y.shape}"
            )
        return np.bincount(self.row_ids, weights=self.values * y[self.col_indices],
                           minlength=self.n_nodes)

    def row_sums(self) -> np.ndarray:
        return np.bincount(self.row_ids, weights=self.values, minlength=self.n_nodes)

    def to_dense(self) -> np.ndarray:
        dense = np.zeros((self.n_nodes, self.n_nodes), dtype=np.float64)
        dense[self.row_ids, self.col_indices] = self.values
        return dense


class PixelFeature(NamedTuple):
    """The 5-vector phi(i) for one pixel: color plus weighted position.

    d_x and d_y are ``eta * x / max(h, w)`` and ``eta * y / max(h, w)``, so
    both lie in [0, eta] and the spatial term stays commensurate with the
    unit-range color channels.
    """

    r: float
    g: float
    b: float
    d_x: float
    d_y: float


@dataclass
class FeatureField:
    """Per-pixel features for an image: a sequence of PixelFeature rows.

    Stored columnar as one (n, 5) float64 array in row-major pixel order
    (i = y * width + x); indexing materializes a PixelFeature view of row i.
    """

    array: np.ndarray  # (n, 5) float64
    height: int
    width: int
    eta: float

    def __len__(self) -> int:
        return self.array.shape[0]

    def __getitem__(self, i: int) -> PixelFeature:
        return PixelFeature(*self.array[i])


def extract_features(image, eta: float = 1.0) -> FeatureField:
    """Build (r, g, b, d_x, d_y) rows from a (3, H, W) image in [0, 1].

    Spatial coordinates are scaled by ``eta / max(h, w)`` so that the largest
    image dimension spans just under ``eta`` in feature space.  ``eta = 0``
    turns the graph color-only.
    """
    data = getattr(image, "data", image)
    img = np.asarray(data, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise DimensionError(f"image must be (3, H, W), got {img.shape}")
    if not np.isfinite(img).all():
        raise InputRangeError("image contains non-finite values")
    lo, hi = img.min(), img.max()
    if lo < 0.0 or hi > 1.0:
        raise InputRangeError(f"image values must lie in [0, 1], got [{lo}, {hi}]")
    if not (eta >= 0.0):
        raise ContractError(f"eta must be >= 0, got {eta}")
    _, h, w = img.shape
    scale = eta / max(h, w)
    xs = np.arange(w, dtype=np.float64) * scale
    ys = np.arange(h, dtype=np.float64) * scale
    n = h * w
    feats = np.empty((n, 5), dtype=np.float64)
    feats[:, 0] = img[0].ravel()
    feats[:, 1] = img[1].ravel()
    feats[:, 2] = img[2].ravel()
    feats[:, 3] = np.tile(xs, h)
    feats[:, 4] = np.repeat(ys, w)
    return FeatureField(feats, h, w, float(eta))


def _pairwise_d2(feats: np.ndarray, rows: np.ndarray, cols2d: np.ndarray) -> np.ndarray:
    """Squared distances between feats[rows] and feats[cols2d] (per row).

    Accumulates one feature at a time in index order; this exact sequence is
    shared by every search strategy so their floats agree to the last bit.
    """
    acc = np.zeros(cols2d.shape, dtype=np.float64)
    for f in range(feats.shape[1]):
        diff = feats[rows, f][:, None] - feats[cols2d, f]
        acc += diff * diff
    return acc


def _knn_brute(feats: np.ndarray, k: int, subset: np.ndarray | None = None,
               chunk: int = 256) -> np.ndarray:
    """Exact k-NN by full scan; rows limited to ``subset`` when given."""
    n = feats.shape[0]
    rows = np.arange(n, dtype=np.int64) if subset is None else subset
    out = np.empty((rows.shape[0], k), dtype=np.int64)
    all_idx = np.arange(n, dtype=np.int64)
    for s in range(0, rows.shape[0], chunk):
        r = rows[s:s + chunk]
        d2 = np.zeros((r.shape[0], n), dtype=np.float64)
        for f in range(feats.shape[1]):
            diff = feats[r, f][:, None] - feats[None, :, f]
            d2 += diff * diff
        d2[np.arange(r.shape[0]), r] = np.inf
        order = np.lexsort((np.broadcast_to(all_idx, d2.shape), d2), axis=-1)
        out[s:s + chunk] = order[:, :k]
    return out


def _ring_offsets(r_lo: int, r_hi: int, h: int, w: int):
    """All (dy, dx) with Chebyshev radius in (r_lo, r_hi], in scan order."""
    offs = []
    for r in range(r_lo + 1, r_hi + 1):
        for dy in range(-r, r + 1):
            for dx in range(-r, r + 1):
                if max(abs(dy), abs(dx)) == r and -h < dy < h and -w < dx < w:
                    offs.append((dy, dx))
    return offs


def _knn_grid(feats: np.ndarray, h: int, w: int, eta: float, k: int) -> np.ndarray:
    """Exact k-NN using spatial rings as a search frontier.

    Because the spatial features grow with pixel distance, any candidate at
    Chebyshev radius > R is at least ``eta * (R + 1) / max(h, w)`` away in
    feature space.  Rings expand until that lower bound exceeds the current
    k-th best distance for every still-active pixel; the stragglers (pixels
    next to strong color edges) are finished with a brute-force pass.
    """
    n = h * w
    m = max(h, w)
    f_img = feats.T.reshape(5, h, w)
    idx_img = np.arange(n, dtype=np.int64).reshape(h, w)
    best_d2 = np.full((n, k), np.inf, dtype=np.float64)
    best_idx = np.full((n, k), n, dtype=np.int64)
    active = np.arange(n, dtype=np.int64)
    finish_at = max(64, n // 256)
    r_max = max(h, w) - 1
    r = 0
    while r < r_max and active.shape[0] > 0:
        r_next = r + 1
        offs = _ring_offsets(r, r_next, h, w)
        r = r_next
        for s in range(0, len(offs), _OFFSET_BATCH):
            batch = offs[s:s + _OFFSET_BATCH]
            cand_d2 = np.empty((active.shape[0], len(batch)), dtype=np.float64)
            cand_idx = np.empty((active.shape[0], len(batch)), dtype=np.int64)
            for j, (dy, dx) in enumerate(batch):
                d2g = np.full((h, w), np.inf, dtype=np.float64)
                ig = np.full((h, w), n, dtype=np.int64)
                y0, y1 = max(0, -dy), h - max(0, dy)
                x0, x1 = max(0, -dx), w - max(0, dx)
                dst = f_img[:, y0:y1, x0:x1]
                src = f_img[:, y0 + dy:y1 + dy, x0 + dx:x1 + dx]
                acc = (dst[0] - src[0]) ** 2
                for f in range(1, 5):
                    acc = acc + (dst[f] - src[f]) ** 2
                d2g[y0:y1, x0:x1] = acc
                ig[y0:y1, x0:x1] = idx_img[y0 + dy:y1 + dy, x0 + dx:x1 + dx]
                cand_d2[:, j] = d2g.ravel()[active]
                cand_idx[:, j] = ig.ravel()[active]
            merged_d2 = np.concatenate([best_d2[active], cand_d2], axis=1)
            merged_idx = np.concatenate([best_idx[active], cand_idx], axis=1)
            order = np.lexsort((merged_idx, merged_d2), axis=-1)[:, :k]
            take = np.arange(active.shape[0])[:, None]
            best_d2[active] = merged_d2[take, order]
            best_idx[active] = merged_idx[take, order]
        lb = eta * (r + 1) / m
        still = best_d2[active, k - 1] >= lb * lb
        active = active[still]
        if 0 < active.shape[0] <= finish_at:
            best_idx[active] = _knn_brute(feats, k, subset=active)
            active = active[:0]
    if active.shape[0] > 0:
        best_idx[active] = _knn_brute(feats, k, subset=active)
    return best_idx


def knn_search(features: FeatureField, k: int, method: str = "auto") -> np.ndarray:
    """Indices of the k exact nearest neighbors of every pixel, self excluded.

    Ties in distance resolve to the lower pixel index.  ``method`` is a
    testing hook: "brute" and "grid" force a strategy, "auto" picks the grid
    frontier for large images with a usable spatial term and the full scan
    otherwise.  All strategies return identical arrays.
    """
    if not isinstance(features, FeatureField):
        raise ContractError("knn_search expects a FeatureField")
    n = len(features)
    if not (1 <= k < n):
        raise ContractError(f"k must be in [1, n_pixels), got k={k}, n={n}")
    if method not in ("auto", "brute", "grid"):
        raise ContractError(f"unknown search method {method!r}")
    if method == "auto":
        method = "grid" if n > _BRUTE_LIMIT and features.eta > 0 else "brute"
    if method == "grid":
        if features.eta <= 0:
            raise ContractError("grid search needs eta > 0 for its distance bound")
        return _knn_grid(features.array, features.height, features.width,
                         features.eta, k)
    return _knn_brute(features.array, k)


def build_affinity(features: FeatureField, neighbors: np.ndarray) -> SparseGraph:
    """Symmetric affinity graph ``(W + W^T) / 2`` from neighbor lists.

    Edge weights are ``clamp(1 - ||phi_i - phi_j||_2, 0, 1)``; entries that
    symmetrize to exactly zero are dropped, so every stored value is positive.
    """
    n = len(features)
    neighbors = np.asarray(neighbors)
    if neighbors.ndim != 2 or neighbors.shape[0] != n:
        raise DimensionError(
            f"neighbors must be (n, k) with n={n}, got {neighbors.shape}"
        )
    if neighbors.min() < 0 or neighbors.max() >= n:
        raise ContractError("neighbor indices out of range")
    if (neighbors == np.arange(n, dtype=neighbors.dtype)[:, None]).any():
        raise ContractError("neighbor lists must not contain the pixel itself")
    k = neighbors.shape[1]
    rows = np.repeat(np.arange(n, dtype=np.int64), k)
    cols = neighbors.reshape(-1).astype(np.int64)
    d2 = _pairwise_d2(features.array, np.arange(n, dtype=np.int64), neighbors)
    wts = np.clip(1.0 - np.sqrt(d2), 0.0, 1.0).reshape(-1)
    half = wts * 0.5
    r_all = np.concatenate([rows, cols])
    c_all = np.concatenate([cols, rows])
    v_all = np.concatenate([half, half])
    key = r_all * n + c_all
    uniq, inverse = np.unique(key, return_inverse=True)
    sums = np.bincount(inverse, weights=v_all, minlength=uniq.shape[0])
    keep = sums > 0.0
    uniq, sums = uniq[keep], sums[keep]
    r = uniq // n
    c = uniq % n
    counts = np.bincount(r, minlength=n)
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return SparseGraph(n, offsets, c, sums, GraphKind.AFFINITY, row_ids=r)


def _transpose_csr(g: SparseGraph):
    order = np.lexsort((g.row_ids, g.col_indices))
    return g.col_indices[order], g.row_ids[order], g.values[order]


def build_laplacian(affinity: SparseGraph) -> SparseGraph:
    """Graph Laplacian ``D - W`` of a symmetric affinity graph.

    Raises if the input is not an affinity graph, is not exactly symmetric,
    or carries diagonal entries.  Every Laplacian row stores its diagonal
    even when the node is isolated (degree zero).
    """
    if affinity.kind is not GraphKind.AFFINITY:
        raise ContractError("build_laplacian expects an affinity graph")
    t_rows, t_cols, t_vals = _transpose_csr(affinity)
    if not (np.array_equal(t_rows, affinity.row_ids)
            and np.array_equal(t_cols, affinity.col_indices)
            and np.array_equal(t_vals, affinity.values)):
        raise ContractError("affinity graph must be exactly symmetric")
    if (affinity.row_ids == affinity.col_indices).any():
        raise ContractError("affinity graph must have an empty diagonal")
    if affinity.nnz and (affinity.values.min() < 0.0 or affinity.values.max() > 1.0):
        raise ContractError("affinity weights must lie in [0, 1]")
    n = affinity.n_nodes
    diag = np.arange(n, dtype=np.int64)
    degrees = affinity.row_sums()
    r_all = np.concatenate([affinity.row_ids, diag])
    c_all = np.concatenate([affinity.col_indices, diag])
    v_all = np.concatenate([-affinity.values, degrees])
    order = np.lexsort((c_all, r_all))
    r_all, c_all, v_all = r_all[order], c_all[order], v_all[order]
    key = r_all * n + c_all
    if key.shape[0] > 1 and (key[1:] == key[:-1]).any():
        raise ContractError("affinity graph stores duplicate entries")
    counts = np.bincount(r_all, minlength=n)
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return SparseGraph(n, offsets, c_all, v_all, GraphKind.LAPLACIAN, row_ids=r_all)


def build_image_graph(image, k: int = 10, eta: float = 1.0):
    """Convenience pipeline: features -> k-NN -> affinity -> Laplacian.

    Returns ``(affinity, laplacian)``.
    """
    feats = extract_features(image, eta=eta)
    nn = knn_search(feats, k)
    aff = build_affinity(feats, nn)
    return aff, build_laplacian(aff)


def _check_quadratic_args(lap: SparseGraph, y: np.ndarray) -> np.ndarray:
    if lap.kind is not GraphKind.LAPLACIAN:
        raise ContractError("quadratic forms are defined on Laplacians")
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (lap.n_nodes,):
        raise DimensionError(f"y must have shape ({lap.n_nodes},), got {y.shape}")
    if not np.isfinite(y).all():
        raise InputRangeError("y contains non-finite values")
    return y


def quadratic_form(lap: SparseGraph, y: np.ndarray) -> float:
    """``y^T L y`` via the CSR matvec."""
    y = _check_quadratic_args(lap, y)
    return float(y @ lap.matvec(y))


def quadratic_form_edge_sum(lap: SparseGraph, y: np.ndarray) -> float:
    """``y^T L y`` as ``sum_{ij in E} w_ij (y_i - y_j)^2`` over stored edges.

    An independent route to the same number; the two implementations agree to
    roughly machine precision and the tests hold them to that.
    """
    y = _check_quadratic_args(lap, y)
    upper = lap.col_indices > lap.row_ids
    i = lap.row_ids[upper]
    j = lap.col_indices[upper]
    w = -lap.values[upper]
    diff = y[i] - y[j]
    return float(np.sum(w * diff * diff))


def quadratic_form_grad(lap: SparseGraph, y: np.ndarray) -> np.ndarray:
    """Gradient of the quadratic form: ``2 L y``."""
    y = _check_quadratic_args(lap, y)
    return 2.0 * lap.matvec(y)


def connected_component_count(g: SparseGraph) -> int:
    """Number of connected components, by union-find over stored edges.

    Isolated nodes each count as their own component.
    """
    n = g.n_nodes
    parent = np.arange(n, dtype=np.int64)

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    upper = g.col_indices > g.row_ids
    for a, b in zip(g.row_ids[upper], g.col_indices[upper]):
        ra, rb = find(int(a)), find(int(b))
        if ra != rb:
            parent[rb] = ra
    return int(sum(1 for i in range(n) if parent[i] == i))


def write_matrix_market(g: SparseGraph, path) -> None:
    """Write the lower triangle in MatrixMarket coordinate/symmetric format."""
    lower = g.col_indices <= g.row_ids
    rows = g.row_ids[lower] + 1
    cols = g.col_indices[lower] + 1
    vals = g.values[lower]
    with open(path, "w", encoding="ascii") as fh:
        fh.write("%%MatrixMarket matrix coordinate real symmetric\n")
        fh.write(f"{g.n_nodes} {g.n_nodes} {rows.shape[0]}\n")
        for r, c, v in zip(rows, cols, vals):
            fh.write(f"{r} {c} {v:.17g}\n")
