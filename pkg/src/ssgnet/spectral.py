"""Eigensolvers for graph Laplacians, implemented from first principles.

Two independent routes to the bottom of the spectrum:

* ``dense_smallest_eigs`` tridiagonalizes the full matrix with Householder
  reflections and runs implicit-shift QL on the result.  It is the reference
  answer for everything else in the package and is deliberately free of any
  third-party eigensolver.
* ``lanczos_smallest_eigs`` iterates on the shifted operator ``cI - L``
  (``c`` a Gershgorin upper bound, so the smallest Laplacian eigenvalues
  become the largest and converge first) with full reorthogonalization
  against every stored basis vector.  An exact zero residual splits the
  tridiagonal projection into blocks; the iteration restarts with a fresh
  random vector orthogonal to the existing basis, which handles graphs with
  several connected components.

Both return ascending eigenvalues with orthonormal eigenvectors and true
residual norms ``||L v - lambda v||``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError, SsgError
from .graph import GraphKind, SparseGraph

_EPS = float(np.finfo(np.float64).eps)
_DENSE_LIMIT = 4096
_MAX_QL_SWEEPS = 50


@dataclass
class EigenPairs:
    """Eigenvalues (ascending) with matching eigenvector columns."""

    values: np.ndarray     # (m,)
    vectors: np.ndarray    # (n, m), orthonormal columns
    residuals: np.ndarray  # (m,) norms of L v - lambda v
    converged: bool

    def __post_init__(self):
        if self.vectors.shape[1] != self.values.shape[0]:
            raise DimensionError("eigenvalue/eigenvector count mismatch")


def _tred2(a: np.ndarray):
    """Householder reduction of a symmetric matrix to tridiagonal form.

    Returns ``(d, e, q)`` where ``d`` is the diagonal, ``e[i]`` the
    subdiagonal entry coupling rows i-1 and i (``e[0]`` is zero), and ``q``
    the accumulated orthogonal transform with ``a = q T q^T``.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    d = np.zeros(n)
    e = np.zeros(n)
    reflectors = []
    for i in range(n - 1, 0, -1):
        l = i
        x = a[i, :l].copy()
        if l == 1:
            e[i] = x[0]
            continue
        scale = np.abs(x).sum()
        if scale == 0.0:
            e[i] = 0.0
            continue
        x /= scale
        h = float(x @ x)
        f = float(x[-1])
        g = -math.copysign(math.sqrt(h), f)
        e[i] = scale * g
        h -= f * g
        x[-1] = f - g
        p = a[:l, :l] @ x / h
        kk = float(x @ p) / (2.0 * h)
        q_vec = p - kk * x
        a[:l, :l] -= np.outer(q_vec, x)
        a[:l, :l] -= np.outer(x, q_vec)
        reflectors.append((l, x, h))
    d[:] = np.diag(a)
    q = np.eye(n)
    for l, u, h in reflectors:
        qu = q[:, :l] @ u
        q[:, :l] -= np.outer(qu, u) / h
    return d, e, q


def _tql2(d: np.ndarray, e: np.ndarray, z: np.ndarray | None):
    """Implicit-shift QL iteration on a symmetric tridiagonal matrix.

    ``d`` is the diagonal and ``e[i]`` couples rows i-1 and i (``e[0]``
    ignored).  When ``z`` is given, its columns are rotated along, so passing
    the tridiagonalizing transform yields eigenvectors of the original
    matrix.  Returns ascending eigenvalues and the rotated ``z`` (or None).
    Both inputs are consumed.
    """
    n = d.shape[0]
    d = np.asarray(d, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    if n == 1:
        return d.copy(), None if z is None else np.array(z, dtype=np.float64)
    e = np.roll(e, -1)
    e[n - 1] = 0.0
    for ll in range(n):
        sweeps = 0
        while True:
            m = ll
            while m < n - 1:
                tst = abs(d[m]) + abs(d[m + 1])
                if abs(e[m]) <= _EPS * tst:
                    break
                m += 1
            if m == ll:
                break
            if sweeps >= _MAX_QL_SWEEPS:
                raise SsgError("QL iteration failed to converge")
            sweeps += 1
            g = (d[ll + 1] - d[ll]) / (2.0 * e[ll])
            r = math.hypot(g, 1.0)
            g = d[m] - d[ll] + e[ll] / (g + math.copysign(r, g))
            s = 1.0
            c = 1.0
            p = 0.0
            underflow = False
            for i in range(m - 1, ll - 1, -1):
                f = s * e[i]
                b = c * e[i]
                r = math.hypot(f, g)
                e[i + 1] = r
                if r == 0.0:
                    d[i + 1] -= p
                    e[m] = 0.0
                    underflow = True
                    break
                s = f / r
                c = g / r
                g = d[i + 1] - p
                r = (d[i] - g) * s + 2.0 * c * b
                p = s * r
                d[i + 1] = g + p
                g = c * r - b
                if z is not None:
                    zi1 = z[:, i + 1].copy()
                    z[:, i + 1] = s * z[:, i] + c * zi1
                    z[:, i] = c * z[:, i] - s * zi1
            if not underflow:
                d[ll] -= p
                e[ll] = g
                e[m] = 0.0
    order = np.argsort(d, kind="stable")
    d = d[order]
    if z is not None:
        z = z[:, order]
    return d, z


def _check_lap(lap: SparseGraph, m: int) -> None:
    if lap.kind is not GraphKind.LAPLACIAN:
        raise ContractError("eigensolvers operate on Laplacians")
    if not (1 <= m <= lap.n_nodes):
        raise ContractError(
            f"need 1 <= m <= n_nodes, got m={m}, n={lap.n_nodes}"
        )


def _residuals(lap: SparseGraph, values: np.ndarray, vectors: np.ndarray):
    res = np.empty(values.shape[0])
    for i in range(values.shape[0]):
        v = vectors[:, i]
        res[i] = np.linalg.norm(lap.matvec(v) - values[i] * v)
    return res


def dense_smallest_eigs(lap: SparseGraph, m: int) -> EigenPairs:
    """The m smallest eigenpairs by direct dense factorization.

    O(n^3) and O(n^2) memory, guarded at 4096 nodes; beyond that use the
    Lanczos path.  This is the oracle the iterative solver is tested against.
    """
    _check_lap(lap, m)
    n = lap.n_nodes
    if n > _DENSE_LIMIT:
        raise ContractError(
            f"dense solver is capped at {_DENSE_LIMIT} nodes (got {n}); "
            "use lanczos_smallest_eigs"
        )
    d, e, q = _tred2(lap.to_dense())
    values, vectors = _tql2(d, e, q)
    values = values[:m]
    vectors = vectors[:, :m]
    return EigenPairs(values, vectors, _residuals(lap, values, vectors), True)


def _gershgorin_upper(lap: SparseGraph) -> float:
    row_abs = np.bincount(lap.row_ids, weights=np.abs(lap.values),
                          minlength=lap.n_nodes)
    return float(row_abs.max()) if lap.nnz else 0.0


def _ritz_values(alphas, betas, j: int) -> np.ndarray:
    d = np.array(alphas[:j])
    e = np.zeros(j)
    e[1:] = betas[:j - 1]
    vals, _ = _tql2(d, e, None)
    return vals


def _ritz_pairs(alphas, betas, j: int):
    d = np.array(alphas[:j])
    e = np.zeros(j)
    e[1:] = betas[:j - 1]
    return _tql2(d, e, np.eye(j))


def lanczos_smallest_eigs(lap: SparseGraph, m: int, tol: float = 1e-8,
                          max_iter: int | None = None,
                          seed: int = 0) -> EigenPairs:
    """The m smallest eigenpairs by shifted Lanczos with full reorthogonalization.

    Iterates on ``cI - L`` so the target eigenvalues are the dominant ones.
    Every new direction is orthogonalized against the whole basis twice,
    which keeps the projected problem honest at the cost of O(n j) work per
    step.  Convergence is declared only from true residuals
    ``||L v - lambda v|| <= tol * max(1, |lambda|)``; if the iteration budget
    runs out first the best available pairs are returned with
    ``converged=False``.  Seeded, and bit-reproducible for a fixed seed.
    """
    _check_lap(lap, m)
    if tol <= 0:
        raise ContractError(f"tol must be positive, got {tol}")
    n = lap.n_nodes
    c = _gershgorin_upper(lap)
    if max_iter is None:
        max_iter = int(4 * m * math.sqrt(n)) + 8
    max_iter = max(min(n, max_iter), min(n, m + 2))
    rng = np.random.default_rng(seed)
    qmat = np.zeros((n, max_iter))
    alphas: list[float] = []
    betas: list[float] = []
    breakdown_tol = 100.0 * n * _EPS * max(c, 1.0)

    def fresh_direction(j: int) -> np.ndarray | None:
        for _ in range(8):
            v = rng.standard_normal(n)
            for _ in range(2):
                if j:
                    v -= qmat[:, :j] @ (qmat[:, :j].T @ v)
            nv = np.linalg.norm(v)
            if nv > 1e-6:
                return v / nv
        return None

    qmat[:, 0] = fresh_direction(0)
    j = 0
    check_every = 16
    last_theta = None
    best: EigenPairs | None = None

    def harvest(j: int) -> EigenPairs:
        tvals, tvecs = _ritz_pairs(alphas, betas, j)
        sel = np.argsort(-tvals, kind="stable")[:m]
        mu = tvals[sel]
        vecs = qmat[:, :j] @ tvecs[:, sel]
        lam = c - mu
        order = np.argsort(lam, kind="stable")
        lam = lam[order]
        vecs = vecs[:, order]
        norms = np.linalg.norm(vecs, axis=0)
        vecs = vecs / np.where(norms > 0, norms, 1.0)
        res = _residuals(lap, lam, vecs)
        ok = bool(np.all(res <= tol * np.maximum(1.0, np.abs(lam))))
        return EigenPairs(lam, vecs, res, ok)

    while j < max_iter:
        u = c * qmat[:, j] - lap.matvec(qmat[:, j])
        alpha = float(qmat[:, j] @ u)
        alphas.append(alpha)
        u -= alpha * qmat[:, j]
        if j > 0:
            u -= betas[j - 1] * qmat[:, j - 1]
        for _ in range(2):
            u -= qmat[:, :j + 1] @ (qmat[:, :j + 1].T @ u)
        beta = float(np.linalg.norm(u))
        j += 1
        if beta <= breakdown_tol:
            betas.append(0.0)
            if j >= max_iter:
                break
            v = fresh_direction(j)
            if v is None:
                break
            qmat[:, j] = v
        else:
            betas.append(beta)
            if j >= max_iter:
                break
            qmat[:, j] = u / beta
        if j >= min(max_iter, max(m + 2, 2 * m)) and j % check_every == 0:
            theta = _ritz_values(alphas, betas, j)[-m:]
            if last_theta is not None and theta.shape == last_theta.shape:
                drift = np.abs(theta - last_theta)
                if np.all(drift <= tol * np.maximum(1.0, np.abs(theta))):
                    best = harvest(j)
                    if best.converged:
                        return best
            last_theta = theta
    final = harvest(j)
    if best is not None and not final.converged and best.converged:
        return best
    return final


def reference_softseg(pairs: EigenPairs, n: int, shape=None) -> np.ndarray:
    """Soft segmentation maps from the bottom of the spectrum.

    Takes the n smallest non-constant eigenvectors, min-max normalizes each
    onto [0, 1], and (for n >= 2) renormalizes per pixel so the maps sum to
    one.  Near-constant eigenvectors (the nullspace of a connected graph) are
    skipped with a warning, so callers should solve for at least n+1 pairs.

    Output is (n, n_nodes); pass the image grid as ``shape=(h, w)`` to get
    (n, h, w) instead (the eigenvector layout carries no spatial size of its
    own).
    """
    if n < 1:
        raise ContractError(f"need n >= 1 maps, got {n}")
    n_nodes = pairs.vectors.shape[0]
    if shape is not None:
        h, w = int(shape[0]), int(shape[1])
        if h * w != n_nodes:
            raise DimensionError(
                f"shape {h}x{w} does not match {n_nodes} graph nodes"
            )
    maps = []
    for col in range(pairs.vectors.shape[1]):
        v = pairs.vectors[:, col]
        spread = float(v.max() - v.min())
        if spread <= 1e-8 * max(1.0, float(np.abs(v).max())):
            warnings.warn(
                f"skipping near-constant eigenvector {col} "
                f"(value {pairs.values[col]:.3e})"
            )
            continue
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        maps.append((v - v.min()) / (v.max() - v.min()))
        if len(maps) == n:
            break
    if len(maps) < n:
        raise ContractError(
            f"only {len(maps)} non-constant eigenvectors available, need {n}"
        )
    out = np.stack(maps)
    if n >= 2:
        s = out.sum(axis=0)
        flat = s < 1e-12
        out = np.where(flat[None], 1.0 / n, out / np.where(flat, 1.0, s)[None])
    if shape is not None:
        return out.reshape(n, h, w)
    return out
