"""Importance-weighted k-means with a deterministic init stream.

Centroid updates use the weighted mean of the members; the recorded
objective is the total weighted squared distance (float64, true metric)
after each round. Assignment ranks centroids by the expanded form
-2 x.c + |c|^2 (the per-point |x|^2 term cannot change the argmin), which
runs through BLAS instead of materializing an (n, k, d) difference
tensor. A plain unweighted reference implementation shares the same
distance/init primitives so that uniform weights reproduce it bit for
bit.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, DimensionError
from .kvstore import as_matrix


def _prepare(points, weights, k: int):
    x = as_matrix(points, "points")
    n = x.shape[0]
    w = np.ascontiguousarray(weights, dtype=np.float32)
    if w.shape != (n,):
        raise DimensionError(f"weights shape {w.shape} != ({n},)")
    if np.any(w < 0):
        raise ConfigError("weights must be nonnegative")
    if float(w.sum()) <= 0.0:
        raise ConfigError("weights sum to zero")
    if k < 1:
        raise ConfigError("k must be >= 1")
    if k > n:
        raise ConfigError(f"k={k} exceeds n={n}; clamp before calling")
    return x, w


_ASSIGN_BLOCK = 4096


def _assign(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Nearest centroid per row; ties break toward the lowest index.

    One fused GEMM computes -2 x.c + |c|^2 directly (a constant column of
    ones against the centroid norms), and the argmin runs block by block
    while the scores are still cache resident.
    """
    n, d = x.shape
    ext = np.empty((centroids.shape[0], d + 1), dtype=np.float32)
    ext[:, :d] = -2.0 * centroids
    ext[:, d] = np.einsum("kd,kd->k", centroids, centroids)
    out = np.empty(n, dtype=np.int64)
    xext = np.empty((min(n, _ASSIGN_BLOCK), d + 1), dtype=np.float32)
    xext[:, d] = 1.0
    for lo in range(0, n, _ASSIGN_BLOCK):
        hi = min(lo + _ASSIGN_BLOCK, n)
        blk = xext[: hi - lo]
        blk[:, :d] = x[lo:hi]
        out[lo:hi] = np.argmin(blk @ ext.T, axis=1)
    return out


def _sq_dists(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # exact (n, k) squared distances; used on small inputs only
    d = x[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", d, d)


_INIT_POOL_FACTOR = 4
_INIT_POOL_MIN = 2048


def plusplus_init(
    x: np.ndarray, w: np.ndarray, k: int, rng: np.random.Generator
) -> np.ndarray:
    """k-means++ style seeding with weight-scaled D^2 sampling.

    For large inputs the sequential seeding runs on a weight-sampled
    candidate pool of max(4k, 2048) points, which keeps the seeding cost
    independent of n. Distance updates use |x|^2 - 2 x.c + |c|^2 clipped
    at zero; float noise there only perturbs sampling mass.
    """
    n = x.shape[0]
    pool_size = min(n, max(_INIT_POOL_FACTOR * k, _INIT_POOL_MIN))
    if pool_size < n:
        probs = w.astype(np.float64)
        nonzero = int((probs > 0).sum())
        if nonzero >= pool_size:
            pool = np.sort(
                rng.choice(n, size=pool_size, replace=False, p=probs / probs.sum())
            )
        else:
            pool = np.arange(n)
    else:
        pool = np.arange(n)
    xp = np.ascontiguousarray(x[pool])
    wp = np.ascontiguousarray(w[pool])

    m = xp.shape[0]
    x64 = xp.astype(np.float64)
    x_norms = np.einsum("nd,nd->n", x64, x64)
    centroids = np.empty((k, x.shape[1]), dtype=np.float32)
    w64 = wp.astype(np.float64)
    if w64.sum() <= 0:
        w64 = np.ones(m, dtype=np.float64)
    cum = np.cumsum(w64)
    idx = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
    idx = min(idx, m - 1)
    centroids[0] = xp[idx]
    used = {idx}
    cursor = 0

    def dist_to(center_idx):
        c = x64[center_idx]
        d = x_norms - 2.0 * (x64 @ c) + x_norms[center_idx]
        return np.maximum(d, 0.0, out=d)

    closest = dist_to(idx)
    for c in range(1, k):
        mass = np.cumsum(closest * w64)
        total = mass[-1]
        if total <= 0.0:
            # all remaining mass sits on already-chosen points: take the
            # lowest-index unused point for determinism
            while cursor in used:
                cursor += 1
            idx = cursor
        else:
            idx = int(np.searchsorted(mass, rng.random() * total, side="right"))
            idx = min(idx, m - 1)
        used.add(idx)
        centroids[c] = xp[idx]
        if total > 0.0:
            np.minimum(closest, dist_to(idx), out=closest)
    return centroids


def _update_weighted(x, w, k, assign):
    wsum = np.bincount(assign, weights=w.astype(np.float64), minlength=k)
    centroids = np.zeros((k, x.shape[1]), dtype=np.float64)
    wx = x.astype(np.float64) * w[:, None].astype(np.float64)
    for dim in range(x.shape[1]):
        centroids[:, dim] = np.bincount(assign, weights=wx[:, dim], minlength=k)
    nonempty = wsum > 0
    centroids[nonempty] /= wsum[nonempty, None]
    return centroids.astype(np.float32), nonempty


def _repair_empty(x, centroids, assign, weighted_dist, empties):
    # steal the points with the largest weighted distance to their
    # current centroid, one per empty cluster, lowest index on ties
    n = x.shape[0]
    order = np.lexsort((np.arange(n), -weighted_dist))
    for j, cid in enumerate(empties):
        centroids[cid] = x[order[j]]


def _objective(x, w, centroids, assign) -> float:
    diff = (x - centroids[assign]).astype(np.float64)
    per_point = np.einsum("nd,nd->n", diff, diff)
    return float(per_point @ w.astype(np.float64))


def _lloyd(x, w, k, iters, centroids):
    """Shared Lloyd loop; weighted means with empty-cluster repair."""
    assign = np.zeros(x.shape[0], dtype=np.int64)
    objective = []
    for _ in range(max(iters, 0)):
        assign = _assign(x, centroids)
        centroids, nonempty = _update_weighted(x, w, k, assign)
        empties = np.flatnonzero(~nonempty)
        if empties.size:
            diff = (x - centroids[assign]).astype(np.float64)
            cur = np.einsum("nd,nd->n", diff, diff) * w.astype(np.float64)
            _repair_empty(x, centroids, assign, cur, empties)
        objective.append(_objective(x, w, centroids, assign))
    return centroids, assign, np.array(objective, dtype=np.float64)


def weighted_kmeans(points, weights, k: int, iters: int, rng_seed: int):
    """Run ``iters`` rounds of weighted Lloyd with k-means++ seeding.

    Returns (centroids, assignments, objective_per_iter). The objective
    sequence is non-increasing up to float32 assignment rounding;
    assignment ties break toward the lowest centroid index.
    """
    x, w = _prepare(points, weights, k)
    rng = np.random.default_rng(rng_seed)
    centroids = plusplus_init(x, w, k, rng)
    return _lloyd(x, w, k, iters, centroids)


def weighted_kmeans_warm(points, weights, iters: int, init_centroids):
    """Weighted Lloyd rounds starting from given centroids (window
    copy-forward refinement path)."""
    init = as_matrix(init_centroids, "init_centroids")
    x, w = _prepare(points, weights, init.shape[0])
    if init.shape[1] != x.shape[1]:
        raise DimensionError("init centroid dim does not match points")
    return _lloyd(x, w, init.shape[0], iters, init.copy())


def reference_kmeans(points, k: int, iters: int, rng_seed: int):
    """Plain unweighted k-means, written as its own Lloyd loop.

    Serves as the oracle for the uniform-weight reduction: with unit
    weights, ``weighted_kmeans`` must reproduce these centroids and
    assignments exactly. The init and assignment primitives are shared
    (the reduction is defined for a common initialization stream); the
    update, repair, and objective logic is written out unweighted.
    """
    x = as_matrix(points, "points")
    n = x.shape[0]
    ones = np.ones(n, dtype=np.float32)
    rng = np.random.default_rng(rng_seed)
    centroids = plusplus_init(x, ones, k, rng)

    assign = np.zeros(n, dtype=np.int64)
    objective = []
    for _ in range(max(iters, 0)):
        assign = _assign(x, centroids)

        counts = np.bincount(assign, minlength=k)
        new_centroids = np.zeros((k, x.shape[1]), dtype=np.float64)
        x64 = x.astype(np.float64)
        for dim in range(x.shape[1]):
            new_centroids[:, dim] = np.bincount(
                assign, weights=x64[:, dim], minlength=k
            )
        nonempty = counts > 0
        new_centroids[nonempty] /= counts[nonempty, None]
        centroids = new_centroids.astype(np.float32)

        empties = np.flatnonzero(~nonempty)
        if empties.size:
            diff = (x - centroids[assign]).astype(np.float64)
            cur = np.einsum("nd,nd->n", diff, diff)
            order = np.lexsort((np.arange(n), -cur))
            for j, cid in enumerate(empties):
                centroids[cid] = x[order[j]]

        diff = (x - centroids[assign]).astype(np.float64)
        objective.append(float(np.einsum("nd,nd->", diff, diff)))
    return centroids, assign, np.array(objective, dtype=np.float64)


def nearest_centroid(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Index of the nearest centroid per row, exact squared distances,
    lowest index on ties."""
    return np.argmin(_sq_dists(as_matrix(x, "points"), centroids), axis=1)
