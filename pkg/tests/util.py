"""Shared test helpers: hand-built codebooks and small data generators."""

import numpy as np

from pqpim.quantizer import Codebook, CompressedKv, PqConfig, PqIndices, SENTINEL


def identity_compressed(keys, values, cfg):
    """CompressedKv whose codebook holds every quantized token as its own
    centroid (zero quantization error by construction)."""
    keys = np.asarray(keys, dtype=np.float32)
    values = np.asarray(values, dtype=np.float32)
    n, d = keys.shape
    s = min(cfg.sink_tokens, n)
    r = min(cfg.recent_tokens, n - s)
    lo, hi = s, n - r
    q = hi - lo
    m = cfg.m
    sub = d // m

    codes = np.full((n, m), SENTINEL, dtype=np.uint16)
    window_id = np.full(n, -1, dtype=np.int32)
    if q > 0:
        codes[lo:hi] = np.arange(q, dtype=np.uint16)[:, None]
        window_id[lo:hi] = 0
        bounds = ((lo, hi),)
        k_tables = (np.transpose(keys[lo:hi].reshape(q, m, sub), (1, 0, 2)).copy(),)
        v_tables = (np.transpose(values[lo:hi].reshape(q, m, sub), (1, 0, 2)).copy(),)
    else:
        bounds = ()
        k_tables = ()
        v_tables = ()

    return CompressedKv(
        key_codebook=Codebook(tables=k_tables, window_bounds=bounds),
        value_codebook=Codebook(tables=v_tables, window_bounds=bounds),
        key_indices=PqIndices(codes=codes, window_id=window_id),
        value_indices=PqIndices(codes=codes.copy(), window_id=window_id.copy()),
        sink_keys=keys[:s].copy(),
        sink_values=values[:s].copy(),
        recent_keys=keys[n - r :].copy(),
        recent_values=values[n - r :].copy(),
        n_tokens=n,
        head_dim=d,
        cfg=cfg,
    )


def random_compressed(rng, n, d, m, k, sink=0, recent=0):
    """CompressedKv with random codebooks and random index streams."""
    cfg = PqConfig(m=m, k=k, sink_tokens=sink, recent_tokens=recent)
    s = min(sink, n)
    r = min(recent, n - s)
    lo, hi = s, n - r
    q = hi - lo
    sub = d // m
    codes = np.full((n, m), SENTINEL, dtype=np.uint16)
    codes[lo:hi] = rng.integers(0, k, size=(q, m)).astype(np.uint16)
    window_id = np.full(n, -1, dtype=np.int32)
    window_id[lo:hi] = 0
    k_tables = (rng.normal(size=(m, k, sub)).astype(np.float32),)
    v_tables = (rng.normal(size=(m, k, sub)).astype(np.float32),)
    sink_k = rng.normal(size=(s, d)).astype(np.float32)
    sink_v = rng.normal(size=(s, d)).astype(np.float32)
    rec_k = rng.normal(size=(r, d)).astype(np.float32)
    rec_v = rng.normal(size=(r, d)).astype(np.float32)
    return CompressedKv(
        key_codebook=Codebook(tables=k_tables, window_bounds=((lo, hi),)),
        value_codebook=Codebook(tables=v_tables, window_bounds=((lo, hi),)),
        key_indices=PqIndices(codes=codes, window_id=window_id),
        value_indices=PqIndices(codes=codes.copy(), window_id=window_id.copy()),
        sink_keys=sink_k,
        sink_values=sink_v,
        recent_keys=rec_k,
        recent_values=rec_v,
        n_tokens=n,
        head_dim=d,
        cfg=cfg,
    )


def block_correlated_samples(rng, n, d, noise=0.05):
    """Channels come in correlated pairs (i, i + d//2): contiguous
    subvector splitting separates the pairs, sorting can reunite them."""
    half = d // 2
    latent = rng.normal(size=(n, half)).astype(np.float32)
    x = np.empty((n, d), dtype=np.float32)
    x[:, :half] = latent
    x[:, half:] = latent * rng.uniform(0.8, 1.2, size=half).astype(np.float32)
    x[:, half:] += noise * rng.normal(size=(n, half)).astype(np.float32)
    return x
