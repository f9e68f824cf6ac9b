"""Attention on the compressed representation, plus the exact oracle.

The compressed path never reconstructs the key matrix: per window and
subvector it computes the k inner products between the query subvector
and the centroids once, then gathers and sums table entries through the
stored indices. Value rows are reconstructed from the value codebook for
the weighted sum. ``rounding="round16"`` narrows table entries and every
partial sum to 16 bits to model an FP16 datapath.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .kvstore import as_matrix
from .quantizer import CompressedKv, PqConfig, reconstruct


@dataclass(frozen=True)
class AttentionOutput:
    out: np.ndarray                # (head_dim,)
    scores: np.ndarray | None = None  # (n_tokens,) diagnostics


def exact_attention(q, keys, vals, scale: float | None = None) -> AttentionOutput:
    """Reference softmax(q . K^T * scale) . V in float32."""
    k = as_matrix(keys, "keys")
    v = as_matrix(vals, "vals")
    q = np.asarray(q, dtype=np.float32).reshape(-1)
    if k.shape != v.shape:
        raise DimensionError("keys/vals shape mismatch")
    if q.shape[0] != k.shape[1]:
        raise DimensionError("q length does not match head_dim")
    if scale is None:
        scale = 1.0 / np.sqrt(q.shape[0])
    logits = (k @ q) * np.float32(scale)
    logits -= logits.max()
    e = np.exp(logits, dtype=np.float32)
    scores = e / e.sum(dtype=np.float32)
    return AttentionOutput(out=scores @ v, scores=scores)


def inner_product_tables(q: np.ndarray, codebook, rounding: str = "exact32"):
    """Per-window, per-subvector vectors of <q_s, centroid_j>.

    tables[w] has shape (m, k_w); entries are narrowed to f16 when
    rounding is "round16" (they are stored in a 16-bit row in hardware).
    """
    out = []
    for table in codebook.tables:
        m, _, sub = table.shape
        qs = q.reshape(m, sub)
        ip = np.einsum("mks,ms->mk", table, qs).astype(np.float32)
        if rounding == "round16":
            ip = ip.astype(np.float16).astype(np.float32)
        out.append(ip)
    return out


def _gathered_logits(ckv: CompressedKv, tables, rounding: str) -> np.ndarray:
    """Steps 3-4 of the compressed path: gather table entries through the
    key indices and sum over subvectors; equals q . K_hat^T."""
    lo, hi = ckv.quantized_range()
    m = ckv.cfg.m
    codes = ckv.key_indices.codes
    logits = np.zeros(hi - lo, dtype=np.float32)
    for w, (start, end) in enumerate(ckv.key_codebook.window_bounds):
        block = codes[start:end].astype(np.int64)
        if rounding == "round16":
            acc = np.zeros(end - start, dtype=np.float16)
            for s in range(m):
                acc = (acc + tables[w][s][block[:, s]].astype(np.float16)).astype(
                    np.float16
                )
            logits[start - lo : end - lo] = acc.astype(np.float32)
        else:
            acc = np.zeros(end - start, dtype=np.float32)
            for s in range(m):
                acc += tables[w][s][block[:, s]]
            logits[start - lo : end - lo] = acc
    return logits


def _softmax16(logits: np.ndarray) -> np.ndarray:
    x = logits.astype(np.float16)
    x = (x - x.max()).astype(np.float16)
    e = np.exp(x.astype(np.float32)).astype(np.float16)
    total = e.sum(dtype=np.float16)
    return (e / total).astype(np.float32)


def pq_attention(
    q,
    ckv: CompressedKv,
    cfg: PqConfig,
    scale: float | None = None,
    rounding: str = "exact32",
) -> AttentionOutput:
    """Attention over the compressed cache.

    ``q`` must already be permuted into the cache's channel order. Sink
    and sliding-window tokens take the exact dot-product path; quantized
    tokens go through table lookup and summation.
    """
    q = np.asarray(q, dtype=np.float32).reshape(-1)
    if q.shape[0] != ckv.head_dim:
        raise DimensionError("q length does not match head_dim")
    if rounding not in ("exact32", "round16"):
        raise ConfigError(f"unknown rounding mode {rounding!r}")
    if scale is None:
        scale = 1.0 / np.sqrt(ckv.head_dim)

    tables = inner_product_tables(q, ckv.key_codebook, rounding)
    lo, hi = ckv.quantized_range()
    logits = np.empty(ckv.n_tokens, dtype=np.float32)
    logits[:lo] = ckv.sink_keys @ q
    logits[lo:hi] = _gathered_logits(ckv, tables, rounding)
    logits[hi:] = ckv.recent_keys @ q
    if rounding == "round16":
        logits = logits.astype(np.float16).astype(np.float32)

    logits = logits * np.float32(scale)
    if rounding == "round16":
        scores = _softmax16(logits)
    else:
        shifted = logits - logits.max()
        e = np.exp(shifted, dtype=np.float32)
        scores = e / e.sum(dtype=np.float32)

    v_hat = reconstruct(ckv, "value")
    if rounding == "round16":
        v16 = v_hat.astype(np.float16)
        s16 = scores.astype(np.float16)
        out = np.zeros(ckv.head_dim, dtype=np.float16)
        out = (out + (s16[:lo] @ ckv.sink_values.astype(np.float16))).astype(np.float16)
        out = (out + (s16[lo:hi] @ v16)).astype(np.float16)
        out = (out + (s16[hi:] @ ckv.recent_values.astype(np.float16))).astype(
            np.float16
        )
        return AttentionOutput(out=out.astype(np.float32), scores=scores)

    out = scores[:lo] @ ckv.sink_values
    out = out + scores[lo:hi] @ v_hat
    out = out + scores[hi:] @ ckv.recent_values
    return AttentionOutput(out=out.astype(np.float32), scores=scores)


def attention_fidelity(
    keys,
    values,
    ckv: CompressedKv,
    cfg: PqConfig,
    n_queries: int,
    rng_seed: int,
    perm_k=None,
    perm_v=None,
    scale: float | None = None,
):
    """(score_l1, output_cos) of compressed vs exact attention, averaged
    over queries drawn near the key distribution.

    ``keys``/``values`` are the raw token matrices; permutations applied
    at build time are replayed here so both paths see consistent data.
    """
    k_raw = as_matrix(keys, "keys")
    v_raw = as_matrix(values, "values")
    rng = np.random.default_rng(rng_seed)
    std = float(k_raw.std()) or 1.0
    idx = rng.integers(0, k_raw.shape[0], size=n_queries)
    noise = rng.normal(0.0, 0.25 * std, size=(n_queries, k_raw.shape[1]))
    queries = (k_raw[idx] + noise).astype(np.float32)

    l1 = []
    cos = []
    for q in queries:
        ref = exact_attention(q, k_raw, v_raw, scale)
        qp = perm_k.apply(q) if perm_k is not None else q
        got = pq_attention(qp, ckv, cfg, scale)
        out = got.out
        if perm_v is not None:
            # undo the value permutation to compare in raw channel order
            inv = np.argsort(np.array(perm_v.order))
            out = out[inv]
        l1.append(float(np.abs(ref.scores - got.scores).sum()))
        denom = np.linalg.norm(ref.out) * np.linalg.norm(out)
        cos.append(float(ref.out @ out / denom) if denom > 0 else 1.0)
    return float(np.mean(l1)), float(np.mean(cos))
