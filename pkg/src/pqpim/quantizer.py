"""Codebook and index construction for the compressed KV cache.

Tokens outside the full-precision sink / recent ranges are split into m
subvectors and clustered per window with importance-weighted k-means.
Each window's centroid table is sized to fit a DRAM row (page residency),
and windows after the first warm-start from the previous window's
centroids. Codebooks are never updated during decoding; an evicted
sliding-window token is simply assigned to its nearest centroids.
"""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DimensionError, FormatError, TruncatedFileError
from .kmeans import nearest_centroid, weighted_kmeans, weighted_kmeans_warm
from .kvstore import KvDump, as_matrix

SENTINEL = 0xFFFF  # full-precision marker in index streams
PQ_MAGIC = b"AQPQ"
PQ_VERSION = 1


@dataclass(frozen=True)
class PqConfig:
    """Product-quantization hyperparameters.

    window_len 0 means a single clustering window over the whole
    quantizable range. sink_tokens / recent_tokens stay full precision;
    t is the attention-score aggregation window for importance weights.
    """

    m: int = 32
    k: int = 512
    iters: int = 4
    window_len: int = 0
    sink_tokens: int = 8
    recent_tokens: int = 32
    t: int = 32
    rng_seed: int = 0

    def __post_init__(self):
        if self.m < 1:
            raise ConfigError("m must be >= 1")
        if not 1 <= self.k <= 65536:
            raise ConfigError("k must be in [1, 65536] (16-bit indices)")
        if self.iters < 0 or self.window_len < 0:
            raise ConfigError("iters/window_len must be >= 0")
        if self.sink_tokens < 0 or self.recent_tokens < 0 or self.t < 0:
            raise ConfigError("token counts must be >= 0")

    def index_bits(self) -> int:
        return max(1, math.ceil(math.log2(self.k)))


@dataclass(frozen=True)
class Codebook:
    """Per-window, per-subvector centroid tables.

    tables[w] has shape (m, k_w, head_dim // m); window_bounds[w] is the
    [start, end) token range the window covers.
    """

    tables: tuple
    window_bounds: tuple

    @property
    def n_windows(self) -> int:
        return len(self.tables)

    def window_of(self, token: int) -> int:
        for w, (start, end) in enumerate(self.window_bounds):
            if start <= token < end:
                return w
        raise ConfigError(f"token {token} not covered by any window")

    def check_page_residency(self, row_buffer_bytes: int) -> None:
        for table in self.tables:
            if table.shape[1] * 2 > row_buffer_bytes:
                raise ConfigError(
                    f"window table with k={table.shape[1]} exceeds a "
                    f"{row_buffer_bytes}-byte row buffer"
                )


@dataclass(frozen=True)
class PqIndices:
    """Per-token, per-subvector centroid assignments.

    codes is (n_tokens, m) uint16 with SENTINEL marking full-precision
    tokens; window_id is (n_tokens,) int32 with -1 for those tokens.
    """

    codes: np.ndarray
    window_id: np.ndarray

    def validate(self, codebook: Codebook) -> None:
        if self.codes.dtype != np.uint16:
            raise DimensionError("codes must be uint16")
        for w, (start, end) in enumerate(codebook.window_bounds):
            block = self.codes[start:end]
            if block.size and int(block.max()) >= codebook.tables[w].shape[1]:
                raise DimensionError(f"index out of range in window {w}")
            if not np.all(self.window_id[start:end] == w):
                raise DimensionError(f"window_id mismatch in window {w}")


@dataclass(frozen=True)
class CompressedKv:
    """The compressed cache for one (layer, kv_head): codebooks, index
    streams, and the raw sink / sliding-window token blocks.

    All tensors live in the channel-permuted space used at build time;
    queries and appended tokens must be permuted consistently by the
    caller.
    """

    key_codebook: Codebook
    value_codebook: Codebook
    key_indices: PqIndices
    value_indices: PqIndices
    sink_keys: np.ndarray
    sink_values: np.ndarray
    recent_keys: np.ndarray
    recent_values: np.ndarray
    n_tokens: int
    head_dim: int
    cfg: PqConfig
    objectives: dict | None = field(default=None, compare=False, repr=False)

    @property
    def n_sink(self) -> int:
        return self.sink_keys.shape[0]

    @property
    def n_recent(self) -> int:
        return self.recent_keys.shape[0]

    @property
    def n_quantized(self) -> int:
        return self.n_tokens - self.n_sink - self.n_recent

    def quantized_range(self) -> tuple[int, int]:
        return self.n_sink, self.n_tokens - self.n_recent


def compute_importance_weights(s_matrix, t: int) -> np.ndarray:
    """Column sums of the last t post-softmax attention rows."""
    s = as_matrix(s_matrix, "attention scores")
    n = s.shape[0]
    if t > n:
        raise ConfigError(f"t={t} exceeds n_rows={n}")
    if t == 0:
        return np.zeros(s.shape[1], dtype=np.float32)
    return s[n - t :, :].sum(axis=0, dtype=np.float64).astype(np.float32)


def _subvectors(tokens: np.ndarray, m: int) -> np.ndarray:
    n, d = tokens.shape
    return tokens.reshape(n, m, d // m)


def window_ranges(start: int, end: int, window_len: int):
    """[start, end) split into clustering windows (0 = single window)."""
    if end <= start:
        return []
    if window_len == 0:
        return [(start, end)]
    return [(a, min(a + window_len, end)) for a in range(start, end, window_len)]


_window_ranges = window_ranges


def _stream_seed(base_seed: int, stream: int, subvector: int, window: int) -> int:
    ss = np.random.SeedSequence([base_seed & 0xFFFFFFFFFFFFFFFF, stream, subvector, window])
    return int(ss.generate_state(1)[0])


def _cluster_stream(tokens, weights, cfg: PqConfig, ranges, stream_id: int):
    """Cluster one token stream (keys or values) window by window.

    Returns (tables per window, codes (n_quant rows already positioned by
    caller), objectives per (window, subvector)).
    """
    m = cfg.m
    subs = _subvectors(tokens, m)
    codes = np.full((tokens.shape[0], m), SENTINEL, dtype=np.uint16)
    tables = []
    objectives = []
    prev: list[np.ndarray] | None = None
    for w, (start, end) in enumerate(ranges):
        size = end - start
        k_w = min(cfg.k, size)
        table = np.empty((m, k_w, subs.shape[2]), dtype=np.float32)
        win_obj = []
        cur: list[np.ndarray] = []
        for s in range(m):
            pts = subs[start:end, s, :]
            wts = weights[start:end]
            if prev is not None and prev[s].shape[0] == k_w:
                cents, assign, obj = weighted_kmeans_warm(pts, wts, cfg.iters, prev[s])
            else:
                seed = _stream_seed(cfg.rng_seed, stream_id, s, w)
                cents, assign, obj = weighted_kmeans(pts, wts, k_w, cfg.iters, seed)
            if cfg.iters == 0:
                # zero refinement rounds still need assignments
                assign = nearest_centroid(pts, cents)
            table[s] = cents
            codes[start:end, s] = assign.astype(np.uint16)
            win_obj.append(obj)
            cur.append(cents)
        tables.append(table)
        objectives.append(win_obj)
        prev = cur
    return tables, codes, objectives


def build_compressed_kv(
    dump: KvDump,
    layer: int,
    kv_head: int,
    cfg: PqConfig,
    perm_k=None,
    perm_v=None,
    row_buffer_bytes: int = 1024,
) -> CompressedKv:
    """Quantize one (layer, kv_head) slice of a dump.

    Channels are permuted first; the sink and recent ranges are stored raw
    and excluded from clustering. Key and value streams cluster
    independently but share the importance weights.
    """
    keys, values, weights = dump.head(layer, kv_head)
    n, d = keys.shape
    if d % cfg.m != 0:
        raise ConfigError(f"head_dim {d} not divisible by m={cfg.m}")
    if min(cfg.k, max(n - cfg.sink_tokens - cfg.recent_tokens, 1)) * 2 > row_buffer_bytes:
        raise ConfigError(
            f"k={cfg.k} cannot be page resident in {row_buffer_bytes}-byte rows"
        )
    if weights is None:
        warnings.warn("dump has no importance weights; assuming uniform", RuntimeWarning)
        weights = np.ones(n, dtype=np.float32)
    if perm_k is not None:
        keys = perm_k.apply(keys)
    if perm_v is not None:
        values = perm_v.apply(values)

    s = min(cfg.sink_tokens, n)
    r = min(cfg.recent_tokens, n - s)
    ranges = _window_ranges(s, n - r, cfg.window_len)

    k_tables, k_codes, k_obj = _cluster_stream(keys, weights, cfg, ranges, 0)
    v_tables, v_codes, v_obj = _cluster_stream(values, weights, cfg, ranges, 1)

    window_id = np.full(n, -1, dtype=np.int32)
    for w, (start, end) in enumerate(ranges):
        window_id[start:end] = w

    bounds = tuple(ranges)
    key_cb = Codebook(tables=tuple(k_tables), window_bounds=bounds)
    val_cb = Codebook(tables=tuple(v_tables), window_bounds=bounds)
    key_cb.check_page_residency(row_buffer_bytes)
    val_cb.check_page_residency(row_buffer_bytes)

    return CompressedKv(
        key_codebook=key_cb,
        value_codebook=val_cb,
        key_indices=PqIndices(codes=k_codes, window_id=window_id),
        value_indices=PqIndices(codes=v_codes, window_id=window_id.copy()),
        sink_keys=keys[:s].copy(),
        sink_values=values[:s].copy(),
        recent_keys=keys[n - r :].copy(),
        recent_values=values[n - r :].copy(),
        n_tokens=n,
        head_dim=d,
        cfg=cfg,
        objectives={"key": k_obj, "value": v_obj},
    )


def _assign_token(vec: np.ndarray, codebook: Codebook, m: int) -> np.ndarray:
    table = codebook.tables[-1]
    sub = vec.reshape(m, -1)
    out = np.empty(m, dtype=np.uint16)
    for s in range(m):
        out[s] = nearest_centroid(sub[s : s + 1], table[s])[0]
    return out


def append_decode_token(
    ckv: CompressedKv, new_k, new_v, cfg: PqConfig
) -> CompressedKv:
    """Admit one decode-step token (already channel-permuted).

    The token enters the sliding window; if the window was full, the
    evicted token is assigned to its nearest centroids in the current
    (last) window. Codebooks are never updated here.
    """
    new_k = np.asarray(new_k, dtype=np.float32).reshape(-1)
    new_v = np.asarray(new_v, dtype=np.float32).reshape(-1)
    if new_k.shape[0] != ckv.head_dim or new_v.shape[0] != ckv.head_dim:
        raise DimensionError("new token dim does not match head_dim")

    n = ckv.n_tokens
    k_codes = np.vstack([ckv.key_indices.codes, np.full((1, cfg.m), SENTINEL, np.uint16)])
    v_codes = np.vstack([ckv.value_indices.codes, np.full((1, cfg.m), SENTINEL, np.uint16)])
    k_win = np.append(ckv.key_indices.window_id, -1).astype(np.int32)
    v_win = np.append(ckv.value_indices.window_id, -1).astype(np.int32)

    recent_k = np.vstack([ckv.recent_keys, new_k[None, :]])
    recent_v = np.vstack([ckv.recent_values, new_v[None, :]])
    key_cb, val_cb = ckv.key_codebook, ckv.value_codebook

    if ckv.n_recent >= cfg.recent_tokens and cfg.recent_tokens > 0:
        if key_cb.n_windows == 0:
            raise ConfigError("cannot evict: no codebook window exists yet")
        evict_pos = n - ckv.n_recent  # oldest sliding-window token
        k_codes[evict_pos] = _assign_token(recent_k[0], key_cb, cfg.m)
        v_codes[evict_pos] = _assign_token(recent_v[0], val_cb, cfg.m)
        last = key_cb.n_windows - 1
        k_win[evict_pos] = last
        v_win[evict_pos] = last
        recent_k = recent_k[1:]
        recent_v = recent_v[1:]
        # the last window now covers the evicted token as well
        bounds = list(key_cb.window_bounds)
        start, end = bounds[-1]
        bounds[-1] = (start, evict_pos + 1)
        key_cb = replace(key_cb, window_bounds=tuple(bounds))
        val_cb = replace(val_cb, window_bounds=tuple(bounds))
    elif cfg.recent_tokens == 0:
        raise ConfigError("recent_tokens=0 appends are not supported")

    return CompressedKv(
        key_codebook=key_cb,
        value_codebook=val_cb,
        key_indices=PqIndices(codes=k_codes, window_id=k_win),
        value_indices=PqIndices(codes=v_codes, window_id=v_win),
        sink_keys=ckv.sink_keys,
        sink_values=ckv.sink_values,
        recent_keys=recent_k,
        recent_values=recent_v,
        n_tokens=n + 1,
        head_dim=ckv.head_dim,
        cfg=cfg,
    )


def reconstruct(ckv: CompressedKv, stream: str = "key") -> np.ndarray:
    """Dequantize the quantized token range (rows in token order)."""
    cb = ckv.key_codebook if stream == "key" else ckv.value_codebook
    idx = ckv.key_indices if stream == "key" else ckv.value_indices
    lo, hi = ckv.quantized_range()
    out = np.empty((hi - lo, ckv.head_dim), dtype=np.float32)
    m = ckv.cfg.m
    sub = ckv.head_dim // m
    for w, (start, end) in enumerate(cb.window_bounds):
        table = cb.tables[w]
        codes = idx.codes[start:end].astype(np.int64)
        for s in range(m):
            out[start - lo : end - lo, s * sub : (s + 1) * sub] = table[s][codes[:, s]]
    return out


def quantization_error(
    tokens, ckv: CompressedKv, stream: str = "key", weights=None, perm=None
):
    """(mse, weighted_mse) of the quantized tokens against their
    reconstruction; ``tokens`` is the raw (n_tokens, head_dim) matrix and
    is permuted here when a perm is given."""
    x = as_matrix(tokens, "tokens")
    if perm is not None:
        x = perm.apply(x)
    lo, hi = ckv.quantized_range()
    if hi <= lo:
        raise ConfigError("no quantized tokens")
    ref = x[lo:hi]
    rec = reconstruct(ckv, stream)
    err = ((ref - rec).astype(np.float64) ** 2).sum(axis=1) / ckv.head_dim
    if weights is None:
        w = np.ones(hi - lo, dtype=np.float64)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape[0] == x.shape[0]:
            w = w[lo:hi]
        if w.shape[0] != hi - lo:
            raise DimensionError("weights length mismatch")
    if w.sum() <= 0:
        raise ConfigError("weights sum to zero over quantized range")
    return float(err.mean()), float((err * w).sum() / w.sum())


def compression_factor(
    cfg: PqConfig, n_tokens: int, head_dim: int, raw_bytes_per_scalar: int = 2
) -> float:
    """Raw KV bytes over compressed bytes for one token stream.

    Index storage is counted bit-packed at ceil(log2(k)) bits per entry
    (the in-DRAM layout); codebooks are f16 centroids and the sink /
    recent tokens are charged at raw precision.
    """
    s = min(cfg.sink_tokens, n_tokens)
    r = min(cfg.recent_tokens, n_tokens - s)
    q = n_tokens - s - r
    n_windows = len(_window_ranges(s, n_tokens - r, cfg.window_len))
    idx_bytes = q * cfg.m * cfg.index_bits() / 8.0
    cb_bytes = n_windows * cfg.k * head_dim * 2
    fp_bytes = (s + r) * head_dim * raw_bytes_per_scalar
    raw = n_tokens * head_dim * raw_bytes_per_scalar
    compressed = idx_bytes + cb_bytes + fp_bytes
    if compressed <= 0:
        raise ConfigError("empty compressed representation")
    return raw / compressed


# --- sidecar serialization -------------------------------------------------

_PQ_HEADER = struct.Struct("<4sIIIIIIIIQIIIII")


def save_compressed(ckv: CompressedKv, path) -> None:
    cfg = ckv.cfg
    nw = ckv.key_codebook.n_windows
    head = _PQ_HEADER.pack(
        PQ_MAGIC,
        PQ_VERSION,
        cfg.m,
        cfg.k,
        cfg.iters,
        cfg.window_len,
        cfg.sink_tokens,
        cfg.recent_tokens,
        cfg.t,
        cfg.rng_seed & 0xFFFFFFFFFFFFFFFF,
        ckv.n_tokens,
        ckv.head_dim,
        nw,
        ckv.n_sink,
        ckv.n_recent,
    )
    with open(path, "wb") as fh:
        fh.write(head)
        for (start, end), table in zip(
            ckv.key_codebook.window_bounds, ckv.key_codebook.tables
        ):
            fh.write(struct.pack("<III", start, end, table.shape[1]))
        for cb in (ckv.key_codebook, ckv.value_codebook):
            for table in cb.tables:
                fh.write(table.astype("<f4").tobytes())
        fh.write(ckv.key_indices.codes.astype("<u2").tobytes())
        fh.write(ckv.value_indices.codes.astype("<u2").tobytes())
        for block in (ckv.sink_keys, ckv.sink_values, ckv.recent_keys, ckv.recent_values):
            fh.write(block.astype("<f4").tobytes())


def load_compressed(path) -> CompressedKv:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _PQ_HEADER.size:
        raise TruncatedFileError("file shorter than header", len(blob))
    (
        magic,
        version,
        m,
        k,
        iters,
        window_len,
        sink_tokens,
        recent_tokens,
        t,
        seed,
        n_tokens,
        head_dim,
        nw,
        n_sink,
        n_recent,
    ) = _PQ_HEADER.unpack_from(blob)
    if magic != PQ_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != PQ_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    cfg = PqConfig(
        m=m,
        k=k,
        iters=iters,
        window_len=window_len,
        sink_tokens=sink_tokens,
        recent_tokens=recent_tokens,
        t=t,
        rng_seed=seed,
    )
    off = _PQ_HEADER.size
    view = memoryview(blob)

    def take(nbytes):
        nonlocal off
        if len(blob) - off < nbytes:
            raise TruncatedFileError(f"need {nbytes} bytes", off)
        chunk = view[off : off + nbytes]
        off += nbytes
        return chunk

    bounds = []
    ks = []
    for _ in range(nw):
        start, end, k_w = struct.unpack("<III", take(12))
        bounds.append((start, end))
        ks.append(k_w)
    sub = head_dim // m

    def read_codebook():
        tables = []
        for k_w in ks:
            count = m * k_w * sub
            arr = np.frombuffer(take(count * 4), dtype="<f4").astype(np.float32)
            tables.append(arr.reshape(m, k_w, sub))
        return Codebook(tables=tuple(tables), window_bounds=tuple(bounds))

    key_cb = read_codebook()
    val_cb = read_codebook()

    def read_codes():
        arr = np.frombuffer(take(n_tokens * m * 2), dtype="<u2").astype(np.uint16)
        return arr.reshape(n_tokens, m)

    k_codes = read_codes()
    v_codes = read_codes()
    window_id = np.full(n_tokens, -1, dtype=np.int32)
    for w, (start, end) in enumerate(bounds):
        window_id[start:end] = w

    def read_block(rows):
        arr = np.frombuffer(take(rows * head_dim * 4), dtype="<f4").astype(np.float32)
        return arr.reshape(rows, head_dim)

    sink_k = read_block(n_sink)
    sink_v = read_block(n_sink)
    recent_k = read_block(n_recent)
    recent_v = read_block(n_recent)
    if off != len(blob):
        raise FormatError(f"{len(blob) - off} trailing bytes", off)
    ckv = CompressedKv(
        key_codebook=key_cb,
        value_codebook=val_cb,
        key_indices=PqIndices(codes=k_codes, window_id=window_id),
        value_indices=PqIndices(codes=v_codes, window_id=window_id.copy()),
        sink_keys=sink_k,
        sink_values=sink_v,
        recent_keys=recent_k,
        recent_values=recent_v,
        n_tokens=n_tokens,
        head_dim=head_dim,
        cfg=cfg,
    )
    try:
        ckv.key_indices.validate(key_cb)
        ckv.value_indices.validate(val_cb)
    except DimensionError as err:
        raise FormatError(f"inconsistent sidecar: {err}") from err
    return ckv
