"""KV tensor containers, the binary dump format, and synthetic generators.

Binary dump layout (all little-endian):

==========  ====================================================
bytes 0-3   magic ``AQKV``
bytes 4-7   version, u32 (currently 1)
bytes 8-11  flags, u32 (bit 0: weights block present)
bytes 12-31 n_layers, n_kv_heads, n_tokens, head_dim, dtype_code
            (five u32; dtype_code 0=f32, 1=f16, 2=bf16)
then        keys, layer-major / head-major / token-major / dim-minor
then        values, same order and dtype
then        weights (optional), n_layers*n_kv_heads*n_tokens f32
==========  ====================================================

Scalars are widened to float32 on load; all in-memory math is float32.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, FormatError, TruncatedFileError

MAGIC = b"AQKV"
VERSION = 1
FLAG_WEIGHTS = 1

DTYPE_F32 = 0
DTYPE_F16 = 1
DTYPE_BF16 = 2
_DTYPE_ITEMSIZE = {DTYPE_F32: 4, DTYPE_F16: 2, DTYPE_BF16: 2}

_HEADER = struct.Struct("<4sIIIIIII")  # magic, version, flags, 5 shape fields


def as_matrix(data, name: str = "matrix") -> np.ndarray:
    """Coerce to a finite, C-contiguous float32 2-D array."""
    arr = np.ascontiguousarray(data, dtype=np.float32)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise FormatError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class KvDump:
    """Per-layer, per-head key/value token matrices plus optional weights.

    ``keys`` and ``values`` are float32 arrays of shape
    (n_layers, n_kv_heads, n_tokens, head_dim); ``weights`` is either None
    or float32 of shape (n_layers, n_kv_heads, n_tokens), nonnegative with
    at least one positive entry per head.
    """

    keys: np.ndarray
    values: np.ndarray
    weights: np.ndarray | None = None
    dtype_code: int = DTYPE_F32

    @property
    def n_layers(self) -> int:
        return self.keys.shape[0]

    @property
    def n_kv_heads(self) -> int:
        return self.keys.shape[1]

    @property
    def n_tokens(self) -> int:
        return self.keys.shape[2]

    @property
    def head_dim(self) -> int:
        return self.keys.shape[3]

    def validate(self) -> None:
        if self.keys.ndim != 4:
            raise DimensionError(f"keys must be 4-D, got shape {self.keys.shape}")
        if self.keys.shape != self.values.shape:
            raise DimensionError(
                f"keys shape {self.keys.shape} != values shape {self.values.shape}"
            )
        if self.keys.dtype != np.float32 or self.values.dtype != np.float32:
            raise DimensionError("keys/values must be float32")
        if self.dtype_code not in _DTYPE_ITEMSIZE:
            raise ConfigError(f"unknown dtype_code {self.dtype_code}")
        for name, arr in (("keys", self.keys), ("values", self.values)):
            if not np.all(np.isfinite(arr)):
                raise FormatError(f"{name} contain non-finite values")
        if self.weights is not None:
            w = self.weights
            if w.shape != self.keys.shape[:3]:
                raise DimensionError(
                    f"weights shape {w.shape} != {self.keys.shape[:3]}"
                )
            if not np.all(np.isfinite(w)) or np.any(w < 0):
                raise FormatError("weights must be finite and nonnegative")
            if self.n_tokens > 0 and not np.all(w.sum(axis=2) > 0):
                raise FormatError("each head needs at least one positive weight")

    def head(self, layer: int, kv_head: int):
        """(keys, values, weights-or-None) for one (layer, kv_head) slot."""
        w = None if self.weights is None else self.weights[layer, kv_head]
        return self.keys[layer, kv_head], self.values[layer, kv_head], w

    def bit_equal(self, other: "KvDump") -> bool:
        if self.keys.shape != other.keys.shape or self.dtype_code != other.dtype_code:
            return False
        if (self.weights is None) != (other.weights is None):
            return False
        same = self.keys.tobytes() == other.keys.tobytes() and (
            self.values.tobytes() == other.values.tobytes()
        )
        if same and self.weights is not None:
            same = self.weights.tobytes() == other.weights.tobytes()
        return same


def _narrow(arr: np.ndarray, dtype_code: int) -> bytes:
    if dtype_code == DTYPE_F32:
        return arr.astype("<f4").tobytes()
    if dtype_code == DTYPE_F16:
        return arr.astype("<f2").tobytes()
    # bf16: drop the low 16 mantissa bits of the f32 pattern
    bits = arr.astype("<f4").view("<u4")
    return (bits >> 16).astype("<u2").tobytes()


def _widen(buf: memoryview, count: int, dtype_code: int, offset: int) -> np.ndarray:
    itemsize = _DTYPE_ITEMSIZE[dtype_code]
    need = count * itemsize
    if len(buf) < need:
        raise TruncatedFileError(
            f"payload needs {need} bytes, file has {len(buf)}", offset
        )
    raw = buf[:need]
    if dtype_code == DTYPE_F32:
        out = np.frombuffer(raw, dtype="<f4").astype(np.float32)
    elif dtype_code == DTYPE_F16:
        out = np.frombuffer(raw, dtype="<f2").astype(np.float32)
    else:
        bits = np.frombuffer(raw, dtype="<u2").astype(np.uint32) << 16
        out = bits.view(np.float32).astype(np.float32)
    return out


def write_kv_dump(dump: KvDump, path) -> None:
    """Serialize a dump; output is byte-identical for identical dumps."""
    dump.validate()
    flags = FLAG_WEIGHTS if dump.weights is not None else 0
    header = _HEADER.pack(
        MAGIC,
        VERSION,
        flags,
        dump.n_layers,
        dump.n_kv_heads,
        dump.n_tokens,
        dump.head_dim,
        dump.dtype_code,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(_narrow(dump.keys, dump.dtype_code))
        fh.write(_narrow(dump.values, dump.dtype_code))
        if dump.weights is not None:
            fh.write(dump.weights.astype("<f4").tobytes())


def load_kv_dump(path) -> KvDump:
    """Parse and validate a dump file; errors carry byte offsets."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise TruncatedFileError("file shorter than header", len(blob))
    magic, version, flags, n_layers, n_heads, n_tokens, head_dim, dtype_code = (
        _HEADER.unpack_from(blob)
    )
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if flags & ~FLAG_WEIGHTS:
        raise FormatError(f"unknown flag bits 0x{flags:x}", 8)
    if dtype_code not in _DTYPE_ITEMSIZE:
        raise FormatError(f"unknown dtype_code {dtype_code}", 28)

    count = n_layers * n_heads * n_tokens * head_dim
    shape = (n_layers, n_heads, n_tokens, head_dim)
    off = _HEADER.size
    view = memoryview(blob)

    def take(n_scalars, code):
        nonlocal off
        arr = _widen(view[off:], n_scalars, code, off)
        start = off
        off += n_scalars * _DTYPE_ITEMSIZE[code]
        bad = np.flatnonzero(~np.isfinite(arr))
        if bad.size:
            raise FormatError(
                "non-finite scalar", start + int(bad[0]) * _DTYPE_ITEMSIZE[code]
            )
        return arr

    keys = take(count, dtype_code).reshape(shape)
    values = take(count, dtype_code).reshape(shape)
    weights = None
    if flags & FLAG_WEIGHTS:
        weights = take(n_layers * n_heads * n_tokens, DTYPE_F32).reshape(shape[:3])
    if off != len(blob):
        raise FormatError(f"{len(blob) - off} trailing bytes", off)

    dump = KvDump(keys=keys, values=values, weights=weights, dtype_code=dtype_code)
    dump.validate()
    return dump


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for cluster-structured synthetic KV data.

    Tokens are drawn around ``n_latent_clusters`` latent centers with
    isotropic gaussian noise of scale ``cluster_spread``; the whole dump is
    a pure function of the spec.
    """

    n_tokens: int
    head_dim: int
    n_latent_clusters: int
    cluster_spread: float = 0.1
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_latent_clusters > self.n_tokens:
            raise ConfigError("n_latent_clusters must be <= n_tokens")
        if self.n_latent_clusters < 1 or self.n_tokens < 1 or self.head_dim < 1:
            raise ConfigError("counts must be positive")
        if self.cluster_spread < 0:
            raise ConfigError("cluster_spread must be >= 0")


def _head_rng(seed: int, layer: int, head: int) -> np.random.Generator:
    # Counter-based stream keyed by (seed, layer, head): reproducible no
    # matter in which order heads are generated.
    key = np.array(
        [np.uint64(seed & 0xFFFFFFFFFFFFFFFF), np.uint64((layer << 32) | head)],
        dtype=np.uint64,
    )
    return np.random.Generator(np.random.Philox(key=key))


def generate_synthetic_kv(
    spec: SyntheticSpec, n_layers: int = 1, n_kv_heads: int = 1
) -> KvDump:
    """Draw a clustered synthetic dump, deterministic for a fixed spec."""
    n, d, c = spec.n_tokens, spec.head_dim, spec.n_latent_clusters
    keys = np.empty((n_layers, n_kv_heads, n, d), dtype=np.float32)
    values = np.empty_like(keys)
    for layer in range(n_layers):
        for head in range(n_kv_heads):
            rng = _head_rng(spec.rng_seed, layer, head)
            centers_k = rng.normal(0.0, 1.0, size=(c, d))
            centers_v = rng.normal(0.0, 1.0, size=(c, d))
            assign = rng.integers(0, c, size=n)
            noise_k = rng.normal(0.0, 1.0, size=(n, d))
            noise_v = rng.normal(0.0, 1.0, size=(n, d))
            keys[layer, head] = centers_k[assign] + spec.cluster_spread * noise_k
            values[layer, head] = centers_v[assign] + spec.cluster_spread * noise_v
    return KvDump(keys=keys, values=values)
