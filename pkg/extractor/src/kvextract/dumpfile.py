"""Writer for the AQKV binary dump format.

Layout (little-endian): magic "AQKV", version u32=1, flags u32 (bit 0 =
weights present), then n_layers / n_kv_heads / n_tokens / head_dim /
dtype_code as five u32 (dtype 0=f32, 1=f16, 2=bf16), the key scalars in
layer-major, head-major, token-major, dim-minor order, the values in the
same order, and an optional f32 weights block of n_layers * n_kv_heads *
n_tokens scalars.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"AQKV"
VERSION = 1
FLAG_WEIGHTS = 1

_HEADER = struct.Struct("<4sIIIIIII")


def write_dump(path, keys: np.ndarray, values: np.ndarray,
               weights: np.ndarray | None = None) -> None:
    """keys/values: float32 (n_layers, n_kv_heads, n_tokens, head_dim);
    weights: optional float32 (n_layers, n_kv_heads, n_tokens)."""
    keys = np.ascontiguousarray(keys, dtype=np.float32)
    values = np.ascontiguousarray(values, dtype=np.float32)
    if keys.ndim != 4 or keys.shape != values.shape:
        raise ValueError(f"bad tensor shapes {keys.shape} / {values.shape}")
    if not (np.isfinite(keys).all() and np.isfinite(values).all()):
        raise ValueError("non-finite activations")
    flags = 0
    if weights is not None:
        weights = np.ascontiguousarray(weights, dtype=np.float32)
        if weights.shape != keys.shape[:3]:
            raise ValueError(f"bad weights shape {weights.shape}")
        if (weights < 0).any():
            raise ValueError("negative importance weights")
        flags |= FLAG_WEIGHTS
    n_layers, n_heads, n_tokens, head_dim = keys.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, flags, n_layers, n_heads,
                              n_tokens, head_dim, 0))
        fh.write(keys.astype("<f4").tobytes())
        fh.write(values.astype("<f4").tobytes())
        if weights is not None:
            fh.write(weights.astype("<f4").tobytes())
