"""Analytic GPU-side cost model (roofline) for decode and prefill.

The GPU is not cycle-simulated: each phase costs
max(bytes / bandwidth, flops / peak), which is how the memory-bound
decode GEMVs and the compute-bound prefill GEMMs behave. All byte counts
assume 16-bit weights and activations.
"""

from __future__ import annotations

from dataclasses import dataclass

from .arch import GpuModel, ModelDims

BYTES = 2  # f16


def roofline_seconds(nbytes: float, flops: float, gpu: GpuModel) -> float:
    t_mem = nbytes / (gpu.hbm_bw_GBps * 1e9)
    t_cmp = flops / (gpu.flops_T * 1e12)
    return max(t_mem, t_cmp)


def qkv_params(model: ModelDims) -> int:
    kv_dim = model.n_kv_heads * model.head_dim
    return model.d_model * model.d_model + 2 * model.d_model * kv_dim


def proj_params(model: ModelDims) -> int:
    return model.d_model * model.d_model


def ffn_params(model: ModelDims) -> int:
    return 3 * model.d_model * model.d_ff  # gate/up/down


def lm_head_params(model: ModelDims) -> int:
    return model.d_model * model.vocab


def weights_bytes(model: ModelDims) -> int:
    per_layer = qkv_params(model) + proj_params(model) + ffn_params(model)
    return (model.n_layers * per_layer + lm_head_params(model)) * BYTES


def kv_bytes(model: ModelDims, seq_len: int, batch: int) -> int:
    per_token = 2 * model.n_kv_heads * model.head_dim * BYTES
    return batch * model.n_layers * seq_len * per_token


@dataclass(frozen=True)
class GpuPhase:
    seconds: float
    nbytes: float
    flops: float

    def energy_pj(self, gpu: GpuModel) -> float:
        return self.flops * gpu.pj_per_flop + self.nbytes * gpu.hbm_pj_per_byte


def decode_qkv(model: ModelDims, batch: int, gpu: GpuModel) -> GpuPhase:
    nbytes = model.n_layers * qkv_params(model) * BYTES
    flops = 2 * batch * model.n_layers * qkv_params(model)
    return GpuPhase(roofline_seconds(nbytes, flops, gpu), nbytes, flops)


def decode_proj(model: ModelDims, batch: int, gpu: GpuModel) -> GpuPhase:
    params = model.n_layers * proj_params(model) + lm_head_params(model)
    nbytes = params * BYTES
    flops = 2 * batch * params
    return GpuPhase(roofline_seconds(nbytes, flops, gpu), nbytes, flops)


def decode_ffn(model: ModelDims, batch: int, gpu: GpuModel) -> GpuPhase:
    params = model.n_layers * ffn_params(model)
    nbytes = params * BYTES
    flops = 2 * batch * params
    return GpuPhase(roofline_seconds(nbytes, flops, gpu), nbytes, flops)


def decode_attention_flops(model: ModelDims, seq_len: int, batch: int) -> float:
    # q.K^T and scores.V per head
    return 4.0 * batch * model.n_layers * model.n_heads * seq_len * model.head_dim


def gpu_attention_phase(
    model: ModelDims, seq_len: int, batch: int, gpu: GpuModel,
    bytes_scale: float = 1.0, bandwidth_GBps: float | None = None,
) -> GpuPhase:
    """Decode attention as a KV-cache scan; ``bytes_scale`` shrinks the
    traffic for compressed caches, ``bandwidth_GBps`` overrides the link
    (PCIe when the cache lives in host memory)."""
    nbytes = kv_bytes(model, seq_len, batch) * bytes_scale
    flops = decode_attention_flops(model, seq_len, batch)
    bw = gpu.hbm_bw_GBps if bandwidth_GBps is None else bandwidth_GBps
    t = max(nbytes / (bw * 1e9), flops / (gpu.flops_T * 1e12))
    return GpuPhase(t, nbytes, flops)


def prefill_layer_seconds(
    model: ModelDims, seq_len: int, batch: int, gpu: GpuModel
) -> float:
    params = qkv_params(model) + proj_params(model) + ffn_params(model)
    gemm_flops = 2.0 * batch * seq_len * params
    attn_flops = 4.0 * batch * seq_len * seq_len * model.head_dim * model.n_heads
    nbytes = params * BYTES + kv_bytes(model, seq_len, batch) / model.n_layers
    return roofline_seconds(nbytes, gemm_flops + attn_flops, gpu)


def prefill_seconds(model, seq_len, batch, gpu) -> float:
    return model.n_layers * prefill_layer_seconds(model, seq_len, batch, gpu)


def pcie_seconds(nbytes: float, gpu: GpuModel) -> float:
    return nbytes / (gpu.pcie_bw_GBps * 1e9)


def decode_pcie_bytes(model: ModelDims, batch: int) -> tuple[int, int]:
    """(to PIM, back to GPU) per decode step: qkv vectors down, attention
    outputs up."""
    kv_dim = model.n_kv_heads * model.head_dim
    down = batch * model.n_layers * (model.d_model + 2 * kv_dim) * BYTES
    up = batch * model.n_layers * model.d_model * BYTES
    return down, up
