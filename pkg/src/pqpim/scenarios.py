"""End-to-end scenario evaluation: GPU-only baselines, host-offload, and
the PIM systems, composed from the analytic GPU model and simulated PIM
traces.

Latency accounting per decode step at a representative context length
(seq_in plus half the generated tokens). PIM scenarios pipeline query
generation against PIM attention sequence by sequence, so a step costs
the non-overlapped GPU phases plus max(qkv + transfer, PIM attention).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from . import gpu as g
from .arch import ModelDims, PimConfig, allocate, plan_placement
from .engine import SimReport, simulate
from .errors import ConfigError
from .quantizer import PqConfig, compression_factor
from .trace import (
    STAGES,
    trace_attacc_attention,
    trace_codebook_generation,
    trace_decode_attention,
)

SCENARIO_KINDS = (
    "gpu_cpu_offload",
    "gpu_infinite",
    "gpu_pq",
    "attacc_pim",
    "aqpim",
    "aqpim_bufferpe_gather",
)


@dataclass(frozen=True)
class Workload:
    seq_in: int = 4096
    seq_out: int = 256
    batch: int = 16

    @property
    def decode_context(self) -> int:
        return self.seq_in + self.seq_out // 2


@dataclass(frozen=True)
class Scenario:
    kind: str
    workload: Workload = field(default_factory=Workload)
    model: ModelDims = field(default_factory=ModelDims)

    def __post_init__(self):
        if self.kind not in SCENARIO_KINDS:
            raise ConfigError(f"unknown-scenario: {self.kind!r}")


def pim_capacity_bytes(hw: PimConfig) -> float:
    return (
        hw.total_banks * hw.rows_per_bank * hw.row_buffer_bytes
    )


def compressed_kv_bytes(
    model: ModelDims, pq: PqConfig, seq_len: int, batch: int
) -> float:
    return g.kv_bytes(model, seq_len, batch) / compression_factor(
        pq, seq_len, model.head_dim
    )


def _merge_stage_seconds(report: SimReport, tck_ns: float) -> dict:
    return {
        s: report.cycles_by_stage.get(s, 0) * tck_ns * 1e-9 for s in STAGES
    }


def run_scenario(sc: Scenario, pq: PqConfig, hw: PimConfig) -> SimReport:
    """Evaluate one scenario.

    The returned SimReport's stage breakdown covers one decode step in
    cycles at the PIM clock (GPU phases converted at tCK); the cluster_*
    stages additionally carry the per-prefill-layer clustering work for
    PIM scenarios. Latency totals live in the meta block."""
    model = sc.model
    wl = sc.workload
    gpu = hw.gpu_model
    tck = hw.timings.tCK_ns
    n_ctx = wl.decode_context

    qkv = g.decode_qkv(model, wl.batch, gpu)
    proj = g.decode_proj(model, wl.batch, gpu)
    ffn = g.decode_ffn(model, wl.batch, gpu)

    stage_s = {s: 0.0 for s in STAGES}
    energy = {s: 0.0 for s in STAGES}
    counters = {"acts": 0, "col_reads": 0, "col_writes": 0, "macs": 0,
                "tsv_bytes": 0, "inter_hbm_bytes": 0}
    stage_s["qkv_gen"] = qkv.seconds
    stage_s["proj_gpu"] = proj.seconds
    stage_s["ffn_gpu"] = ffn.seconds
    energy["qkv_gen"] = qkv.energy_pj(gpu)
    energy["proj_gpu"] = proj.energy_pj(gpu)
    energy["ffn_gpu"] = ffn.energy_pj(gpu)

    raw_kv = g.kv_bytes(model, n_ctx, wl.batch)
    free_gpu = gpu.mem_GB * 1e9 - g.weights_bytes(model)
    meta = {
        "kind": sc.kind,
        "seq_in": wl.seq_in,
        "seq_out": wl.seq_out,
        "batch": wl.batch,
        "context": n_ctx,
        "raw_kv_bytes": raw_kv,
    }
    notes = []

    if sc.kind in ("gpu_infinite", "gpu_cpu_offload", "gpu_pq"):
        if sc.kind == "gpu_infinite":
            att = g.gpu_attention_phase(model, n_ctx, wl.batch, gpu)
        elif sc.kind == "gpu_cpu_offload":
            if raw_kv <= free_gpu:
                att = g.gpu_attention_phase(model, n_ctx, wl.batch, gpu)
                notes.append("kv fits on gpu; no offload penalty")
            else:
                # cache resident in host memory, scanned over PCIe
                att = g.gpu_attention_phase(
                    model, n_ctx, wl.batch, gpu,
                    bandwidth_GBps=gpu.pcie_bw_GBps,
                )
                stage_s["pcie"] = att.seconds
                energy["pcie"] = att.nbytes * gpu.pcie_pj_per_byte
        else:
            factor = compression_factor(pq, n_ctx, model.head_dim)
            meta["compression_factor"] = factor
            if raw_kv / factor > free_gpu:
                notes.append("compressed kv exceeds gpu memory")
            att = g.gpu_attention_phase(
                model, n_ctx, wl.batch, gpu, bytes_scale=1.0 / factor
            )
        if sc.kind != "gpu_cpu_offload" or not stage_s["pcie"]:
            stage_s["retrieval"] = att.seconds
            energy["retrieval"] = att.energy_pj(gpu)
        step_s = qkv.seconds + att.seconds + proj.seconds + ffn.seconds
        prefill_s = g.prefill_seconds(model, wl.seq_in, wl.batch, gpu)
        if sc.kind == "gpu_cpu_offload" and raw_kv > free_gpu:
            prefill_s += g.pcie_seconds(
                g.kv_bytes(model, wl.seq_in, wl.batch), gpu
            )
        pim_report = None
    else:
        placement = plan_placement(model, pq, wl.batch, hw)
        tasks_per_bank = max(
            len(v) for v in placement.tasks_by_bank().values()
        )
        layout = allocate(
            pq, n_ctx, model.n_layers, hw, model.head_dim, tasks_per_bank
        )
        if sc.kind == "attacc_pim":
            trace = trace_attacc_attention(
                n_ctx, pq, placement, layout, hw, model
            )
            resident = raw_kv
        else:
            site = "bufferpe" if sc.kind == "aqpim_bufferpe_gather" else "bankpe"
            trace = trace_decode_attention(
                n_ctx, pq, placement, layout, hw, model,
                value_gather_site=site, key_gather_site=site,
            )
            resident = compressed_kv_bytes(model, pq, n_ctx, wl.batch)
            meta["compression_factor"] = compression_factor(
                pq, n_ctx, model.head_dim
            )
        pim_report = simulate(trace, hw)
        # the trace covers one layer's worth of every unit; all layers run
        # through the same banks sequentially each step
        pim_s = pim_report.cycles_total * tck * 1e-9 * model.n_layers
        meta["pim_resident_bytes"] = resident
        overflow = max(0.0, resident - pim_capacity_bytes(hw))
        if overflow:
            notes.append("pim capacity exceeded; overflow scanned over pcie")
            pim_s += g.pcie_seconds(overflow, gpu)
        down, up = g.decode_pcie_bytes(model, wl.batch)
        pcie_s = g.pcie_seconds(down + up, gpu)
        stage_s["pcie"] = pcie_s
        energy["pcie"] = (down + up) * gpu.pcie_pj_per_byte
        for s, sec in _merge_stage_seconds(pim_report, tck).items():
            stage_s[s] += sec * model.n_layers
        for s, e in pim_report.energy_by_stage.items():
            energy[s] += e * model.n_layers
        for key in counters:
            counters[key] += pim_report.counters.get(key, 0) * model.n_layers
        step_s = (
            proj.seconds
            + ffn.seconds
            + max(qkv.seconds + g.pcie_seconds(down, gpu), pim_s)
            + g.pcie_seconds(up, gpu)
        )
        gpu_prefill = g.prefill_seconds(model, wl.seq_in, wl.batch, gpu)
        if sc.kind in ("aqpim", "aqpim_bufferpe_gather"):
            cluster = trace_codebook_generation(
                wl.seq_in, pq, placement, layout, hw, model
            )
            cl_rep = simulate(cluster, hw)
            cl_layer_s = cl_rep.cycles_total * tck * 1e-9
            gpu_layer_s = gpu_prefill / model.n_layers
            prefill_s = model.n_layers * max(gpu_layer_s, cl_layer_s)
            meta["cluster_layer_seconds"] = cl_layer_s
            meta["gpu_prefill_layer_seconds"] = gpu_layer_s
            for s, e in cl_rep.energy_by_stage.items():
                energy[s] += e * model.n_layers
        else:
            prefill_s = gpu_prefill

    decode_s = step_s * wl.seq_out
    meta.update(
        {
            "decode_step_seconds": step_s,
            "decode_seconds": decode_s,
            "prefill_seconds": prefill_s,
            "total_seconds": prefill_s + decode_s,
            "notes": notes,
        }
    )
    cycles_by_stage = {
        s: int(round(sec * 1e9 / tck)) for s, sec in stage_s.items()
    }
    return SimReport(
        cycles_total=int(round(step_s * 1e9 / tck)),
        cycles_by_stage=cycles_by_stage,
        energy_by_stage=energy,
        counters=counters,
        meta=meta,
    )


def sweep(
    scenarios: list, axis: str, points: list, pq: PqConfig, hw: PimConfig
) -> list:
    """One report per (scenario, point) along seq_in / seq_out / batch."""
    if axis not in ("seq_in", "seq_out", "batch"):
        raise ConfigError(f"unknown sweep axis {axis!r}")
    if not points:
        raise ConfigError("sweep needs at least one point")
    reports = []
    for sc in scenarios:
        for p in points:
            wl = Workload(
                **{
                    **{
                        "seq_in": sc.workload.seq_in,
                        "seq_out": sc.workload.seq_out,
                        "batch": sc.workload.batch,
                    },
                    axis: int(p),
                }
            )
            reports.append(
                run_scenario(Scenario(sc.kind, wl, sc.model), pq, hw)
            )
    return reports


def reports_to_csv(reports: list) -> str:
    """Stage-breakdown table, one row per report."""
    buf = io.StringIO()
    fields = [
        "kind", "seq_in", "seq_out", "batch",
        "decode_step_seconds", "decode_seconds", "prefill_seconds",
        "total_seconds",
    ] + [f"cycles_{s}" for s in STAGES] + ["energy_total_pj"]
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for rep in reports:
        row = {f: rep.meta.get(f, "") for f in fields[:8]}
        for s in STAGES:
            row[f"cycles_{s}"] = rep.cycles_by_stage.get(s, 0)
        row["energy_total_pj"] = f"{rep.energy_total_pj:.3e}"
        writer.writerow(row)
    return buf.getvalue()
