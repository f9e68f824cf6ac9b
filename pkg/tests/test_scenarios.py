import numpy as np
import pytest

from pqpim.arch import ModelDims, PimConfig
from pqpim.errors import ConfigError
from pqpim.quantizer import PqConfig
from pqpim.scenarios import (
    Scenario,
    Workload,
    compressed_kv_bytes,
    reports_to_csv,
    run_scenario,
    sweep,
)

SMALL = ModelDims(n_layers=4, d_model=512, n_heads=8, n_kv_heads=4,
                  head_dim=64, d_ff=1024, vocab=2000)


def test_unknown_scenario_rejected():
    with pytest.raises(ConfigError, match="unknown-scenario"):
        Scenario("warp_drive")


def test_zero_output_is_prefill_only():
    rep = run_scenario(
        Scenario("gpu_infinite", Workload(seq_in=2048, seq_out=0, batch=2), SMALL),
        PqConfig(m=8, k=64), PimConfig(),
    )
    assert rep.meta["decode_seconds"] == 0.0
    assert rep.meta["total_seconds"] == rep.meta["prefill_seconds"] > 0


def test_offload_ratio_at_16k_context():
    # 16K context, batch sized so the cache overflows GPU memory
    wl = Workload(seq_in=16384, seq_out=16, batch=64)
    pq, hw = PqConfig(), PimConfig()
    t = {}
    for kind in ("gpu_cpu_offload", "gpu_infinite"):
        t[kind] = run_scenario(Scenario(kind, wl), pq, hw).meta[
            "decode_step_seconds"
        ]
    ratio = t["gpu_cpu_offload"] / t["gpu_infinite"]
    assert 7.0 <= ratio <= 18.0


def test_no_offload_penalty_when_cache_fits():
    wl = Workload(seq_in=1024, seq_out=16, batch=1)
    pq, hw = PqConfig(), PimConfig()
    a = run_scenario(Scenario("gpu_cpu_offload", wl), pq, hw)
    b = run_scenario(Scenario("gpu_infinite", wl), pq, hw)
    assert a.meta["decode_step_seconds"] == b.meta["decode_step_seconds"]


def test_compression_factor_near_paper_value():
    rep = run_scenario(
        Scenario("gpu_pq", Workload(seq_in=32768, seq_out=0, batch=4)),
        PqConfig(), PimConfig(),
    )
    assert abs(rep.meta["compression_factor"] - 6.53) / 6.53 <= 0.05


def test_pim_scenarios_report_stage_breakdown():
    wl = Workload(seq_in=1024, seq_out=8, batch=2)
    rep = run_scenario(Scenario("aqpim", wl, SMALL),
                       PqConfig(m=8, k=64), PimConfig())
    assert rep.cycles_by_stage["retrieval"] > 0
    assert rep.cycles_by_stage["atnk"] > 0
    assert rep.cycles_by_stage["ffn_gpu"] > 0
    assert rep.counters["inter_hbm_bytes"] == 0
    assert rep.meta["prefill_seconds"] > 0


def test_bufferpe_gather_scenario_slower():
    wl = Workload(seq_in=4096, seq_out=8, batch=2)
    pq = PqConfig(m=8, k=64)
    hw = PimConfig()
    a = run_scenario(Scenario("aqpim", wl, SMALL), pq, hw)
    b = run_scenario(Scenario("aqpim_bufferpe_gather", wl, SMALL), pq, hw)
    assert b.meta["decode_step_seconds"] > a.meta["decode_step_seconds"]


def test_attacc_scenario_runs():
    wl = Workload(seq_in=2048, seq_out=8, batch=2)
    rep = run_scenario(Scenario("attacc_pim", wl, SMALL),
                       PqConfig(m=8, k=64), PimConfig())
    assert rep.cycles_by_stage["atnk"] > 0
    assert rep.cycles_by_stage["atnv"] > 0
    assert rep.cycles_by_stage["retrieval"] == 0  # no indirection path
    assert rep.meta["pim_resident_bytes"] > 0


def test_sweep_shapes_and_csv():
    pq, hw = PqConfig(m=8, k=64), PimConfig()
    scenarios = [Scenario("gpu_infinite", Workload(batch=2), SMALL)]
    reports = sweep(scenarios, "seq_in", [512], pq, hw)
    assert len(reports) == 1
    reports = sweep(
        [Scenario(k, Workload(batch=2), SMALL)
         for k in ("gpu_infinite", "gpu_pq")],
        "seq_in", [512, 1024], pq, hw,
    )
    assert len(reports) == 4
    csv_text = reports_to_csv(reports)
    lines = csv_text.strip().splitlines()
    assert len(lines) == 5
    assert lines[0].startswith("kind,seq_in")


def test_sweep_atnk_constant_and_retrieval_linear():
    pq, hw = PqConfig(), PimConfig()
    points = [1024, 2048, 4096, 16384]
    reports = sweep([Scenario("aqpim", Workload(seq_out=0, batch=2))],
                    "seq_in", points, pq, hw)
    atnk = [r.cycles_by_stage["atnk"] for r in reports]
    assert len(set(atnk)) == 1
    retr = np.array([r.cycles_by_stage["retrieval"] for r in reports], float)
    x = np.array(points, float)
    slope, intercept = np.polyfit(x, retr, 1)
    pred = slope * x + intercept
    ss_res = ((retr - pred) ** 2).sum()
    ss_tot = ((retr - retr.mean()) ** 2).sum()
    assert 1 - ss_res / ss_tot >= 0.99


def test_sweep_errors():
    with pytest.raises(ConfigError):
        sweep([], "bogus_axis", [1], PqConfig(), PimConfig())
    with pytest.raises(ConfigError):
        sweep([Scenario("gpu_infinite")], "seq_in", [], PqConfig(), PimConfig())


def test_compressed_bytes_accounting():
    raw = 4 * SMALL.n_layers * SMALL.n_kv_heads * 2 * 8192 * SMALL.head_dim * 2
    comp = compressed_kv_bytes(SMALL, PqConfig(m=8, k=64), 8192, 4)
    assert comp < raw / 3
