import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pqpim.arch import (
    AddressMap,
    ModelDims,
    PimConfig,
    allocate,
    plan_placement,
)
from pqpim.errors import CapacityError, ConfigError
from pqpim.quantizer import PqConfig


def test_config_json_roundtrip_and_unknown_keys():
    hw = PimConfig()
    again = PimConfig.from_json(hw.to_json())
    assert again == hw
    with pytest.raises(ConfigError):
        PimConfig.from_dict({"n_hbms": 4, "bogus_key": 1})
    with pytest.raises(ConfigError):
        PimConfig.from_dict({"timings": {"tCK_ns": 0.7, "tXYZ": 3}})


def test_config_rejects_nonpositive():
    with pytest.raises(ConfigError):
        PimConfig(row_buffer_bytes=0)
    with pytest.raises(ConfigError):
        PimConfig.from_dict({"timings": {"tRCD": -1}})


def test_page_residency_against_row_buffer():
    hw = PimConfig()
    hw.check_page_residency(PqConfig(k=512))
    with pytest.raises(ConfigError):
        hw.check_page_residency(PqConfig(k=1024))


# --- address map --------------------------------------------------------


def test_bank_bits_lowest():
    with pytest.raises(ConfigError):
        AddressMap(fields=(("row", 4), ("bank", 4), ("column", 5),
                           ("channel", 4), ("hbm", 2)))


def test_consecutive_addresses_walk_banks():
    amap = AddressMap()
    a0 = amap.decode(0)
    a1 = amap.decode(1)
    assert a1["bank"] == a0["bank"] + 1


@settings(max_examples=200, deadline=None)
@given(st.integers(min_value=0, max_value=(1 << 31) - 1))
def test_address_roundtrip(addr):
    amap = AddressMap()
    assert amap.encode(**amap.decode(addr)) == addr


def test_address_map_for_config():
    amap = AddressMap.for_config(PimConfig())
    fields = dict(amap.fields)
    assert fields["bank"] == 4 and fields["hbm"] == 2
    assert amap.fields[0][0] == "bank"


# --- placement ----------------------------------------------------------


def test_exact_fit_utilization():
    hw = PimConfig(n_hbms=1, channels_per_hbm=2, banks_per_channel=4)
    model = ModelDims(n_heads=1, n_kv_heads=1, head_dim=32)
    pl = plan_placement(model, PqConfig(m=8, k=4), batch=1, hw=hw)
    assert pl.utilization == 1.0


def test_underfilled_utilization_closed_form():
    hw = PimConfig(n_hbms=2, channels_per_hbm=4, banks_per_channel=4)
    model = ModelDims(n_heads=2, n_kv_heads=2, head_dim=32)
    pl = plan_placement(model, PqConfig(m=2, k=4), batch=2, hw=hw)
    # heads*batch*m / banks, below 1.0
    assert pl.utilization == pytest.approx((2 * 2 * 2) / hw.total_banks)


def test_heads_never_span_hbms():
    rng = np.random.default_rng(0)
    for _ in range(25):
        hw = PimConfig(
            n_hbms=int(rng.integers(1, 5)),
            channels_per_hbm=int(rng.integers(1, 9)),
            banks_per_channel=int(rng.integers(2, 17)),
        )
        heads = int(rng.integers(1, 9))
        batch = int(rng.integers(1, 5))
        m = int(2 ** rng.integers(0, 6))
        model = ModelDims(n_heads=heads, n_kv_heads=heads, head_dim=64 * m)
        if batch * heads > hw.total_banks:
            continue
        pl = plan_placement(model, PqConfig(m=m, k=4), batch, hw)
        for b in range(batch):
            for h in range(heads):
                assert len(pl.hbms_of_unit(b, h)) == 1


def test_32_heads_over_4_hbms():
    hw = PimConfig()
    model = ModelDims(n_heads=32, n_kv_heads=32)
    pl = plan_placement(model, PqConfig(m=32, k=512), batch=1, hw=hw)
    per_hbm = {}
    for (b, h), hbm in pl.unit_hbm.items():
        per_hbm.setdefault(hbm, []).append(h)
    assert all(len(v) == 8 for v in per_hbm.values())


def test_distinct_banks_while_supply_lasts():
    hw = PimConfig()
    model = ModelDims(n_heads=8, n_kv_heads=8)
    pl = plan_placement(model, PqConfig(m=8, k=16), batch=1, hw=hw)
    for b in range(1):
        for h in range(8):
            homes = {pl.task_bank[(b, h, s)] for s in range(8)}
            assert len(homes) == 8


def test_capacity_error_names_banks():
    hw = PimConfig(n_hbms=1, channels_per_hbm=1, banks_per_channel=2)
    model = ModelDims(n_heads=4, n_kv_heads=4)
    with pytest.raises(CapacityError, match="banks"):
        plan_placement(model, PqConfig(m=2, k=4), batch=2, hw=hw)


# --- allocator ----------------------------------------------------------


def test_codebook_slice_is_one_row_at_defaults():
    layout = allocate(PqConfig(), seq_len=32768, n_layers=32, hw=PimConfig(),
                      head_dim=128, tasks_per_bank=4)
    assert layout.codebook_slice_rows == 1  # 512 f16 entries fill 1KB


def test_zero_sequence_allocates_empty_index_region():
    layout = allocate(PqConfig(), seq_len=0, n_layers=4, hw=PimConfig())
    assert layout.index_rows[0] == layout.index_rows[1]


def test_doubling_sequence_doubles_index_rows():
    a = allocate(PqConfig(), 8192, 32, PimConfig())
    b = allocate(PqConfig(), 16384, 32, PimConfig())
    ratio = b.index_rows_per_layer / a.index_rows_per_layer
    assert abs(ratio - 2.0) <= 0.12  # one-page rounding slack


def test_regions_disjoint_and_deterministic():
    rng = np.random.default_rng(1)
    for _ in range(30):
        pq = PqConfig(
            m=int(2 ** rng.integers(0, 6)),
            k=int(rng.integers(2, 512)),
            window_len=int(rng.choice([0, 256, 1024])),
        )
        seq = int(rng.integers(0, 20000))
        layers = int(rng.integers(1, 40))
        try:
            a = allocate(pq, seq, layers, PimConfig(), head_dim=128)
            b = allocate(pq, seq, layers, PimConfig(), head_dim=128)
        except (CapacityError, ConfigError):
            continue
        assert a == b
        regions = sorted(a.regions().values())
        for (s1, e1), (s2, e2) in zip(regions, regions[1:]):
            assert e1 <= s2
        assert regions[-1][1] <= a.rows_per_bank


def test_allocation_overflow_reports_accounting():
    hw = PimConfig(rows_per_bank=64)
    with pytest.raises(CapacityError, match="codebook_rows"):
        allocate(PqConfig(), 32768, 32, hw, head_dim=128, tasks_per_bank=8)
