"""HBM-PIM hardware model: topology, timing/energy parameters, address
mapping, head/subvector placement, and the per-bank region allocator.

Defaults describe four 16GB HBM3-class PIM stacks (16 channels x 16
banks, 1KB row buffers) next to one plain HBM for weights. Timing and
energy values are parameters, not claims; every acceptance check on top
of them is ratio- or trend-based.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

from .errors import CapacityError, ConfigError
from .quantizer import PqConfig


@dataclass(frozen=True)
class Timings:
    """DRAM timing parameters, cycles unless noted."""

    tCK_ns: float = 0.68
    tRCD: int = 18
    tRP: int = 18
    tRAS: int = 42
    tCCDL: int = 2   # column-to-column, same bank group
    tRRD: int = 4    # ACT-to-ACT, same channel

    def __post_init__(self):
        for name, v in asdict(self).items():
            if v <= 0:
                raise ConfigError(f"timing {name} must be positive")


@dataclass(frozen=True)
class Energies:
    """Per-event energies in picojoules."""

    e_act: float = 2400.0
    e_rd_col: float = 120.0
    e_wr_col: float = 130.0
    e_mac16: float = 2.5          # one 16-lane FP16 MAC issue
    e_tsv_per_bit: float = 0.55
    e_bufferpe_op: float = 1.2

    def __post_init__(self):
        for name, v in asdict(self).items():
            if v <= 0:
                raise ConfigError(f"energy {name} must be positive")


@dataclass(frozen=True)
class GpuModel:
    """Roofline parameters for the host GPU and its links."""

    hbm_bw_GBps: float = 3350.0
    pcie_bw_GBps: float = 256.0
    flops_T: float = 700.0        # effective half-precision TFLOP/s
    mem_GB: float = 80.0
    pj_per_flop: float = 0.5
    hbm_pj_per_byte: float = 7.0
    pcie_pj_per_byte: float = 25.0


@dataclass(frozen=True)
class PimConfig:
    n_hbms: int = 4
    channels_per_hbm: int = 16
    banks_per_channel: int = 16
    row_buffer_bytes: int = 1024
    rows_per_bank: int = 65536
    bankpe_lanes: int = 32
    bufferpe_throughput: int = 1024  # streaming ops/cycle per HBM
    bufferpe_gather_rate: int = 512  # indexed lookups/cycle per channel
    tsv_bytes_per_cycle: int = 128   # per channel, die-to-buffer
    col_bytes: int = 32              # bytes moved per column command
    ret_values_per_cycle: int = 64   # indirection rate from a latched row
    pim_stream_bytes_per_cycle: int = 64  # PE-side streaming of open rows
    timings: Timings = field(default_factory=Timings)
    energies: Energies = field(default_factory=Energies)
    gpu_model: GpuModel = field(default_factory=GpuModel)

    def __post_init__(self):
        for name in (
            "n_hbms",
            "channels_per_hbm",
            "banks_per_channel",
            "row_buffer_bytes",
            "rows_per_bank",
            "bankpe_lanes",
            "bufferpe_throughput",
            "bufferpe_gather_rate",
            "tsv_bytes_per_cycle",
            "col_bytes",
            "ret_values_per_cycle",
            "pim_stream_bytes_per_cycle",
        ):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")

    @property
    def total_banks(self) -> int:
        return self.n_hbms * self.channels_per_hbm * self.banks_per_channel

    def check_page_residency(self, pq: PqConfig) -> None:
        if 2 * pq.k > self.row_buffer_bytes:
            raise ConfigError(
                f"k={pq.k} needs {2 * pq.k}B per lookup table, row buffer "
                f"holds {self.row_buffer_bytes}B"
            )

    @property
    def internal_bw_GBps(self) -> float:
        cadence_ns = self.timings.tCCDL * self.timings.tCK_ns
        return self.total_banks * self.col_bytes / cadence_ns

    @classmethod
    def from_json(cls, text: str) -> "PimConfig":
        doc = json.loads(text)
        return cls.from_dict(doc)

    @classmethod
    def from_dict(cls, doc: dict) -> "PimConfig":
        def build(klass, sub):
            allowed = set(klass.__dataclass_fields__)
            unknown = set(sub) - allowed
            if unknown:
                raise ConfigError(f"unknown {klass.__name__} keys: {sorted(unknown)}")
            return klass(**sub)

        top = dict(doc)
        nested = {}
        for name, klass in (
            ("timings", Timings),
            ("energies", Energies),
            ("gpu_model", GpuModel),
        ):
            if name in top:
                nested[name] = build(klass, top.pop(name))
        allowed = set(cls.__dataclass_fields__) - {"timings", "energies", "gpu_model"}
        unknown = set(top) - allowed
        if unknown:
            raise ConfigError(f"unknown PimConfig keys: {sorted(unknown)}")
        return cls(**top, **nested)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


@dataclass(frozen=True)
class ModelDims:
    """Transformer shape used by placement and the GPU cost model."""

    n_layers: int = 32
    d_model: int = 4096
    n_heads: int = 32
    n_kv_heads: int = 8
    head_dim: int = 128
    d_ff: int = 14336
    vocab: int = 32000

    @property
    def group_size(self) -> int:
        if self.n_heads % self.n_kv_heads:
            raise ConfigError("n_heads must be divisible by n_kv_heads")
        return self.n_heads // self.n_kv_heads


# --- address mapping ---------------------------------------------------------


@dataclass(frozen=True)
class AddressMap:
    """Bit-field layout from LSB upward; bank select sits in the lowest
    bits so that consecutive addresses walk the banks."""

    fields: tuple = (
        ("bank", 4),
        ("column", 5),
        ("channel", 4),
        ("hbm", 2),
        ("row", 16),
    )

    def __post_init__(self):
        names = [n for n, _ in self.fields]
        if sorted(names) != sorted(["hbm", "channel", "bank", "row", "column"]):
            raise ConfigError("address map must cover hbm/channel/bank/row/column")
        if names[0] != "bank":
            raise ConfigError("bank select must occupy the lowest address bits")
        if any(b <= 0 for _, b in self.fields):
            raise ConfigError("field widths must be positive")

    def encode(self, **parts) -> int:
        addr = 0
        shift = 0
        for name, bits in self.fields:
            v = parts[name]
            if not 0 <= v < (1 << bits):
                raise ConfigError(f"{name}={v} out of range for {bits} bits")
            addr |= v << shift
            shift += bits
        return addr

    def decode(self, addr: int) -> dict:
        out = {}
        shift = 0
        for name, bits in self.fields:
            out[name] = (addr >> shift) & ((1 << bits) - 1)
            shift += bits
        if addr >> shift:
            raise ConfigError(f"address 0x{addr:x} wider than the map")
        return out

    @classmethod
    def for_config(cls, hw: PimConfig) -> "AddressMap":
        def width(n):
            return max(1, math.ceil(math.log2(n)))

        return cls(
            fields=(
                ("bank", width(hw.banks_per_channel)),
                ("column", width(hw.row_buffer_bytes // hw.col_bytes)),
                ("channel", width(hw.channels_per_hbm)),
                ("hbm", width(hw.n_hbms)),
                ("row", width(hw.rows_per_bank)),
            )
        )


# --- placement ---------------------------------------------------------------


@dataclass(frozen=True)
class Placement:
    """Unit (batch, kv_head) to HBM assignment and per-subvector bank
    homes. A unit never spans HBM stacks."""

    unit_hbm: dict
    task_bank: dict          # (batch, kv_head, subvector) -> (hbm, ch, bank)
    utilization: float
    m: int

    def tasks_by_bank(self) -> dict:
        out: dict = {}
        for task, home in self.task_bank.items():
            out.setdefault(home, []).append(task)
        for tasks in out.values():
            tasks.sort()
        return out

    def hbms_of_unit(self, batch: int, head: int) -> set:
        return {
            home[0]
            for task, home in self.task_bank.items()
            if task[0] == batch and task[1] == head
        }


def plan_placement(
    model: ModelDims, pq: PqConfig, batch: int, hw: PimConfig
) -> Placement:
    """Round-robin units over HBMs and their subvectors over banks.

    Units confined to one HBM keep all attention traffic stack-local;
    subvectors prefer distinct banks while supply lasts. Utilization is
    the fraction of BankPEs that receive work.
    """
    if batch < 1:
        raise ConfigError("batch must be >= 1")
    units = [(b, h) for b in range(batch) for h in range(model.n_kv_heads)]
    if len(units) > hw.total_banks:
        raise CapacityError(
            f"{len(units)} (batch x kv_head) units exceed {hw.total_banks} banks"
        )
    banks_per_hbm = hw.channels_per_hbm * hw.banks_per_channel
    unit_hbm = {}
    task_bank = {}
    next_slot = [0] * hw.n_hbms
    for i, unit in enumerate(units):
        hbm = i % hw.n_hbms
        unit_hbm[unit] = hbm
        base = next_slot[hbm]
        for s in range(pq.m):
            slot = (base + s) % banks_per_hbm
            ch, bank = divmod(slot, hw.banks_per_channel)
            task_bank[(unit[0], unit[1], s)] = (hbm, ch, bank)
        next_slot[hbm] = (base + pq.m) % banks_per_hbm
    busy = len({home for home in task_bank.values()})
    return Placement(
        unit_hbm=unit_hbm,
        task_bank=task_bank,
        utilization=busy / hw.total_banks,
        m=pq.m,
    )


# --- per-bank memory regions ---------------------------------------------


@dataclass(frozen=True)
class MemoryLayout:
    """Row ranges of the codebook / index / buffer regions in one bank."""

    codebook_rows: tuple      # [start, end)
    index_rows: tuple
    buffer_rows: tuple
    codebook_slice_rows: int  # rows per (window, subvector, dim) table slice
    index_rows_per_layer: int
    accounting: dict
    rows_per_bank: int

    def regions(self):
        return {
            "codebook": self.codebook_rows,
            "index": self.index_rows,
            "buffer": self.buffer_rows,
        }


def _rows(nbytes: float, row_bytes: int) -> int:
    return int(math.ceil(nbytes / row_bytes)) if nbytes > 0 else 0


def n_windows_for(pq: PqConfig, seq_len: int) -> int:
    s = min(pq.sink_tokens, seq_len)
    r = min(pq.recent_tokens, seq_len - s)
    q = max(seq_len - s - r, 0)
    if q == 0:
        return 0
    return 1 if pq.window_len == 0 else math.ceil(q / pq.window_len)


def allocate(
    pq: PqConfig,
    seq_len: int,
    n_layers: int,
    hw: PimConfig,
    head_dim: int = 128,
    tasks_per_bank: int = 1,
) -> MemoryLayout:
    """Plan one bank's row regions for a full model's KV residency.

    Codebooks (all layers) are fixed; PQ indices are laid out per layer at
    page granularity (bit-packed entries); the buffer region holds one
    layer's raw token slice during prefilling and may be overwritten by
    decode-grown index pages afterwards.
    """
    if seq_len < 0 or n_layers < 1 or tasks_per_bank < 1:
        raise ConfigError("bad allocation shape")
    if head_dim % pq.m:
        raise ConfigError(f"head_dim {head_dim} not divisible by m={pq.m}")
    hw.check_page_residency(pq)
    rb = hw.row_buffer_bytes
    sub = head_dim // pq.m
    windows = n_windows_for(pq, seq_len)
    slice_rows = _rows(pq.k * 2, rb)

    # persistent centroids: both streams, dim-major slices, every layer
    codebook_rows = tasks_per_bank * n_layers * 2 * windows * sub * slice_rows
    # lookup-table row per stream (reused across steps)
    codebook_rows += tasks_per_bank * 2

    s = min(pq.sink_tokens, seq_len)
    r = min(pq.recent_tokens, seq_len - s)
    quantized = max(seq_len - s - r, 0)
    idx_bytes = quantized * pq.index_bits() / 8.0
    index_per_layer = tasks_per_bank * 2 * _rows(idx_bytes, rb)
    index_rows = index_per_layer * n_layers

    raw_rows = 2 * _rows(seq_len * sub * 2, rb)        # one layer's tokens
    assign_rows = _rows(seq_len * 2, rb)               # cluster assignments
    buffer_rows = tasks_per_bank * (raw_rows + assign_rows + 2)

    total = codebook_rows + index_rows + buffer_rows
    accounting = {
        "codebook_rows": codebook_rows,
        "index_rows": index_rows,
        "buffer_rows": buffer_rows,
        "rows_per_bank": hw.rows_per_bank,
        "windows": windows,
        "tasks_per_bank": tasks_per_bank,
    }
    if total > hw.rows_per_bank:
        raise CapacityError(
            f"bank rows exhausted: need {total} of {hw.rows_per_bank} ({accounting})"
        )
    c_end = codebook_rows
    i_end = c_end + index_rows
    b_end = i_end + buffer_rows
    return MemoryLayout(
        codebook_rows=(0, c_end),
        index_rows=(c_end, i_end),
        buffer_rows=(i_end, b_end),
        codebook_slice_rows=slice_rows,
        index_rows_per_layer=index_per_layer,
        accounting=accounting,
        rows_per_bank=hw.rows_per_bank,
    )
