"""Event-driven replay of PIM command traces.

Commands execute in emission order against shared resources: per-bank
row state and busy time, per-bank-group column cadence for single-bank
column commands, the per-channel TSV link, a per-channel gather unit,
and the per-stack BufferPE. Broadcast column commands model the all-bank
PIM mode where every listed bank streams its own row in lockstep.

Banks follow program order, so a simple busy pointer is exact for them.
The shared links and BufferPE serve requests from many independent
command chains, so they are scheduled with gap backfilling: a request
takes the earliest free interval at or after its dependencies clear.
TSV transfers are GRF-buffered and do not stall the source or target
bank. Stage cycle accounting sums command busy time per channel and
reports the busiest channel.
"""

from __future__ import annotations

from bisect import insort
from dataclasses import dataclass, field

from .arch import PimConfig
from .errors import ProtocolError
from .trace import STAGES, CommandTrace

_COL_OPS = ("RD", "WR", "RET", "MAC_AB")


@dataclass
class SimReport:
    cycles_total: int
    cycles_by_stage: dict
    energy_by_stage: dict
    counters: dict
    meta: dict = field(default_factory=dict)

    @property
    def energy_total_pj(self) -> float:
        return sum(self.energy_by_stage.values())

    def to_dict(self) -> dict:
        return {
            "cycles_total": self.cycles_total,
            "cycles_by_stage": dict(self.cycles_by_stage),
            "energy_by_stage": dict(self.energy_by_stage),
            "counters": dict(self.counters),
            "meta": dict(self.meta),
        }


class _SharedResource:
    """Busy-interval list with earliest-gap (backfill) allocation."""

    __slots__ = ("intervals",)

    def __init__(self):
        self.intervals: list = []

    def earliest(self, t0: int, dur: int) -> int:
        if dur <= 0:
            return t0
        t = t0
        for s, e in self.intervals:
            if t + dur <= s:
                break
            if e > t:
                t = e
        return t

    def reserve(self, start: int, dur: int) -> None:
        if dur > 0:
            insort(self.intervals, (start, start + dur))


class _SerialResource:
    """Program-order resource: a plain busy-until pointer."""

    __slots__ = ("busy",)

    def __init__(self):
        self.busy = 0

    def earliest(self, t0: int, dur: int) -> int:
        return max(t0, self.busy)

    def reserve(self, start: int, dur: int) -> None:
        self.busy = max(self.busy, start + dur)


def _schedule(resources, t0: int, dur: int) -> int:
    start = t0
    while True:
        best = start
        for r in resources:
            best = max(best, r.earliest(start, dur))
        if best == start:
            break
        start = best
    for r in resources:
        r.reserve(start, dur)
    return start


def validate_trace(trace: CommandTrace) -> None:
    """Protocol legality: per-bank ACT -> column ops on the open row ->
    PRE, RET only against an open row, streamed commands only on closed
    banks."""
    open_row: dict = {}
    for idx, cmd in enumerate(trace.commands):
        for bank in cmd.banks:
            key = (cmd.hbm, cmd.channel, bank)
            cur = open_row.get(key)
            if cmd.opcode == "ACT_AB":
                if cur is not None:
                    raise ProtocolError(
                        f"ACT on bank {key} with row {cur} still open", idx
                    )
                if cmd.row is None:
                    raise ProtocolError("ACT without a row", idx)
                open_row[key] = cmd.row
            elif cmd.opcode == "PRE":
                if cur is None:
                    raise ProtocolError(f"PRE on closed bank {key}", idx)
                open_row[key] = None
            elif cmd.opcode == "RET":
                if cur is None or cmd.row != cur:
                    raise ProtocolError(
                        f"RET needs row {cmd.row} open on bank {key}, "
                        f"found {cur}", idx
                    )
            elif cmd.opcode in _COL_OPS:
                if cmd.rows > 0:
                    if cur is not None:
                        raise ProtocolError(
                            f"streamed {cmd.opcode} on bank {key} with open row",
                            idx,
                        )
                elif cmd.row is not None and cmd.row != cur:
                    raise ProtocolError(
                        f"{cmd.opcode} to row {cmd.row} but bank {key} has "
                        f"{cur} open", idx
                    )


def _stream_cycles(rows: int, nbytes: int, t, stream_rate: int) -> int:
    # PIM-mode sweeps read the open row through the PE datapath, so the
    # per-row transfer runs at the stream rate, not the column cadence
    per_row_bytes = -(-nbytes // rows)
    active = max(t.tRCD + -(-per_row_bytes // stream_rate), t.tRAS)
    return rows * (active + t.tRP)


def simulate(trace: CommandTrace, hw: PimConfig) -> SimReport:
    """Replay a trace; deterministic timing, energy, and counters."""
    validate_trace(trace)
    t = hw.timings
    en = hw.energies

    banks: dict = {}          # key -> _SerialResource
    bank_ready: dict = {}     # earliest next ACT (after tRP)
    bank_row: dict = {}
    bank_act_time: dict = {}
    bank_row_ready: dict = {}
    bg_next: dict = {}
    tsv: dict = {}            # chan -> _SharedResource
    gather: dict = {}
    bufferpe: dict = {}
    chan_barrier: dict = {}
    chan_last_act: dict = {}
    chan_max_done: dict = {}
    done = [0] * len(trace.commands)
    issue = [0] * len(trace.commands)

    stage_cycles: dict = {}
    stage_energy: dict = {s: 0.0 for s in STAGES}
    counters = {
        "acts": 0,
        "col_reads": 0,
        "col_writes": 0,
        "macs": 0,
        "tsv_bytes": 0,
        "inter_hbm_bytes": 0,
        "retrievals": 0,
        "bufferpe_ops": 0,
    }

    def bank_res(key):
        if key not in banks:
            banks[key] = _SerialResource()
        return banks[key]

    def shared(pool, key):
        if key not in pool:
            pool[key] = _SharedResource()
        return pool[key]

    for idx, cmd in enumerate(trace.commands):
        chan = (cmd.hbm, cmd.channel)
        base = chan_barrier.get(chan, 0)
        for dep in cmd.deps:
            base = max(base, done[dep])
        keys = [(cmd.hbm, cmd.channel, b) for b in cmd.banks]

        cols = -(-cmd.nbytes // hw.col_bytes) if cmd.nbytes else 0
        tsv_cycles = (
            -(-cmd.tsv_bytes // hw.tsv_bytes_per_cycle) if cmd.tsv_bytes else 0
        )
        duration = 0
        energy = 0.0
        start = base

        if cmd.opcode == "SET_CONFIG":
            start = max(base, chan_max_done.get(chan, 0))
            duration = 1
            chan_barrier[chan] = start + duration
        elif cmd.opcode == "ACT_AB":
            for key in keys:
                base = max(base, bank_ready.get(key, 0), bank_res(key).busy)
            base = max(base, chan_last_act.get(chan, -t.tRRD) + t.tRRD)
            start = base
            for key in keys:
                bank_row[key] = cmd.row
                bank_act_time[key] = start
                bank_row_ready[key] = start + t.tRCD
                bank_res(key).reserve(start, 0)
            chan_last_act[chan] = start
            counters["acts"] += len(keys)
            energy = len(keys) * en.e_act
        elif cmd.opcode == "PRE":
            for key in keys:
                base = max(base, bank_act_time.get(key, 0) + t.tRAS,
                           bank_res(key).busy)
            start = base
            for key in keys:
                bank_row[key] = None
                bank_ready[key] = start + t.tRP
        elif cmd.opcode == "RET":
            # indices feed the latched column decoder, so the open row
            # streams faster than discrete column commands
            for key in keys:
                base = max(base, bank_row_ready.get(key, 0))
            duration = max(-(-cmd.ops // hw.ret_values_per_cycle), 1)
            start = _schedule([bank_res(k) for k in keys], base, duration)
            cols_eq = -(-cmd.ops * 2 // hw.col_bytes)
            counters["retrievals"] += cmd.ops * len(keys)
            counters["col_reads"] += cols_eq * len(keys)
            energy = cols_eq * len(keys) * en.e_rd_col
        elif cmd.opcode in ("RD", "WR", "MAC_AB"):
            if cmd.rows > 0:
                duration = _stream_cycles(cmd.rows, cmd.nbytes, t,
                                          hw.pim_stream_bytes_per_cycle)
                counters["acts"] += cmd.rows * len(keys)
                energy += cmd.rows * len(keys) * en.e_act
            elif cmd.row is not None:
                for key in keys:
                    base = max(base, bank_row_ready.get(key, 0))
                duration = cols * t.tCCDL
            else:
                duration = cols * t.tCCDL  # GRF-resident data
            if cmd.opcode == "MAC_AB":
                duration = max(duration, cmd.ops, 1)
                counters["macs"] += cmd.ops * len(keys)
                energy += cmd.ops * len(keys) * en.e_mac16
            if cmd.opcode == "WR":
                counters["col_writes"] += cols * len(keys)
                energy += cols * len(keys) * en.e_wr_col
            else:
                counters["col_reads"] += cols * len(keys)
                energy += cols * len(keys) * en.e_rd_col
            duration = max(duration, tsv_cycles)
            resources = [bank_res(k) for k in keys]
            if len(keys) == 1 and cmd.rows == 0 and cmd.row is not None:
                resources.append(
                    shared(bg_next, (cmd.hbm, cmd.channel, keys[0][2] // 4))
                )
                duration = max(duration, t.tCCDL)
            if tsv_cycles:
                resources.append(shared(tsv, chan))
            start = _schedule(resources, base, duration)
        elif cmd.opcode in ("MV_BA", "MV_BF"):
            # GRF-buffered: occupies the TSV link only
            duration = max(tsv_cycles, 1)
            start = _schedule([shared(tsv, chan)], base, duration)
        elif cmd.opcode == "SFM":
            if cmd.unit == "gather":
                duration = max(-(-cmd.ops // hw.bufferpe_gather_rate), 1)
                start = _schedule([shared(gather, chan)], base, duration)
            else:
                duration = max(-(-cmd.ops // hw.bufferpe_throughput), 1)
                start = _schedule([shared(bufferpe, cmd.hbm)], base, duration)
            counters["bufferpe_ops"] += cmd.ops
            energy = cmd.ops * en.e_bufferpe_op
        else:  # pragma: no cover
            raise ProtocolError(f"unhandled opcode {cmd.opcode}", idx)

        if cmd.tsv_bytes:
            counters["tsv_bytes"] += cmd.tsv_bytes
            energy += cmd.tsv_bytes * 8 * en.e_tsv_per_bit

        end = start + duration
        chan_max_done[chan] = max(chan_max_done.get(chan, 0), end)
        done[idx] = end
        issue[idx] = start
        stage_cycles[(chan, cmd.stage)] = (
            stage_cycles.get((chan, cmd.stage), 0) + duration
        )
        stage_energy[cmd.stage] = stage_energy.get(cmd.stage, 0.0) + energy

    by_stage = {s: 0 for s in STAGES}
    for (chan, stage), cyc in stage_cycles.items():
        by_stage[stage] = max(by_stage[stage], cyc)
    total = max(done) if done else 0
    report = SimReport(
        cycles_total=total,
        cycles_by_stage=by_stage,
        energy_by_stage=stage_energy,
        counters=counters,
        meta={"phase": trace.phase, "workload": dict(trace.workload),
              "n_commands": len(trace.commands)},
    )
    report.issue_times = issue
    return report


def dump_trace(trace: CommandTrace, hw: PimConfig) -> str:
    """Tab-separated debug dump with simulated issue cycles."""
    report = simulate(trace, hw)
    return "\n".join(trace.dump_lines(report.issue_times)) + "\n"
