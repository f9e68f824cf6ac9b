"""PIM command stream generation.

Commands are emitted in dependency order with explicit dep edges; the
engine replays them against per-bank, per-channel, and per-stack
resources. Column-streaming commands (``rows > 0``) stand for a
self-managed ACT/read/PRE sweep over consecutive rows; single-row
lookups keep their ACT / RET / PRE commands explicit, which is what the
trace-level protocol checks and ACT-count bounds inspect.

A command with several target banks is an all-bank broadcast: every bank
performs the same operation on its own data, which is how the MAC/RET
command set reaches bank-level parallelism without modeling per-bank
command bus slots.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .arch import MemoryLayout, ModelDims, PimConfig, Placement
from .errors import ConfigError
from .quantizer import PqConfig, window_ranges

OPCODES = (
    "SET_CONFIG",
    "ACT_AB",
    "MAC_AB",
    "SFM",
    "RET",
    "MV_BA",
    "MV_BF",
    "RD",
    "WR",
    "PRE",
)

STAGES = (
    "qkv_gen",
    "transfer",
    "atnk",
    "sfm",
    "atnv",
    "retrieval",
    "cluster_dc",
    "cluster_ca",
    "cluster_cc",
    "ffn_gpu",
    "proj_gpu",
    "pcie",
)


@dataclass(frozen=True, slots=True)
class PimCommand:
    opcode: str
    hbm: int
    channel: int
    banks: tuple            # () = buffer-die / host-link op
    row: int | None = None
    nbytes: int = 0         # per-bank payload bytes
    ops: int = 0            # lane ops (MAC), reductions (SFM), retrievals (RET)
    rows: int = 0           # >0: self-managed multi-row stream
    tsv_bytes: int = 0      # total bytes crossing the channel TSV
    tag: str = "transfer"
    unit: str = ""          # SFM only: "stream" | "gather"
    n_bursts: int = 0       # logical burst count (command-count oracles)
    deps: tuple = ()

    @property
    def stage(self) -> str:
        return self.tag.split(":", 1)[0]


@dataclass
class CommandTrace:
    commands: list
    phase: str              # "prefill-cluster" | "decode-step"
    workload: dict = field(default_factory=dict)

    def per_channel(self) -> dict:
        out: dict = {}
        for idx, cmd in enumerate(self.commands):
            out.setdefault((cmd.hbm, cmd.channel), []).append((idx, cmd))
        return out

    def dump_lines(self, issue_times=None):
        """Debug format: cycle, channel, bank, opcode, row, col, bytes, tag."""
        lines = []
        for idx, c in enumerate(self.commands):
            cycle = issue_times[idx] if issue_times is not None else -1
            bank = "*" if len(c.banks) != 1 else str(c.banks[0])
            row = -1 if c.row is None else c.row
            lines.append(
                f"{cycle}\t{c.hbm}.{c.channel}\t{bank}\t{c.opcode}\t{row}\t0\t"
                f"{c.nbytes}\t{c.tag}"
            )
        return lines


class _Emitter:
    def __init__(self, phase, workload):
        self.commands: list = []
        self.phase = phase
        self.workload = workload

    def emit(self, **kw) -> int:
        cmd = PimCommand(**kw)
        if cmd.opcode not in OPCODES:
            raise ConfigError(f"unknown opcode {cmd.opcode}")
        if cmd.stage not in STAGES:
            raise ConfigError(f"unknown stage tag {cmd.tag}")
        self.commands.append(cmd)
        return len(self.commands) - 1

    def trace(self) -> CommandTrace:
        return CommandTrace(commands=self.commands, phase=self.phase,
                            workload=self.workload)


def _slot_groups(placement: Placement, hw: PimConfig):
    """Per channel: list of slots, each slot a tuple of (bank, task)."""
    by_bank = placement.tasks_by_bank()
    channels: dict = {}
    for (hbm, ch, bank), tasks in sorted(by_bank.items()):
        channels.setdefault((hbm, ch), {})[bank] = tasks
    groups: dict = {}
    for chan, banks in sorted(channels.items()):
        depth = max(len(t) for t in banks.values())
        slots = []
        for i in range(depth):
            slot = tuple(
                (bank, tasks[i])
                for bank, tasks in sorted(banks.items())
                if len(tasks) > i
            )
            slots.append(slot)
        groups[chan] = slots
    return groups


def _token_geometry(pq: PqConfig, seq_len: int):
    s = min(pq.sink_tokens, seq_len)
    r = min(pq.recent_tokens, seq_len - s)
    windows = window_ranges(s, seq_len - r, pq.window_len)
    return s, r, windows


def trace_decode_attention(
    seq_len: int,
    pq: PqConfig,
    placement: Placement,
    layout: MemoryLayout,
    hw: PimConfig,
    model: ModelDims,
    value_gather_site: str = "bankpe",
    key_gather_site: str = "bankpe",
) -> CommandTrace:
    """One decode step of compressed attention.

    Key lookups at the BankPE write each group head's inner-product table
    into the one open table row and retrieve through the stored indices,
    so key-lookup ACTs stay bounded by windows x subvectors-per-bank. The
    BufferPE arms ship the table rows / value codebook plus the index
    streams over the TSV and gather on the buffer die instead.
    """
    for site in (value_gather_site, key_gather_site):
        if site not in ("bankpe", "bufferpe"):
            raise ConfigError(f"bad gather site {site!r}")
    hw.check_page_residency(pq)
    group = model.group_size
    sub = model.head_dim // pq.m
    s, r, windows = _token_geometry(pq, seq_len)
    n_quant = sum(e - b for b, e in windows)
    bits = pq.index_bits()
    lanes = hw.bankpe_lanes
    rb = hw.row_buffer_bytes
    em = _Emitter(
        "decode-step",
        {
            "seq_len": seq_len,
            "group": group,
            "m": pq.m,
            "k": pq.k,
            "windows": len(windows),
            "value_gather_site": value_gather_site,
            "key_gather_site": key_gather_site,
        },
    )
    table_row = layout.codebook_rows[0]
    cb_row = layout.codebook_rows[0] + 2
    idx_row = layout.index_rows[0]

    groups = _slot_groups(placement, hw)
    # per (unit, qh): command ids producing softmax inputs
    score_deps: dict = {}
    sfm_ids: dict = {}
    out_deps: dict = {}
    unit_home: dict = {}

    def rows_for(nbytes):
        return max(1, -(-nbytes // rb))

    # --- key phase ---
    for (hbm, ch), slots in groups.items():
        em.emit(opcode="SET_CONFIG", hbm=hbm, channel=ch, banks=(),
                tag="transfer:set_config")
        for slot in slots:
            banks = tuple(b for b, _ in slot)
            units = [(t[0], t[1]) for _, t in slot]
            for u in units:
                unit_home.setdefault(u, (hbm, ch))
            wr_q = em.emit(
                opcode="WR", hbm=hbm, channel=ch, banks=banks,
                nbytes=group * sub * 2, tsv_bytes=group * sub * 2 * len(banks),
                tag="transfer:q",
            )
            idx_ld = -1
            if n_quant:
                idx_bytes = -(-n_quant * bits // 8)
                idx_ld = em.emit(
                    opcode="RD", hbm=hbm, channel=ch, banks=banks,
                    row=idx_row, rows=rows_for(idx_bytes), nbytes=idx_bytes,
                    tag="retrieval:key_idx",
                )
            for w, (wb, we) in enumerate(windows):
                nw = we - wb
                k_w = min(pq.k, nw)
                tbl = em.emit(
                    opcode="MAC_AB", hbm=hbm, channel=ch, banks=banks,
                    row=cb_row, rows=sub * layout.codebook_slice_rows,
                    nbytes=k_w * sub * 2,
                    ops=group * -(-k_w * sub // lanes),
                    n_bursts=group * k_w,
                    tag="atnk", deps=(wr_q,),
                )
                if key_gather_site == "bankpe":
                    act = em.emit(
                        opcode="ACT_AB", hbm=hbm, channel=ch, banks=banks,
                        row=table_row, tag="retrieval:key_lookup", deps=(tbl,),
                    )
                    for g in range(group):
                        em.emit(
                            opcode="WR", hbm=hbm, channel=ch, banks=banks,
                            row=table_row, nbytes=k_w * 2,
                            tag="retrieval:table_wr", deps=(tbl,),
                        )
                        ret_deps = (idx_ld,) if idx_ld >= 0 else ()
                        ret = em.emit(
                            opcode="RET", hbm=hbm, channel=ch, banks=banks,
                            row=table_row, ops=nw, nbytes=nw * 2,
                            n_bursts=nw, tag="retrieval:key_lookup_ret",
                            deps=ret_deps,
                        )
                        # partial scores sum across banks in the link's
                        # reduction tree: one token vector crosses the TSV
                        mv = em.emit(
                            opcode="MV_BA", hbm=hbm, channel=ch, banks=banks,
                            tsv_bytes=nw * 2,
                            tag="retrieval:score_up", deps=(ret,),
                        )
                        for u in units:
                            score_deps.setdefault((u, g), []).append(mv)
                    em.emit(
                        opcode="PRE", hbm=hbm, channel=ch, banks=banks,
                        row=table_row, tag="retrieval:close",
                    )
                else:
                    idx_up = em.emit(
                        opcode="MV_BA", hbm=hbm, channel=ch, banks=banks,
                        tsv_bytes=(-(-nw * bits // 8)) * len(banks),
                        tag="retrieval:idx_up",
                        deps=(idx_ld,) if idx_ld >= 0 else (),
                    )
                    for g in range(group):
                        tbl_up = em.emit(
                            opcode="MV_BA", hbm=hbm, channel=ch, banks=banks,
                            tsv_bytes=k_w * 2 * len(banks),
                            tag="retrieval:table_up", deps=(tbl,),
                        )
                        gather = em.emit(
                            opcode="SFM", hbm=hbm, channel=ch, banks=(),
                            ops=nw * len(banks), unit="gather",
                            n_bursts=nw, tag="retrieval:gather",
                            deps=(idx_up, tbl_up),
                        )
                        for u in units:
                            score_deps.setdefault((u, g), []).append(gather)

    # --- full-precision tokens and softmax, one per (unit, group head) ---
    fp_tokens = s + r
    for u, (hbm, ch) in sorted(unit_home.items()):
        fp_mv = -1
        if fp_tokens:
            first_bank = (placement.task_bank[(u[0], u[1], 0)][2],)
            fp_bytes = fp_tokens * model.head_dim * 2
            fp = em.emit(
                opcode="MAC_AB", hbm=hbm, channel=ch, banks=first_bank,
                row=layout.buffer_rows[0], rows=rows_for(fp_bytes),
                nbytes=fp_bytes,
                ops=group * -(-fp_tokens * model.head_dim // lanes),
                tag="retrieval:fp",
            )
            fp_mv = em.emit(
                opcode="MV_BA", hbm=hbm, channel=ch, banks=first_bank,
                tsv_bytes=fp_tokens * 2 * group,
                tag="retrieval:fp_up", deps=(fp,),
            )
        for g in range(group):
            deps = tuple(score_deps.get((u, g), ()))
            if fp_mv >= 0:
                deps = deps + (fp_mv,)
            # partials arrive pre-summed by the link reduction tree; the
            # BufferPE runs max / exp / sum / divide over the scores
            sfm_ids[(u, g)] = em.emit(
                opcode="SFM", hbm=hbm, channel=ch, banks=(),
                ops=4 * seq_len, unit="stream",
                n_bursts=seq_len, tag="sfm", deps=deps,
            )

    # --- value phase ---
    for (hbm, ch), slots in groups.items():
        for slot in slots:
            banks = tuple(b for b, _ in slot)
            units = [(t[0], t[1]) for _, t in slot]
            vidx_ld = -1
            if n_quant:
                idx_bytes = -(-n_quant * bits // 8)
                vidx_ld = em.emit(
                    opcode="RD", hbm=hbm, channel=ch, banks=banks,
                    row=idx_row + layout.index_rows_per_layer // 2,
                    rows=rows_for(idx_bytes), nbytes=idx_bytes,
                    tag="atnv:val_idx",
                )
            for w, (wb, we) in enumerate(windows):
                nw = we - wb
                k_w = min(pq.k, nw)
                if value_gather_site == "bankpe":
                    agg_ids = []
                    for g in range(group):
                        my_sfm = tuple(sfm_ids[(u, g)] for u in units)
                        # scores broadcast once down the channel bus
                        down = em.emit(
                            opcode="MV_BF", hbm=hbm, channel=ch, banks=banks,
                            tsv_bytes=nw * 2,
                            tag="atnv:score_down", deps=my_sfm,
                        )
                        agg_deps = (down,) if vidx_ld < 0 else (down, vidx_ld)
                        # per-centroid score accumulation: add-only, paired
                        # fp16 operands per lane
                        agg_ids.append(
                            em.emit(
                                opcode="MAC_AB", hbm=hbm, channel=ch,
                                banks=banks, ops=-(-nw // (2 * lanes)),
                                n_bursts=nw, tag="atnv:agg", deps=agg_deps,
                            )
                        )
                    vcb = em.emit(
                        opcode="MAC_AB", hbm=hbm, channel=ch, banks=banks,
                        row=cb_row + 1, rows=sub * layout.codebook_slice_rows,
                        nbytes=k_w * sub * 2,
                        ops=group * -(-k_w * sub // lanes),
                        n_bursts=group * k_w,
                        tag="atnv:cb", deps=tuple(agg_ids),
                    )
                    for g in range(group):
                        up = em.emit(
                            opcode="MV_BA", hbm=hbm, channel=ch, banks=banks,
                            tsv_bytes=sub * 2 * len(banks),
                            tag="atnv:out_up", deps=(vcb,),
                        )
                        for u in units:
                            out_deps.setdefault(u, []).append(up)
                else:
                    # gather on the buffer die forces a roundtrip: codebook
                    # and indices up, reconstructed value rows back down,
                    # then the weighted sum still runs at the BankPE
                    cb_rd = em.emit(
                        opcode="RD", hbm=hbm, channel=ch, banks=banks,
                        row=cb_row + 1, rows=sub * layout.codebook_slice_rows,
                        nbytes=k_w * sub * 2, tag="atnv:cb_rd",
                    )
                    cb_up = em.emit(
                        opcode="MV_BA", hbm=hbm, channel=ch, banks=banks,
                        tsv_bytes=k_w * sub * 2 * len(banks),
                        tag="atnv:cb_up", deps=(cb_rd,),
                    )
                    vidx_up = em.emit(
                        opcode="MV_BA", hbm=hbm, channel=ch, banks=banks,
                        tsv_bytes=(-(-nw * bits // 8)) * len(banks),
                        tag="atnv:idx_up",
                        deps=(vidx_ld,) if vidx_ld >= 0 else (),
                    )
                    for g in range(group):
                        my_sfm = tuple(sfm_ids[(u, g)] for u in units)
                        down = em.emit(
                            opcode="MV_BF", hbm=hbm, channel=ch, banks=banks,
                            tsv_bytes=nw * 2,
                            tag="atnv:score_down", deps=my_sfm,
                        )
                        gather = em.emit(
                            opcode="SFM", hbm=hbm, channel=ch, banks=(),
                            ops=nw * sub * len(banks), unit="gather",
                            n_bursts=nw, tag="atnv:gather",
                            deps=(cb_up, vidx_up),
                        )
                        vhat_down = em.emit(
                            opcode="MV_BF", hbm=hbm, channel=ch, banks=banks,
                            tsv_bytes=nw * sub * 2 * len(banks),
                            tag="atnv:vhat_down", deps=(gather,),
                        )
                        atnv = em.emit(
                            opcode="MAC_AB", hbm=hbm, channel=ch, banks=banks,
                            ops=-(-nw * sub // lanes),
                            n_bursts=nw, tag="atnv",
                            deps=(vhat_down, down),
                        )
                        up = em.emit(
                            opcode="MV_BA", hbm=hbm, channel=ch, banks=banks,
                            tsv_bytes=sub * 2 * len(banks),
                            tag="atnv:out_up", deps=(atnv,),
                        )
                        for u in units:
                            out_deps.setdefault(u, []).append(up)

    # --- outputs back to the host ---
    for u, (hbm, ch) in sorted(unit_home.items()):
        deps = tuple(out_deps.get(u, ())) + tuple(
            sfm_ids[(u, g)] for g in range(group)
        )
        em.emit(
            opcode="RD", hbm=hbm, channel=ch, banks=(),
            tsv_bytes=model.head_dim * 2 * group,
            tag="transfer:out", deps=deps,
        )
    return em.trace()


def trace_codebook_generation(
    seq_len: int,
    pq: PqConfig,
    placement: Placement,
    layout: MemoryLayout,
    hw: PimConfig,
    model: ModelDims,
) -> CommandTrace:
    """Codebook generation for one layer (both KV streams).

    Per k-means round: distance MACs at the banks, distance matrices to
    the BufferPE, MIN-based assignment there, assignments back, then the
    weighted-sum / reciprocal / scale split of the centroid update.
    ``iters = 0`` leaves only config broadcast and the raw KV fill.
    """
    hw.check_page_residency(pq)
    sub = model.head_dim // pq.m
    s, r, windows = _token_geometry(pq, seq_len)
    bits = pq.index_bits()
    lanes = hw.bankpe_lanes
    rb = hw.row_buffer_bytes
    em = _Emitter(
        "prefill-cluster",
        {"seq_len": seq_len, "m": pq.m, "k": pq.k, "iters": pq.iters,
         "windows": len(windows)},
    )
    cb_row = layout.codebook_rows[0] + 2
    raw_row = layout.buffer_rows[0]
    idx_row = layout.index_rows[0]

    def rows_for(nbytes):
        return max(1, -(-nbytes // rb))

    for (hbm, ch), slots in _slot_groups(placement, hw).items():
        em.emit(opcode="SET_CONFIG", hbm=hbm, channel=ch, banks=(),
                tag="transfer:set_config")
        for slot in slots:
            banks = tuple(b for b, _ in slot)
            raw_ids = {}
            for stream in (0, 1):
                raw_bytes = seq_len * sub * 2
                raw_ids[stream] = em.emit(
                    opcode="WR", hbm=hbm, channel=ch, banks=banks,
                    row=raw_row, rows=rows_for(raw_bytes), nbytes=raw_bytes,
                    tsv_bytes=raw_bytes * len(banks),
                    tag="transfer:raw_kv",
                )
            if pq.iters == 0 or not windows:
                continue
            for stream in (0, 1):
                prev_done = raw_ids[stream]
                for w, (wb, we) in enumerate(windows):
                    nw = we - wb
                    k_w = min(pq.k, nw)
                    if w == 0:
                        seed_wr = em.emit(
                            opcode="WR", hbm=hbm, channel=ch, banks=banks,
                            row=cb_row, rows=sub * layout.codebook_slice_rows,
                            nbytes=k_w * sub * 2,
                            tsv_bytes=k_w * sub * 2 * len(banks),
                            tag="cluster_cc:init", deps=(prev_done,),
                        )
                    else:
                        # copy-forward of the previous window's centroids
                        cp_rd = em.emit(
                            opcode="RD", hbm=hbm, channel=ch, banks=banks,
                            row=cb_row, rows=sub * layout.codebook_slice_rows,
                            nbytes=k_w * sub * 2, tag="cluster_cc:copy",
                            deps=(prev_done,),
                        )
                        seed_wr = em.emit(
                            opcode="WR", hbm=hbm, channel=ch, banks=banks,
                            row=cb_row, rows=sub * layout.codebook_slice_rows,
                            nbytes=k_w * sub * 2, tag="cluster_cc:copy",
                            deps=(cp_rd,),
                        )
                    latest = seed_wr
                    for _ in range(pq.iters):
                        dc = em.emit(
                            opcode="MAC_AB", hbm=hbm, channel=ch, banks=banks,
                            row=raw_row, rows=rows_for(nw * sub * 2),
                            nbytes=nw * sub * 2,
                            ops=-(-nw * k_w * sub // lanes),
                            n_bursts=nw * k_w, tag="cluster_dc",
                            deps=(latest,),
                        )
                        dist_up = em.emit(
                            opcode="MV_BA", hbm=hbm, channel=ch, banks=banks,
                            tsv_bytes=nw * k_w * 2 * len(banks),
                            tag="cluster_dc:dist_up", deps=(dc,),
                        )
                        ca = em.emit(
                            opcode="SFM", hbm=hbm, channel=ch, banks=(),
                            ops=nw * k_w * len(banks), unit="stream",
                            n_bursts=nw, tag="cluster_ca", deps=(dist_up,),
                        )
                        assign_down = em.emit(
                            opcode="MV_BF", hbm=hbm, channel=ch, banks=banks,
                            tsv_bytes=nw * 2 * len(banks),
                            tag="cluster_ca:assign_down", deps=(ca,),
                        )
                        cc = em.emit(
                            opcode="MAC_AB", hbm=hbm, channel=ch, banks=banks,
                            row=raw_row, rows=rows_for(nw * sub * 2),
                            nbytes=nw * sub * 2,
                            ops=-(-nw * (sub + 1) // lanes),
                            n_bursts=nw, tag="cluster_cc", deps=(assign_down,),
                        )
                        wsum_up = em.emit(
                            opcode="MV_BA", hbm=hbm, channel=ch, banks=banks,
                            tsv_bytes=k_w * 4 * len(banks),
                            tag="cluster_cc:wsum_up", deps=(cc,),
                        )
                        recip = em.emit(
                            opcode="SFM", hbm=hbm, channel=ch, banks=(),
                            ops=k_w * len(banks), unit="stream",
                            tag="cluster_cc:recip", deps=(wsum_up,),
                        )
                        recip_down = em.emit(
                            opcode="MV_BF", hbm=hbm, channel=ch, banks=banks,
                            tsv_bytes=k_w * 4 * len(banks),
                            tag="cluster_cc:recip_down", deps=(recip,),
                        )
                        scale = em.emit(
                            opcode="MAC_AB", hbm=hbm, channel=ch, banks=banks,
                            ops=-(-k_w * sub // lanes),
                            tag="cluster_cc:scale", deps=(recip_down,),
                        )
                        latest = em.emit(
                            opcode="WR", hbm=hbm, channel=ch, banks=banks,
                            row=cb_row, rows=sub * layout.codebook_slice_rows,
                            nbytes=k_w * sub * 2,
                            tag="cluster_cc:store", deps=(scale,),
                        )
                    # final assignments become the stored PQ indices
                    idx_bytes = -(-nw * bits // 8)
                    em.emit(
                        opcode="WR", hbm=hbm, channel=ch, banks=banks,
                        row=idx_row, rows=rows_for(idx_bytes), nbytes=idx_bytes,
                        tag="transfer:idx_store", deps=(latest,),
                    )
                    prev_done = latest
    return em.trace()


def trace_attacc_attention(
    seq_len: int,
    pq: PqConfig,
    placement: Placement,
    layout: MemoryLayout,
    hw: PimConfig,
    model: ModelDims,
) -> CommandTrace:
    """Raw-KV streaming attention (no compression): the bank-level PIM
    baseline. Every step streams both full token matrices through the
    MAC lanes."""
    group = model.group_size
    sub = model.head_dim // pq.m
    lanes = hw.bankpe_lanes
    rb = hw.row_buffer_bytes
    em = _Emitter("decode-step", {"seq_len": seq_len, "kind": "attacc"})
    raw_row = layout.buffer_rows[0]

    def rows_for(nbytes):
        return max(1, -(-nbytes // rb))

    groups = _slot_groups(placement, hw)
    sfm_ids: dict = {}
    unit_home: dict = {}
    score_deps: dict = {}
    out_deps: dict = {}
    for (hbm, ch), slots in groups.items():
        em.emit(opcode="SET_CONFIG", hbm=hbm, channel=ch, banks=(),
                tag="transfer:set_config")
        for slot in slots:
            banks = tuple(b for b, _ in slot)
            units = [(t[0], t[1]) for _, t in slot]
            for u in units:
                unit_home.setdefault(u, (hbm, ch))
            wr_q = em.emit(
                opcode="WR", hbm=hbm, channel=ch, banks=banks,
                nbytes=group * sub * 2, tsv_bytes=group * sub * 2 * len(banks),
                tag="transfer:q",
            )
            kbytes = seq_len * sub * 2
            atnk = em.emit(
                opcode="MAC_AB", hbm=hbm, channel=ch, banks=banks,
                row=raw_row, rows=rows_for(kbytes), nbytes=kbytes,
                ops=group * -(-seq_len * sub // lanes),
                n_bursts=group * seq_len, tag="atnk", deps=(wr_q,),
            )
            for g in range(group):
                mv = em.emit(
                    opcode="MV_BA", hbm=hbm, channel=ch, banks=banks,
                    tsv_bytes=seq_len * 2,
                    tag="atnk:score_up", deps=(atnk,),
                )
                for u in units:
                    score_deps.setdefault((u, g), []).append(mv)
    for u, (hbm, ch) in sorted(unit_home.items()):
        for g in range(group):
            sfm_ids[(u, g)] = em.emit(
                opcode="SFM", hbm=hbm, channel=ch, banks=(),
                ops=4 * seq_len, unit="stream",
                tag="sfm", deps=tuple(score_deps.get((u, g), ())),
            )
    for (hbm, ch), slots in groups.items():
        for slot in slots:
            banks = tuple(b for b, _ in slot)
            units = [(t[0], t[1]) for _, t in slot]
            down_ids = []
            for g in range(group):
                my_sfm = tuple(sfm_ids[(u, g)] for u in units)
                down_ids.append(
                    em.emit(
                        opcode="MV_BF", hbm=hbm, channel=ch, banks=banks,
                        tsv_bytes=seq_len * 2,
                        tag="atnv:score_down", deps=my_sfm,
                    )
                )
            vbytes = seq_len * sub * 2
            atnv = em.emit(
                opcode="MAC_AB", hbm=hbm, channel=ch, banks=banks,
                row=raw_row, rows=rows_for(vbytes), nbytes=vbytes,
                ops=group * -(-seq_len * sub // lanes),
                n_bursts=group * seq_len, tag="atnv", deps=tuple(down_ids),
            )
            for g in range(group):
                up = em.emit(
                    opcode="MV_BA", hbm=hbm, channel=ch, banks=banks,
                    tsv_bytes=sub * 2 * len(banks),
                    tag="atnv:out_up", deps=(atnv,),
                )
                for u in units:
                    out_deps.setdefault(u, []).append(up)
    for u, (hbm, ch) in sorted(unit_home.items()):
        em.emit(
            opcode="RD", hbm=hbm, channel=ch, banks=(),
            tsv_bytes=model.head_dim * 2 * model.group_size,
            tag="transfer:out", deps=tuple(out_deps.get(u, ())),
        )
    return em.trace()
