"""Cycle-approximate model of the grid-core accelerator.

The modeled datapath: per training iteration, forward interpolation reads
stream through a read-request coalescer into banked table SRAM, the feature
network runs on systolic-array / adder-tree matmul units, and backward
gradient write-intents pass through an update-merging buffer before being
written back. Table size selects a core-fusion level (8/16/32 banks). DRAM
is a pure bandwidth bound on the coordinate/feature streams. All host-side
pipeline steps (pixel sampling, ray setup, compositing, loss) are outside
the cycle totals.

Units of work are table *requests*; several requests to the same SRAM row of
the same bank in one cycle collapse into a single physical access.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from enum import Enum

import numpy as np

from .errors import UnsupportedTableSize
from .trace import AccessTrace

BYTES_PER_ENTRY_SCALAR = 2  # half-precision table storage


class FusionLevel(Enum):
    LEVEL0 = 0  # 4 independent cores, 8 banks each, tables up to 256 KB
    LEVEL1 = 1  # 2 cores fused, 16 banks, up to 512 KB
    LEVEL2 = 2  # 4 cores fused, 32 banks, up to 1 MB


FUSION_BANKS = {FusionLevel.LEVEL0: 8, FusionLevel.LEVEL1: 16, FusionLevel.LEVEL2: 32}


def select_fusion(table_bytes: int) -> FusionLevel:
    """Fusion mode is a pure function of table byte size."""
    if table_bytes <= 256 * 1024:
        return FusionLevel.LEVEL0
    if table_bytes <= 512 * 1024:
        return FusionLevel.LEVEL1
    if table_bytes <= 1024 * 1024:
        return FusionLevel.LEVEL2
    raise UnsupportedTableSize(f"{table_bytes} bytes exceeds the 1 MB fusion ceiling")


def table_bytes(total_entries: int, features_per_entry: int) -> int:
    return total_entries * features_per_entry * BYTES_PER_ENTRY_SCALAR


@dataclass
class SramBankModel:
    """Row-interleaved banked SRAM: row = addr // row_width, bank = row % banks."""

    bank_count: int = 8
    row_width: int = 8
    table_entries: int = 1 << 14

    def map(self, addresses: np.ndarray):
        addresses = np.asarray(addresses, dtype=np.int64)
        if np.any(addresses < 0) or np.any(addresses >= self.table_entries):
            raise ValueError("address out of table range")
        rows = addresses // self.row_width
        return rows % self.bank_count, rows


def map_bank(address: int, bank_model: SramBankModel):
    """(bank, row) of one address."""
    banks, rows = bank_model.map(np.asarray([address]))
    return int(banks[0]), int(rows[0])


@dataclass
class FrmUnit:
    window_depth: int = 16


@dataclass
class ScheduleResult:
    cycles: int
    issued: int              # requests served
    physical_accesses: int   # after same-row collapse
    issue_cycle: np.ndarray  # per request, the cycle it issued in

    def bank_utilization(self, bank_count: int) -> float:
        if self.cycles == 0:
            return 0.0
        return self.physical_accesses / (bank_count * self.cycles)


def frm_schedule(addresses, frm: FrmUnit, bank_model: SramBankModel,
                 serialize_same_address: bool = False) -> ScheduleResult:
    """Greedy oldest-first scheduling inside the reorder window.

    Each cycle the window is scanned in request order; the first request per
    bank claims that bank's row, later requests to the same (bank, row) join
    the same physical access, and a request behind a skipped same-bank
    request also waits so per-bank service order matches arrival order.

    With serialize_same_address (the write path), repeats of one address never
    share a cycle: a row-wide access can carry several distinct addresses, but
    collapsing two updates of the same entry would need value accumulation,
    which only the merge buffer performs.
    """
    addresses = np.asarray(addresses)
    n = len(addresses)
    issue_cycle = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return ScheduleResult(0, 0, 0, issue_cycle)
    banks, rows = bank_model.map(addresses)
    banks = banks.tolist()
    rows = rows.tolist()
    addr_list = addresses.tolist()
    window: list[int] = []
    next_req = 0
    cycle = 0
    physical = 0
    depth = frm.window_depth
    while next_req < n or window:
        while len(window) < depth and next_req < n:
            window.append(next_req)
            next_req += 1
        claimed: dict[int, int] = {}
        issued_addrs: set = set()
        blocked: set[int] = set()
        remaining: list[int] = []
        for idx in window:
            b = banks[idx]
            if b in blocked:
                remaining.append(idx)
                continue
            r = rows[idx]
            if b not in claimed:
                claimed[b] = r
                physical += 1
                issue_cycle[idx] = cycle
                if serialize_same_address:
                    issued_addrs.add(addr_list[idx])
            elif claimed[b] == r:
                if serialize_same_address:
                    if addr_list[idx] in issued_addrs:
                        blocked.add(b)
                        remaining.append(idx)
                        continue
                    issued_addrs.add(addr_list[idx])
                issue_cycle[idx] = cycle
            else:
                blocked.add(b)
                remaining.append(idx)
        window = remaining
        cycle += 1
    return ScheduleResult(cycle, n, physical, issue_cycle)


def naive_read_cycles(addresses, bank_model: SramBankModel, group_size: int = 8) -> int:
    """Baseline issue: each cube's reads go out in arrival order with no
    cross-cube packing.

    Every cube (one point, one level) is scheduled independently under the
    same in-order banked-issue rule the mapper uses, and the next cube waits
    for it to drain. The mapper's only advantage is its cross-cube window, so
    its cycle count can never exceed this baseline.
    """
    addresses = np.asarray(addresses)
    n = len(addresses)
    if n == 0:
        return 0
    banks, rows = bank_model.map(addresses)
    total = 0
    for lo in range(0, n, group_size):
        hi = min(lo + group_size, n)
        total += _inorder_issue_cycles(banks[lo:hi].tolist(), rows[lo:hi].tolist())
    return total


def _inorder_issue_cycles(banks: list, rows: list) -> int:
    """Makespan of the in-order one-row-per-bank issue rule for one group."""
    pending = list(range(len(banks)))
    cycles = 0
    while pending:
        claimed: dict[int, int] = {}
        blocked: set[int] = set()
        remaining = []
        for idx in pending:
            b = banks[idx]
            if b in blocked:
                remaining.append(idx)
            elif b not in claimed:
                claimed[b] = rows[idx]
            elif claimed[b] != rows[idx]:
                blocked.add(b)
                remaining.append(idx)
        pending = remaining
        cycles += 1
    return cycles


def optimal_schedule_cycles(addresses, bank_model: SramBankModel) -> int:
    """Order-free optimum: the busiest bank's distinct-row count.

    A cycle can serve one row per bank (and every pending request to it), so
    no schedule beats max-per-bank distinct rows, and serving each bank's
    i-th distinct row in cycle i achieves it.
    """
    addresses = np.asarray(addresses)
    if len(addresses) == 0:
        return 0
    banks, rows = bank_model.map(addresses)
    best = 0
    for b in np.unique(banks):
        best = max(best, len(np.unique(rows[banks == b])))
    return int(best)


@dataclass
class BumUnit:
    capacity: int = 16
    idle_evict: int = 64
    half_precision: bool = False


@dataclass
class BumResult:
    write_addresses: np.ndarray
    write_values: np.ndarray
    write_positions: np.ndarray  # input index at which each write left the buffer
    naive_writes: int
    merged_writes: int


def bum_process(addresses, values, bum: BumUnit) -> BumResult:
    """Merge a gradient-update stream through the content-addressed buffer.

    One input per cycle. A matching buffered address accumulates and resets
    its idle counter; a miss inserts, evicting the oldest entry of a full
    buffer as one SRAM write. Entries idle for idle_evict cycles are written
    back, and end-of-stream flushes everything, so per-address value sums are
    conserved exactly (to within rounding in half-precision mode).
    """
    addresses = np.asarray(addresses)
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    n = len(addresses)
    buffer: dict[int, list] = {}  # addr -> [value, last_touch]; dict order = insertion
    out_addr: list[int] = []
    out_val: list[np.ndarray] = []
    out_pos: list[int] = []

    def emit(addr, value, pos):
        out_addr.append(addr)
        if bum.half_precision:
            value = value.astype(np.float16).astype(np.float64)
        out_val.append(value)
        out_pos.append(pos)

    min_touch = 0
    for t in range(n):
        a = int(addresses[t])
        v = values[t]
        slot = buffer.get(a)
        if slot is not None:
            slot[0] = slot[0] + v
            slot[1] = t
        else:
            if len(buffer) >= bum.capacity:
                oldest = next(iter(buffer))
                val, _ = buffer.pop(oldest)
                emit(oldest, val, t)
            buffer[a] = [v.copy(), t]
        # Idle write-back; the min-touch watermark skips the scan when nothing
        # can have expired yet.
        if t - min_touch >= bum.idle_evict:
            expired = [addr for addr, (_, touch) in buffer.items()
                       if t - touch >= bum.idle_evict]
            for addr in expired:
                val, _ = buffer.pop(addr)
                emit(addr, val, t)
            min_touch = min((touch for _, touch in buffer.values()), default=t)
    for addr, (val, _) in buffer.items():
        emit(addr, val, n)
    write_addresses = np.asarray(out_addr, dtype=np.int64)
    write_values = (np.stack(out_val) if out_val
                    else np.empty((0, values.shape[1]), dtype=np.float64))
    return BumResult(write_addresses, write_values,
                     np.asarray(out_pos, dtype=np.int64), n, len(out_addr))


def mlp_cycle_model(m: int, n: int, k: int, unit: str | None = None,
                    systolic_dim: int = 16, tree_width: int = 64) -> int:
    """Cycles of an (m x k) @ (k x n) matmul on the chosen unit.

    Wide outputs (> 3 channels) map to the systolic array; narrow outputs map
    to the multiplier-adder-tree, which reduces k products in a pipelined
    tree per output element.
    """
    if m < 1 or n < 1 or k < 1:
        raise ValueError("matmul dims must be positive")
    if unit is None:
        unit = "adder_tree" if n <= 3 else "systolic"
    if unit == "systolic":
        a = systolic_dim
        return math.ceil(m / a) * math.ceil(n / a) * (2 * a + k - 2)
    if unit == "adder_tree":
        per_output = math.ceil(k / tree_width) * math.ceil(math.log2(tree_width) + 1)
        return m * n * per_output
    raise ValueError(f"unknown MLP unit {unit!r}")


@dataclass
class SimConfig:
    row_width: int = 8
    frm_window: int = 16
    bum_capacity: int = 16
    bum_idle_evict: int = 64
    systolic_dim: int = 16
    tree_width: int = 64
    pipeline_depth: int = 8
    clock_hz: float = 0.8e9
    dram_bandwidth: float = 59.7e9
    frm_enabled: bool = True
    bum_enabled: bool = True
    half_precision: bool = False
    host_overhead_cycles: int = 0

    @property
    def dram_bytes_per_cycle(self) -> float:
        return self.dram_bandwidth / self.clock_hz


@dataclass
class UnitRow:
    phase: str
    unit: str
    cycles: int
    reads: int = 0
    writes_naive: int = 0
    writes_merged: int = 0
    bank_util: float = 0.0


@dataclass
class SimReport:
    total_cycles: int = 0
    phase_cycles: dict = dc_field(default_factory=dict)
    rows: list = dc_field(default_factory=list)
    reads_requested: int = 0
    reads_served: int = 0
    physical_reads: int = 0
    writes_naive: int = 0
    writes_merged: int = 0

    @property
    def seconds(self) -> float:
        return self.total_cycles / SimConfig().clock_hz

    def seconds_at(self, clock_hz: float) -> float:
        return self.total_cycles / clock_hz

    def to_csv(self) -> str:
        lines = ["phase,unit,cycles,reads,writes_naive,writes_merged,bank_util"]
        for r in self.rows:
            lines.append(f"{r.phase},{r.unit},{r.cycles},{r.reads},"
                         f"{r.writes_naive},{r.writes_merged},{r.bank_util!r}")
        lines.append(f"total,total,{self.total_cycles},{self.reads_served},"
                     f"{self.writes_naive},{self.writes_merged},0.0")
        return "\n".join(lines) + "\n"


def _branch_bank_model(branch_cfg: dict, cfg: SimConfig):
    total_entries = branch_cfg["levels"] * branch_cfg["table_size"]
    nbytes = table_bytes(total_entries, branch_cfg["features_per_entry"])
    level = select_fusion(nbytes)
    return SramBankModel(FUSION_BANKS[level], cfg.row_width, total_entries), level


def _global_addresses(sub: AccessTrace, table_size: int) -> np.ndarray:
    """Per-level table indices offset into one flat SRAM address space."""
    return sub.address.astype(np.int64) + sub.level.astype(np.int64) * table_size


def _mlp_forward_cycles(n_points: int, layer_dims, cfg: SimConfig) -> int:
    total = 0
    for k, n_out in layer_dims:
        total += mlp_cycle_model(n_points, n_out, k, systolic_dim=cfg.systolic_dim,
                                 tree_width=cfg.tree_width)
    return total


def _mlp_backward_cycles(n_points: int, layer_dims, cfg: SimConfig) -> int:
    # Per layer: the weight-gradient matmul (k x m @ m x n) and the
    # input-gradient matmul (m x n @ n x k).
    total = 0
    for k, n_out in layer_dims:
        total += mlp_cycle_model(k, n_out, n_points, systolic_dim=cfg.systolic_dim,
                                 tree_width=cfg.tree_width)
        total += mlp_cycle_model(n_points, k, n_out, systolic_dim=cfg.systolic_dim,
                                 tree_width=cfg.tree_width)
    return total


BRANCH_NAMES = ("density", "color")


def simulate(trace: AccessTrace, cfg: SimConfig | None = None) -> SimReport:
    """Replay a trace through the accelerator model.

    The trace header must carry each branch's table geometry (written by the
    trainer) and the feature-network layer dims. Forward reads of the two
    branches run on separate cores in parallel, as do backward writes; the
    MLP phases are shared. Each grid phase pays the fixed-function pipeline
    fill once per iteration and is bounded below by DRAM streaming time.
    """
    cfg = cfg or SimConfig()
    report = SimReport()
    if len(trace) == 0:
        report.total_cycles = cfg.pipeline_depth
        report.phase_cycles = {"pipeline": cfg.pipeline_depth}
        report.rows.append(UnitRow("forward", "pipeline", cfg.pipeline_depth))
        return report
    # The fused density table occupies all four grid cores in the reference
    # configuration, so the two branches' grid phases serialize rather than
    # overlap; one composition rule is used across fusion modes.
    branch_cfgs = {}
    for name in BRANCH_NAMES:
        if name not in trace.header:
            raise ValueError(f"trace header missing {name!r} table config")
        branch_cfgs[name] = trace.header[name]
    layer_dims = trace.header.get("mlp_dims")
    if layer_dims is None:
        raise ValueError("trace header missing mlp_dims")
    models = {name: _branch_bank_model(branch_cfgs[name], cfg)
              for name in BRANCH_NAMES}
    frm = FrmUnit(cfg.frm_window)
    bum = BumUnit(cfg.bum_capacity, cfg.bum_idle_evict, cfg.half_precision)
    acc = {("forward", n): dict(cycles=0, reads=0, phys=0) for n in BRANCH_NAMES}
    acc.update({("backward", n): dict(cycles=0, naive=0, merged=0, phys=0)
                for n in BRANCH_NAMES})
    phase_totals = {"forward_grid": 0, "forward_mlp": 0, "backward_mlp": 0,
                    "backward_grid": 0, "dram_stall": 0, "host": 0}
    iterations = np.unique(trace.iteration)
    bpc = cfg.dram_bytes_per_cycle
    for it in iterations:
        it_trace = trace.filter(iteration=int(it))
        n_points = 0
        fwd_cycles = {}
        for name in BRANCH_NAMES:
            sub = it_trace.filter(phase="forward", kind="read", branch=name)
            model, _ = models[name]
            addrs = _global_addresses(sub, branch_cfgs[name]["table_size"])
            if cfg.frm_enabled:
                sched = frm_schedule(addrs, frm, model)
                cycles, phys = sched.cycles, sched.physical_accesses
            else:
                cycles = naive_read_cycles(addrs, model)
                phys = len(addrs)
            a = acc[("forward", name)]
            a["cycles"] += cycles
            a["reads"] += len(addrs)
            a["phys"] += phys
            fwd_cycles[name] = cycles
            levels = branch_cfgs[name]["levels"]
            if len(addrs):
                n_points = max(n_points, len(addrs) // (8 * levels))
        grid_fwd = sum(fwd_cycles.values()) + (cfg.pipeline_depth if n_points else 0)
        # DRAM: fp16 coordinate stream in, fp16 feature pair out per point.
        fwd_traffic = n_points * (3 + 4) * 2
        dram_fwd = math.ceil(fwd_traffic / bpc)
        phase_totals["forward_grid"] += max(grid_fwd, dram_fwd)
        phase_totals["dram_stall"] += max(0, dram_fwd - grid_fwd)

        mlp_fwd = _mlp_forward_cycles(n_points, layer_dims, cfg) if n_points else 0
        phase_totals["forward_mlp"] += mlp_fwd
        bwd_any = len(it_trace.filter(phase="backward", kind="write")) > 0
        if bwd_any:
            phase_totals["backward_mlp"] += _mlp_backward_cycles(n_points, layer_dims,
                                                                 cfg)
        # Backward grid writes: merge, then write back through the banks.
        bwd_cycles = {}
        for name in BRANCH_NAMES:
            sub = it_trace.filter(phase="backward", kind="write", branch=name)
            if len(sub) == 0:
                bwd_cycles[name] = 0
                continue
            model, _ = models[name]
            addrs = _global_addresses(sub, branch_cfgs[name]["table_size"])
            a = acc[("backward", name)]
            a["naive"] += len(addrs)
            if cfg.bum_enabled:
                merged = bum_process(addrs, np.ones(len(addrs)), bum)
                write_addrs = merged.write_addresses
            else:
                write_addrs = addrs
            a["merged"] += len(write_addrs)
            if cfg.frm_enabled:
                sched = frm_schedule(write_addrs, frm, model,
                                     serialize_same_address=True)
                cycles, phys = sched.cycles, sched.physical_accesses
            else:
                cycles, phys = len(write_addrs), len(write_addrs)
            a["cycles"] += cycles
            a["phys"] += phys
            bwd_cycles[name] = cycles
        if bwd_any:
            grid_bwd = sum(bwd_cycles.values()) + cfg.pipeline_depth
            bwd_traffic = n_points * 4 * 2  # upstream feature gradients in
            dram_bwd = math.ceil(bwd_traffic / bpc)
            phase_totals["backward_grid"] += max(grid_bwd, dram_bwd)
            phase_totals["dram_stall"] += max(0, dram_bwd - grid_bwd)
        phase_totals["host"] += cfg.host_overhead_cycles

    for name in BRANCH_NAMES:
        model, _ = models[name]
        a = acc[("forward", name)]
        util = (a["phys"] / (model.bank_count * a["cycles"])) if a["cycles"] else 0.0
        report.rows.append(UnitRow("forward", f"grid_{name}", a["cycles"],
                                   reads=a["reads"], bank_util=round(util, 6)))
        report.reads_requested += a["reads"]
        report.reads_served += a["reads"]
        report.physical_reads += a["phys"]
    report.rows.append(UnitRow("forward", "mlp", phase_totals["forward_mlp"]))
    report.rows.append(UnitRow("backward", "mlp", phase_totals["backward_mlp"]))
    for name in BRANCH_NAMES:
        model, _ = models[name]
        a = acc[("backward", name)]
        util = (a["phys"] / (model.bank_count * a["cycles"])) if a["cycles"] else 0.0
        report.rows.append(UnitRow("backward", f"grid_{name}", a["cycles"],
                                   writes_naive=a["naive"], writes_merged=a["merged"],
                                   bank_util=round(util, 6)))
        report.writes_naive += a["naive"]
        report.writes_merged += a["merged"]
    report.rows.append(UnitRow("any", "dram_stall", phase_totals["dram_stall"]))
    if cfg.host_overhead_cycles:
        report.rows.append(UnitRow("any", "host", phase_totals["host"]))
    report.phase_cycles = dict(phase_totals)
    report.total_cycles = (phase_totals["forward_grid"] + phase_totals["forward_mlp"]
                           + phase_totals["backward_mlp"]
                           + phase_totals["backward_grid"] + phase_totals["host"])
    return report


def grid_phase_cycles(report: SimReport) -> int:
    """Grid read + write cycles (the part the coalescer and merger act on)."""
    return report.phase_cycles["forward_grid"] + report.phase_cycles["backward_grid"]


def fusion_utilization(addresses, table_entries: int, cfg: SimConfig | None = None):
    """Aggregate bank utilization: one fused Level-2 core group vs four
    standalone Level-0 cores.

    A table larger than one core's SRAM must be partitioned in Level-0 mode:
    core c owns the c-th quarter of the address space and serves only the
    requests that land there, so a spatially clustered stream piles onto one
    core while the other three idle. The fused mode spreads the same rows over
    all 32 banks. Utilization is physical accesses per bank-cycle over the 32
    banks, with elapsed time the slowest core's.
    """
    cfg = cfg or SimConfig()
    addresses = np.asarray(addresses)
    frm = FrmUnit(cfg.frm_window)
    l2_model = SramBankModel(32, cfg.row_width, table_entries)
    l2 = frm_schedule(addresses, frm, l2_model)
    util_l2 = l2.bank_utilization(32)
    quarter = (table_entries + 3) // 4
    core_cycles = []
    phys_total = 0
    for c in range(4):
        part = addresses[(addresses // quarter) == c] - c * quarter
        l0_model = SramBankModel(8, cfg.row_width, quarter)
        res = frm_schedule(part, frm, l0_model)
        core_cycles.append(res.cycles)
        phys_total += res.physical_accesses
    elapsed = max(core_cycles) if core_cycles else 0
    util_l0 = phys_total / (32 * elapsed) if elapsed else 0.0
    return util_l2, util_l0
