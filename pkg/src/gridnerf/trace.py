"""Recording and analysis of embedding-table accesses.

Every table read during interpolation and every gradient write-intent is one
record. Records carry the training iteration, the phase (forward/backward),
the branch (density/color), the grid level, a batch-local point id, the
vertex-pair group (the two cube corners sharing y and z), the table address,
and the access kind.

File format (little endian):
    magic "I3DT" | version u32 | header_len u32 | header JSON (utf-8)
    then fixed 16-byte records: iteration u32, address u32, point_id u32, flags u32.

Flags bit layout:
    bit 0      kind     (0 = read, 1 = write)
    bit 1      phase    (0 = forward, 1 = backward)
    bit 2      branch   (0 = density, 1 = color)
    bits 3-4   group id (0..3)
    bits 8-15  level
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import TraceFormatError
from .field_grid import CORNER_GROUPS

TRACE_MAGIC = b"I3DT"
TRACE_VERSION = 1
RECORD_BYTES = 16

KIND_READ, KIND_WRITE = 0, 1
PHASE_FORWARD, PHASE_BACKWARD = 0, 1
BRANCH_DENSITY, BRANCH_COLOR = 0, 1

_PHASE_NAMES = {"forward": PHASE_FORWARD, "backward": PHASE_BACKWARD}
_BRANCH_NAMES = {"density": BRANCH_DENSITY, "color": BRANCH_COLOR}
_KIND_NAMES = {"read": KIND_READ, "write": KIND_WRITE}


def pack_flags(kind, phase, branch, group, level):
    return (np.uint32(kind)
            | np.uint32(phase) << np.uint32(1)
            | np.uint32(branch) << np.uint32(2)
            | np.uint32(group) << np.uint32(3)
            | np.uint32(level) << np.uint32(8))


@dataclass
class AccessRecord:
    iteration: int
    phase: int
    branch: int
    level: int
    point_id: int
    group_id: int
    address: int
    kind: int


class TraceSink:
    """Collects access records in program order.

    Producers set the (iteration, phase, branch) context once per segment and
    then append either single records or whole vectorized batches. With a
    path, records stream to disk in chunks; otherwise they stay in memory.
    """

    def __init__(self, path=None, header: dict | None = None):
        self.header = dict(header or {})
        self._chunks = []
        self._closed = False
        self._fh = None
        self._header_written = False
        self._count = 0
        self._iteration = 0
        self._phase = PHASE_FORWARD
        self._branch = BRANCH_DENSITY
        if path is not None:
            self._fh = open(path, "wb")

    def _write_header(self):
        # Deferred to the first record so producers can fill self.header in.
        blob = json.dumps(self.header, sort_keys=True).encode()
        self._fh.write(TRACE_MAGIC)
        self._fh.write(struct.pack("<II", TRACE_VERSION, len(blob)))
        self._fh.write(blob)
        self._header_written = True

    def set_context(self, iteration: int | None = None, phase=None, branch=None):
        if iteration is not None:
            self._iteration = iteration
        if phase is not None:
            self._phase = _PHASE_NAMES.get(phase, phase)
        if branch is not None:
            self._branch = _BRANCH_NAMES.get(branch, branch)

    def _append(self, iteration, address, point_id, flags):
        if self._closed:
            raise ValueError("trace sink is closed")
        chunk = np.stack([
            np.asarray(iteration, dtype=np.uint32),
            np.asarray(address, dtype=np.uint32),
            np.asarray(point_id, dtype=np.uint32),
            np.asarray(flags, dtype=np.uint32),
        ], axis=1)
        self._count += chunk.shape[0]
        if self._fh is not None:
            if not self._header_written:
                self._write_header()
            self._fh.write(np.ascontiguousarray(chunk, dtype="<u4").tobytes())
        else:
            self._chunks.append(chunk)

    def record(self, rec: AccessRecord):
        flags = pack_flags(rec.kind, rec.phase, rec.branch, rec.group_id, rec.level)
        self._append([rec.iteration], [rec.address], [rec.point_id], [flags])

    def record_interp_reads(self, addresses: np.ndarray, point_ids=None):
        """Forward reads for a batch: addresses (n, levels, 8), point-major order."""
        n, levels, _ = addresses.shape
        if point_ids is None:
            point_ids = np.arange(n, dtype=np.uint32)
        flat_addr = addresses.reshape(-1)
        flat_pid = np.repeat(np.asarray(point_ids, dtype=np.uint32), levels * 8)
        level_pattern = np.repeat(np.arange(levels, dtype=np.uint32), 8)
        flat_level = np.tile(level_pattern, n)
        flat_group = np.tile(np.tile(CORNER_GROUPS, levels), n)
        flags = pack_flags(KIND_READ, self._phase, self._branch, flat_group, flat_level)
        it = np.full(flat_addr.shape, self._iteration, dtype=np.uint32)
        self._append(it, flat_addr, flat_pid, flags)

    def record_update_writes(self, level: int, addresses, point_ids, groups):
        """Backward write-intents for one level, in reduction (address) order."""
        flags = pack_flags(KIND_WRITE, self._phase, self._branch,
                           np.asarray(groups, dtype=np.uint32), level)
        it = np.full(len(addresses), self._iteration, dtype=np.uint32)
        self._append(it, addresses, point_ids, flags)

    def __len__(self):
        return self._count

    def close(self):
        self._closed = True
        if self._fh is not None:
            if not self._header_written:
                self._write_header()
            self._fh.close()
            self._fh = None
            return None
        return self.to_trace()

    def to_trace(self) -> "AccessTrace":
        if self._chunks:
            data = np.concatenate(self._chunks, axis=0)
        else:
            data = np.empty((0, 4), dtype=np.uint32)
        return AccessTrace(self.header, data[:, 0], data[:, 1], data[:, 2], data[:, 3])


@dataclass
class AccessTrace:
    """Columnar view of an ordered access-record stream."""

    header: dict
    iteration: np.ndarray
    address: np.ndarray
    point_id: np.ndarray
    flags: np.ndarray

    @property
    def kind(self):
        return self.flags & 1

    @property
    def phase(self):
        return (self.flags >> 1) & 1

    @property
    def branch(self):
        return (self.flags >> 2) & 1

    @property
    def group(self):
        return (self.flags >> 3) & 3

    @property
    def level(self):
        return (self.flags >> 8) & 0xFF

    def __len__(self):
        return len(self.flags)

    def record_at(self, i: int) -> AccessRecord:
        return AccessRecord(int(self.iteration[i]), int(self.phase[i]),
                            int(self.branch[i]), int(self.level[i]),
                            int(self.point_id[i]), int(self.group[i]),
                            int(self.address[i]), int(self.kind[i]))

    def filter(self, phase=None, branch=None, kind=None, level=None, iteration=None):
        mask = np.ones(len(self), dtype=bool)
        if phase is not None:
            mask &= self.phase == _PHASE_NAMES.get(phase, phase)
        if branch is not None:
            mask &= self.branch == _BRANCH_NAMES.get(branch, branch)
        if kind is not None:
            mask &= self.kind == _KIND_NAMES.get(kind, kind)
        if level is not None:
            mask &= self.level == level
        if iteration is not None:
            mask &= self.iteration == iteration
        return AccessTrace(self.header, self.iteration[mask], self.address[mask],
                           self.point_id[mask], self.flags[mask])

    def save(self, path):
        with open(path, "wb") as fh:
            blob = json.dumps(self.header, sort_keys=True).encode()
            fh.write(TRACE_MAGIC)
            fh.write(struct.pack("<II", TRACE_VERSION, len(blob)))
            fh.write(blob)
            data = np.stack([self.iteration, self.address, self.point_id, self.flags],
                            axis=1)
            fh.write(np.ascontiguousarray(data, dtype="<u4").tobytes())

    @classmethod
    def load(cls, path) -> "AccessTrace":
        with open(path, "rb") as fh:
            raw = fh.read()
        if raw[:4] != TRACE_MAGIC:
            raise TraceFormatError(f"bad trace magic {raw[:4]!r}")
        if len(raw) < 12:
            raise TraceFormatError("truncated trace header at offset 4")
        version, hlen = struct.unpack("<II", raw[4:12])
        if version != TRACE_VERSION:
            raise TraceFormatError(f"unsupported trace version {version}")
        if len(raw) < 12 + hlen:
            raise TraceFormatError(f"truncated trace header at offset {len(raw)}")
        header = json.loads(raw[12:12 + hlen].decode())
        body = raw[12 + hlen:]
        if len(body) % RECORD_BYTES:
            raise TraceFormatError(
                f"truncated record payload at offset {12 + hlen + len(body) - len(body) % RECORD_BYTES}")
        data = np.frombuffer(body, dtype="<u4").reshape(-1, 4).astype(np.uint32)
        return cls(header, data[:, 0], data[:, 1], data[:, 2], data[:, 3])


def record(sink: TraceSink, rec: AccessRecord):
    """Append a single record in program order."""
    sink.record(rec)


def _forward_read_groups(trace: AccessTrace):
    """Sort forward reads into (iteration, branch, level, point, group) runs.

    Returns the sorted addresses plus the group-run boundaries. Each run must
    hold exactly the two x-adjacent vertices of one group.
    """
    fwd = trace.filter(phase="forward", kind="read")
    if len(fwd) == 0:
        raise ValueError("trace has no forward reads")
    order = np.lexsort((np.arange(len(fwd)), fwd.group, fwd.point_id, fwd.level,
                        fwd.branch, fwd.iteration))
    keys = np.stack([fwd.iteration[order], fwd.branch[order], fwd.level[order],
                     fwd.point_id[order], fwd.group[order]], axis=1)
    boundary = np.any(np.diff(keys, axis=0) != 0, axis=1)
    starts = np.concatenate([[0], np.flatnonzero(boundary) + 1])
    lengths = np.diff(np.concatenate([starts, [len(fwd)]]))
    if np.any(lengths != 2):
        raise ValueError("malformed trace: a vertex-pair group does not have 2 members")
    return fwd.address[order], starts


def intra_group_distances(trace: AccessTrace):
    """Signed address deltas within each point's vertex-pair groups.

    Returns (deltas, fraction with |delta| <= 5). Deltas are measured on the
    post-modulo table addresses, second pair member minus first.
    """
    addrs, starts = _forward_read_groups(trace)
    a = addrs.astype(np.int64)
    deltas = a[starts + 1] - a[starts]
    frac = float(np.mean(np.abs(deltas) <= 5)) if len(deltas) else 0.0
    return deltas, frac


def inter_group_distances(trace: AccessTrace):
    """Pairwise |delta| between the four group representatives of each point.

    The representative is the group's first (x-bit 0) member. Returns
    (distances, mean, median).
    """
    addrs, starts = _forward_read_groups(trace)
    reps = addrs[starts].astype(np.int64).reshape(-1, 4)  # groups emitted 0..3 per point
    dists = []
    for i in range(4):
        for j in range(i + 1, 4):
            dists.append(np.abs(reps[:, i] - reps[:, j]))
    dists = np.concatenate(dists) if dists else np.empty(0, dtype=np.int64)
    if len(dists) == 0:
        return dists, 0.0, 0.0
    return dists, float(np.mean(dists)), float(np.median(dists))


def unique_window_series(trace: AccessTrace, window: int = 1000,
                         overlapping: bool = False) -> np.ndarray:
    """Distinct-address counts over contiguous windows of the access stream.

    Default stride equals the window (non-overlapping); overlapping mode
    slides one access at a time. Trailing partial windows are dropped.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    addrs = trace.address
    n = len(addrs)
    if n < window:
        return np.empty(0, dtype=np.int64)
    if not overlapping:
        n_win = n // window
        counts = np.empty(n_win, dtype=np.int64)
        for i in range(n_win):
            counts[i] = len(np.unique(addrs[i * window:(i + 1) * window]))
        return counts
    counts = np.empty(n - window + 1, dtype=np.int64)
    for i in range(n - window + 1):
        counts[i] = len(np.unique(addrs[i:i + window]))
    return counts
