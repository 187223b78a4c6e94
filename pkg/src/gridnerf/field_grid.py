"""Hash-grid embedding storage: spatial hashing, trilinear interpolation, gradients.

A 3D embedding grid is backed per level by a 1D table of ``table_size``
feature vectors. Vertex coordinates map to table indices through an
XOR-of-scaled-coordinates hash evaluated in 32-bit wraparound arithmetic.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DomainError

# Default hash multipliers (large primes; the x multiplier is 1 so that
# x-neighbours land on adjacent table slots).
PI1 = 1
PI2 = 2654435761
PI3 = 805459861

# Corner k of a lattice cube has offset bits (x, y, z) = (k&1, k>>1&1, k>>2&1),
# so corners (2g, 2g+1) form the x-adjacent pair of group g = y + 2z.
CORNER_OFFSETS = np.array(
    [[(k >> 0) & 1, (k >> 1) & 1, (k >> 2) & 1] for k in range(8)], dtype=np.int64
)
CORNER_GROUPS = (CORNER_OFFSETS[:, 1] + 2 * CORNER_OFFSETS[:, 2]).astype(np.uint32)

CHECKPOINT_MAGIC = b"I3DG"
CHECKPOINT_VERSION = 1


@dataclass
class HashConfig:
    """Geometry and hashing parameters for one embedding grid."""

    table_size: int
    features_per_entry: int = 2
    resolution: int = 16
    levels: int = 1
    growth_factor: float = 2.0
    pi1: int = PI1
    pi2: int = PI2
    pi3: int = PI3

    def __post_init__(self):
        if self.table_size <= 0 or self.table_size & (self.table_size - 1):
            raise ValueError(f"table_size must be a power of two, got {self.table_size}")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.resolution < 2:
            raise ValueError("resolution must be >= 2")
        if self.features_per_entry < 1:
            raise ValueError("features_per_entry must be >= 1")

    def level_resolution(self, level: int) -> int:
        return int(round(self.resolution * self.growth_factor**level))

    @property
    def embedding_dim(self) -> int:
        return self.levels * self.features_per_entry

    @property
    def total_entries(self) -> int:
        return self.levels * self.table_size

    def to_dict(self) -> dict:
        return {
            "table_size": self.table_size,
            "features_per_entry": self.features_per_entry,
            "resolution": self.resolution,
            "levels": self.levels,
            "growth_factor": self.growth_factor,
            "pi1": self.pi1,
            "pi2": self.pi2,
            "pi3": self.pi3,
        }


@dataclass
class EmbeddingTable:
    """Per-level dense arrays of hashed feature vectors."""

    config: HashConfig
    entries: np.ndarray  # (levels, table_size, features_per_entry)

    @classmethod
    def zeros(cls, config: HashConfig, dtype=np.float32) -> "EmbeddingTable":
        shape = (config.levels, config.table_size, config.features_per_entry)
        return cls(config, np.zeros(shape, dtype=dtype))

    @classmethod
    def random(cls, config: HashConfig, rng: np.random.Generator, scale: float = 1e-4,
               dtype=np.float32) -> "EmbeddingTable":
        shape = (config.levels, config.table_size, config.features_per_entry)
        return cls(config, rng.uniform(-scale, scale, size=shape).astype(dtype))

    def validate(self):
        expected = (self.config.levels, self.config.table_size, self.config.features_per_entry)
        if self.entries.shape != expected:
            raise ValueError(f"entries shape {self.entries.shape} != {expected}")
        if not np.all(np.isfinite(self.entries)):
            raise ValueError("table contains non-finite values")


@dataclass
class GridCube:
    """The eight lattice vertices enclosing one query point at one level."""

    vertex_coords: np.ndarray    # (8, 3) int
    vertex_addresses: np.ndarray  # (8,) uint32
    weights: np.ndarray          # (8,) in [0, 1], summing to 1


def hash_index(coords, config: HashConfig):
    """Map integer lattice coordinates (..., 3) to table indices.

    Multiplications wrap in 32-bit unsigned arithmetic; the power-of-two
    table size turns the modulo into a low-bit mask.
    """
    c = np.asarray(coords, dtype=np.uint32)
    scalar = c.ndim == 1
    c = np.atleast_2d(c)
    h = (c[..., 0] * np.uint32(config.pi1)
         ^ c[..., 1] * np.uint32(config.pi2)
         ^ c[..., 2] * np.uint32(config.pi3))
    h &= np.uint32(config.table_size - 1)
    return int(h[0]) if scalar else h


def _lattice(points: np.ndarray, resolution: int, check: bool = True):
    """Clamp points into the lattice and split into integer base + fraction."""
    if check and (np.any(points < 0.0) or np.any(points > 1.0)):
        raise DomainError("query points must lie in [0, 1]^3")
    scaled = points * points.dtype.type(resolution - 1)
    base = np.minimum(np.floor(scaled), resolution - 2).astype(np.int64)
    frac = scaled - base
    return base, frac


def _corner_weights(frac: np.ndarray) -> np.ndarray:
    """Trilinear weights (n, 8) from per-axis fractions (n, 3)."""
    w = np.ones((frac.shape[0], 8), dtype=frac.dtype)
    for axis in range(3):
        fa = frac[:, axis][:, None]
        bits = CORNER_OFFSETS[None, :, axis]
        w = w * np.where(bits == 1, fa, 1.0 - fa)
    return w


def cube_addresses(points: np.ndarray, level: int, config: HashConfig,
                   check: bool = True):
    """Vectorized cube lookup: corner coords (n,8,3), addresses (n,8), weights (n,8)."""
    points = np.atleast_2d(np.asarray(points))
    base, frac = _lattice(points, config.level_resolution(level), check=check)
    coords = base[:, None, :] + CORNER_OFFSETS[None, :, :]
    addrs = hash_index(coords.reshape(-1, 3), config).reshape(-1, 8)
    return coords, addrs, _corner_weights(frac)


def compute_cube_geometry(points: np.ndarray, config: HashConfig, check: bool = True):
    """Per-level (corner_coords (n,8,3), weights (n,8)), hash-independent.

    Branches sharing lattice geometry reuse this and only re-hash the corner
    coordinates into their own table sizes.
    """
    points = np.atleast_2d(np.asarray(points))
    geometry = []
    for level in range(config.levels):
        base, frac = _lattice(points, config.level_resolution(level), check=check)
        coords = base[:, None, :] + CORNER_OFFSETS[None, :, :]
        geometry.append((coords, _corner_weights(frac)))
    return geometry


def geometry_addresses(geometry, config: HashConfig):
    """Hash each level's corner coords into this table: list of (addrs, weights)."""
    return [(hash_index(coords.reshape(-1, 3), config).reshape(-1, 8), weights)
            for coords, weights in geometry]


def neighbor_cube(point, level: int, config: HashConfig) -> GridCube:
    """The enclosing lattice cube of one query point at one level."""
    coords, addrs, weights = cube_addresses(np.asarray(point, dtype=np.float64), level, config)
    return GridCube(coords[0], addrs[0], weights[0])


def interpolate(points, table: EmbeddingTable, sink=None, point_ids=None,
                check: bool = True, cubes=None) -> np.ndarray:
    """Trilinearly interpolate embeddings for points (n, 3) -> (n, levels*features).

    Per level the eight enclosing vertex embeddings are fetched and blended;
    with a trace sink attached, the eight reads per point per level are
    recorded in point-major order. Precomputed (addrs, weights) pairs from
    geometry_addresses can be passed through ``cubes``.
    """
    points = np.asarray(points)
    scalar = points.ndim == 1
    points = np.atleast_2d(points)
    cfg = table.config
    n = points.shape[0]
    if cubes is None:
        cubes = geometry_addresses(compute_cube_geometry(points, cfg, check=check), cfg)
    out = np.empty((n, cfg.embedding_dim),
                   dtype=np.result_type(table.entries.dtype, points.dtype))
    for level, (addrs, weights) in enumerate(cubes):
        fetched = table.entries[level][addrs]  # (n, 8, F)
        f = cfg.features_per_entry
        out[:, level * f:(level + 1) * f] = np.einsum("nk,nkf->nf", weights, fetched)
    if sink is not None:
        all_addrs = np.stack([addrs for addrs, _ in cubes], axis=1)  # (n, L, 8)
        sink.record_interp_reads(all_addrs.astype(np.uint32), point_ids=point_ids)
    return out[0] if scalar else out


def interpolate_backward(points, upstream_grad, table: EmbeddingTable, sink=None,
                         point_ids=None, check: bool = True, cubes=None):
    """Distribute an embedding gradient back to the touched table entries.

    Returns one ``(addresses, grads)`` pair per level holding the 8*n
    per-vertex contributions (weight times the level's slice of the upstream
    gradient). The per-address accumulation that consumes these is a bucket
    sum, so contribution order never changes the applied update. With a trace
    sink attached the contributions are address-sorted first: write-intents
    are emitted in the order the reduction drains its buckets.
    """
    points = np.asarray(points)
    scalar = points.ndim == 1
    points = np.atleast_2d(points)
    upstream = np.atleast_2d(np.asarray(upstream_grad))
    cfg = table.config
    n = points.shape[0]
    if upstream.shape != (n, cfg.embedding_dim):
        raise ValueError(
            f"upstream_grad shape {upstream.shape} != ({n}, {cfg.embedding_dim})")
    if point_ids is None:
        point_ids = np.arange(n, dtype=np.uint32)
    if cubes is None:
        cubes = geometry_addresses(compute_cube_geometry(points, cfg, check=check), cfg)
    per_level = []
    f = cfg.features_per_entry
    for level, (addrs, weights) in enumerate(cubes):
        g_level = upstream[:, level * f:(level + 1) * f]  # (n, F)
        contrib = weights[:, :, None] * g_level[:, None, :]  # (n, 8, F)
        flat_addr = addrs.reshape(-1)
        flat_grad = contrib.reshape(-1, f)
        if sink is not None:
            order = np.argsort(flat_addr, kind="stable")  # radix sort on uint32
            flat_addr, flat_grad = flat_addr[order], flat_grad[order]
            flat_pids = np.repeat(point_ids.astype(np.uint32), 8)
            flat_groups = np.tile(CORNER_GROUPS, n)
            sink.record_update_writes(level, flat_addr, flat_pids[order],
                                      flat_groups[order])
        per_level.append((flat_addr, flat_grad))
    if scalar:
        flat = []
        for level, (addrs, grads) in enumerate(per_level):
            for a, g in zip(addrs, grads):
                flat.append((level, int(a), g))
        return flat
    return per_level


def save_table(fh, table: EmbeddingTable):
    """Append one table section: magic, version u32, levels u32, T u32, features u32,
    then the raw float32 payload per level (little endian)."""
    cfg = table.config
    fh.write(CHECKPOINT_MAGIC)
    fh.write(struct.pack("<IIII", CHECKPOINT_VERSION, cfg.levels, cfg.table_size,
                         cfg.features_per_entry))
    for level in range(cfg.levels):
        fh.write(table.entries[level].astype("<f4").tobytes())


def load_table(fh, config_extra: dict | None = None) -> EmbeddingTable:
    """Read one table section written by save_table."""
    magic = fh.read(4)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"bad table magic {magic!r}")
    version, levels, table_size, features = struct.unpack("<IIII", fh.read(16))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    extra = config_extra or {}
    cfg = HashConfig(table_size=table_size, features_per_entry=features, levels=levels,
                     **extra)
    entries = np.empty((levels, table_size, features), dtype=np.float32)
    for level in range(levels):
        raw = fh.read(table_size * features * 4)
        entries[level] = np.frombuffer(raw, dtype="<f4").reshape(table_size, features)
    return EmbeddingTable(cfg, entries)
