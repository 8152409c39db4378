"""FIFO memory bank of per-frame spatial maps and pointer tokens, augmented
with a never-evicted prototype slot whose key/value row is scaled by a fixed
gain before cross-attention.

Banks are immutable values: ``push_frame`` returns a new bank, so streaming
state can be checkpointed and replayed bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .ema import EmaPrototype
from .linalg import ShapeError, as_mat, as_vec


@dataclass(frozen=True)
class SpatialMemory:
    """Flattened grid of memory tokens plus their integer grid coordinates."""
    tokens: np.ndarray                 # (rows*cols, d)
    grid_shape: tuple[int, int]
    pos_grid: tuple[tuple[int, int], ...]
    occluded: bool = False

    def __post_init__(self):
        rows, cols = self.grid_shape
        as_mat(self.tokens, rows=rows * cols)
        if len(self.pos_grid) != rows * cols:
            raise ShapeError("pos_grid length must match token count")
        for r, c in self.pos_grid:
            if not (0 <= r < rows and 0 <= c < cols):
                raise ShapeError(f"grid position ({r},{c}) outside {self.grid_shape}")


@dataclass(frozen=True)
class PointerEntry:
    """Compact per-frame object summary token."""
    token: np.ndarray
    frame_index: int
    occluded: bool = False

    def __post_init__(self):
        as_vec(self.token)


def grid_positions(rows: int, cols: int) -> tuple[tuple[int, int], ...]:
    """Row-major (row, col) coordinates of a rows x cols grid."""
    return tuple((r, c) for r in range(rows) for c in range(cols))


@dataclass(frozen=True)
class MemoryBank:
    """Recent-frame queues plus the persistent gain-weighted prototype slot."""
    dim: int
    capacity: int
    gain: float
    occlusion_embedding: np.ndarray
    prototype: EmaPrototype
    spatial: tuple[SpatialMemory, ...] = ()
    pointers: tuple[PointerEntry, ...] = ()

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("capacity must be >= 1")
        # > 1 is the intended operating regime; 1.0 is allowed so gain sweeps
        # can include the no-amplification point.
        if self.gain < 1.0:
            raise ValueError("prototype gain must be >= 1")
        as_vec(self.occlusion_embedding, self.dim)
        if len(self.spatial) > self.capacity or len(self.pointers) > self.capacity:
            raise ValueError("queue exceeds capacity")

    def __len__(self) -> int:
        return len(self.spatial)

    def with_prototype(self, prototype: EmaPrototype) -> "MemoryBank":
        return replace(self, prototype=prototype)


def new_bank(dim: int, capacity: int, gain: float,
             occlusion_embedding: np.ndarray) -> MemoryBank:
    return MemoryBank(
        dim=dim,
        capacity=capacity,
        gain=gain,
        occlusion_embedding=occlusion_embedding,
        prototype=EmaPrototype(dim=dim),
    )


def push_frame(bank: MemoryBank, s: SpatialMemory, p: PointerEntry,
               c: float, tau: float) -> MemoryBank:
    """Append a frame's memories, tagging them when confidence falls below tau.

    Tagged entries get ``occluded=True`` and the bank's occlusion embedding
    added to every token, so later attention can discount them. The oldest
    entries are dropped once the queues exceed capacity; the prototype slot is
    untouched.
    """
    if s.tokens.shape[1] != bank.dim or p.token.size != bank.dim:
        raise ShapeError("entry dimension does not match bank dimension")
    if c < tau:
        s = replace(s, tokens=s.tokens + bank.occlusion_embedding, occluded=True)
        p = replace(p, token=p.token + bank.occlusion_embedding, occluded=True)
    spatial = (bank.spatial + (s,))[-bank.capacity:]
    pointers = (bank.pointers + (p,))[-bank.capacity:]
    return replace(bank, spatial=spatial, pointers=pointers)


@dataclass(frozen=True)
class KvBundle:
    """Assembled cross-attention source: keys == values row for row; spatial
    rows carry grid positions (rotary-eligible), pointer/prototype rows do not.
    The final row, when present, is the prototype scaled by the bank gain."""
    keys: np.ndarray
    values: np.ndarray
    positions: tuple[tuple[int, int] | None, ...]
    prototype_row: int | None

    @property
    def n_rows(self) -> int:
        return self.keys.shape[0]


def assemble_kv(bank: MemoryBank, include_prototype: bool = True) -> KvBundle:
    """Stack [spatial tokens; pointer tokens; gain * prototype] as keys/values."""
    rows: list[np.ndarray] = []
    positions: list[tuple[int, int] | None] = []
    for mem in bank.spatial:
        rows.append(mem.tokens)
        positions.extend(mem.pos_grid)
    for entry in bank.pointers:
        rows.append(entry.token[None, :])
        positions.append(None)
    proto_row = None
    if include_prototype and bank.prototype.initialized:
        rows.append(bank.gain * bank.prototype.unit_vector()[None, :])
        positions.append(None)
        proto_row = sum(r.shape[0] for r in rows) - 1
    if not rows:
        empty = np.zeros((0, bank.dim))
        return KvBundle(empty, empty, (), None)
    keys = np.vstack(rows)
    return KvBundle(keys, keys.copy(), tuple(positions), proto_row)


# ---------------------------------------------------------------------------
# Analytic FLOP accounting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BankShape:
    memories: int
    tokens_per_memory: int
    pointers: int

    @property
    def kv_rows(self) -> int:
        return self.memories * self.tokens_per_memory + self.pointers


@dataclass(frozen=True)
class ModelShape:
    dim: int
    layers: int
    n_queries: int
    mlp_hidden: int


@dataclass(frozen=True)
class FlopReport:
    """Multiply-add FLOP counts for one frame of memory attention.

    Counting convention: each scalar multiply or add is one FLOP, so a
    length-d dot product costs 2d and a d_in -> d_out matvec costs
    2 * d_in * d_out. Softmax exponentials and ReLUs are not multiply-adds
    and are excluded. The prototype adds one key/value row per layer (score
    dot plus value accumulation) and one blend-and-normalize update.
    """
    without_prototype: int
    with_prototype: int
    ema_cost: int
    per_layer_row_cost: int

    @property
    def delta(self) -> int:
        return self.with_prototype - self.without_prototype

    @property
    def relative_overhead(self) -> float:
        return self.delta / self.without_prototype


def flop_estimate(bank_shape: BankShape, model_shape: ModelShape,
                  prototype_enabled: bool = True) -> FlopReport:
    d = model_shape.dim
    nq = model_shape.n_queries
    h = model_shape.mlp_hidden
    lyr = model_shape.layers
    if min(d, nq, h, lyr) <= 0:
        raise ValueError("model shape entries must be positive")

    def layer_cost(n_memory_rows: int) -> int:
        self_attn = 4 * nq * 2 * d * d + 2 * (2 * d * nq * nq)
        if n_memory_rows > 0:
            cross = 2 * nq * 2 * d * d + 2 * (2 * d * nq * n_memory_rows)
        else:
            cross = 0
        mlp = nq * 4 * d * h
        norms = 3 * nq * 8 * d
        return self_attn + cross + mlp + norms

    pos_codes = nq * d
    base_rows = bank_shape.kv_rows
    without = pos_codes + lyr * layer_cost(base_rows)
    ema_cost = 6 * d + 1            # 2d mults + d adds + normalize (3d + 1)
    if prototype_enabled:
        with_proto = pos_codes + lyr * layer_cost(base_rows + 1) + ema_cost
    else:
        with_proto = without
        ema_cost = 0
    return FlopReport(
        without_prototype=without,
        with_prototype=with_proto,
        ema_cost=ema_cost,
        per_layer_row_cost=4 * d * nq,
    )
