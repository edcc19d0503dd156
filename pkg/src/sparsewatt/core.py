"""Row-block distributed CSR matrices, halo exchange, SpMV and vector reductions.

A rank owns a contiguous block of global rows. Its column indices are first
shifted by the first owned row (so they may go negative), then compacted into
zero-based 32-bit local indices through a sorted ``col_map`` that records the
global column of every local column. Vector entries that live on other ranks
are kept in a ``halo`` array ordered like the non-owned part of ``col_map``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.io
import scipy.sparse as sp

from .errors import CapacityError, ContractError, DomainError, PartitionError, ProtocolError

MAX_LOCAL_INDEX = 2**32 - 1
HALO_TAG = 11


def shift_columns(cols, first_global_row: int) -> np.ndarray:
    """Signed column offsets relative to the first owned row (may be negative)."""
    return np.asarray(cols, dtype=np.int64) - np.int64(first_global_row)


@dataclass
class LocalCsrBlock:
    first_global_row: int
    n_local_rows: int
    n_global: int
    row_offsets: np.ndarray
    col_local: np.ndarray
    values: np.ndarray
    col_map: np.ndarray

    owned_mask: np.ndarray = field(init=False, repr=False)
    halo_globals: np.ndarray = field(init=False, repr=False)
    ext_csr: sp.csr_matrix = field(init=False, repr=False)
    interior_rows: np.ndarray = field(init=False, repr=False)
    boundary_rows: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        lo, hi = self.first_global_row, self.first_global_row + self.n_local_rows
        self.owned_mask = (self.col_map >= lo) & (self.col_map < hi)
        self.halo_globals = self.col_map[~self.owned_mask]
        # Local column -> slot in the extended vector [owned | halo].
        ext = np.empty(len(self.col_map), dtype=np.int64)
        ext[self.owned_mask] = self.col_map[self.owned_mask] - lo
        ext[~self.owned_mask] = self.n_local_rows + np.arange(len(self.halo_globals))
        cols = ext[self.col_local.astype(np.int64)] if len(self.col_local) else ext[:0]
        self.ext_csr = sp.csr_matrix(
            (self.values, cols, self.row_offsets),
            shape=(self.n_local_rows, self.n_local_rows + len(self.halo_globals)),
        )
        touches_halo = np.zeros(self.n_local_rows, dtype=bool)
        if len(cols):
            rows = np.repeat(np.arange(self.n_local_rows), np.diff(self.row_offsets))
            np.logical_or.at(touches_halo, rows, cols >= self.n_local_rows)
        self.interior_rows = np.flatnonzero(~touches_halo)
        self.boundary_rows = np.flatnonzero(touches_halo)

    @property
    def nnz(self) -> int:
        return int(self.row_offsets[-1])

    @property
    def n_halo(self) -> int:
        return len(self.halo_globals)

    @property
    def row_range(self) -> tuple[int, int]:
        return self.first_global_row, self.first_global_row + self.n_local_rows

    def validate(self) -> None:
        ro = self.row_offsets
        if len(ro) != self.n_local_rows + 1 or ro[0] != 0 or ro[-1] != len(self.col_local):
            raise ContractError("row_offsets inconsistent with nnz")
        if np.any(np.diff(ro) < 0):
            raise ContractError("row_offsets must be non-decreasing")
        if len(self.col_map) > 1 and np.any(np.diff(self.col_map) <= 0):
            raise ContractError("col_map must be strictly increasing")
        if len(self.col_local) and int(self.col_local.max()) >= len(self.col_map):
            raise ContractError("col_local index outside col_map")
        if len(self.col_map) > MAX_LOCAL_INDEX:
            raise CapacityError("too many distinct local columns")

    def global_entries(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Expand back to global (row, col, value) triples through ``col_map``."""
        rows = self.first_global_row + np.repeat(
            np.arange(self.n_local_rows, dtype=np.int64), np.diff(self.row_offsets)
        )
        cols = self.col_map[self.col_local.astype(np.int64)]
        return rows, cols, self.values.copy()

    def diagonal(self) -> np.ndarray:
        d = np.zeros(self.n_local_rows)
        rows, cols, vals = self.global_entries()
        hit = rows == cols
        d[rows[hit] - self.first_global_row] = vals[hit]
        return d

    def l1_row_sums(self) -> np.ndarray:
        """``a_ii + sum_{j != i} |a_ij|`` for each owned row."""
        rows, cols, vals = self.global_entries()
        contrib = np.where(rows == cols, vals, np.abs(vals))
        return np.bincount(rows - self.first_global_row, weights=contrib, minlength=self.n_local_rows)

    def to_scipy(self) -> sp.csr_matrix:
        rows, cols, vals = self.global_entries()
        return sp.csr_matrix(
            (vals, (rows - self.first_global_row, cols)), shape=(self.n_local_rows, self.n_global)
        )


def _as_arrays(entries):
    if isinstance(entries, tuple) and len(entries) == 3 and all(
        isinstance(a, np.ndarray) for a in entries
    ):
        rows, cols, vals = entries
    else:
        triples = list(entries)
        if triples:
            rows, cols, vals = (np.array(a) for a in zip(*triples))
        else:
            rows = cols = np.zeros(0, dtype=np.int64)
            vals = np.zeros(0)
    return (
        np.asarray(rows, dtype=np.int64),
        np.asarray(cols, dtype=np.int64),
        np.asarray(vals, dtype=np.float64),
    )


def build_local_block(row_range, entries, n_global: int, capacity: int = MAX_LOCAL_INDEX) -> LocalCsrBlock:
    """Build one rank's CSR block from global ``(row, col, value)`` entries.

    ``entries`` is either an iterable of triples or a tuple of three arrays.
    Entries need not be sorted; duplicates are rejected.
    """
    first, stop = int(row_range[0]), int(row_range[1])
    if not 0 <= first <= stop <= n_global:
        raise DomainError(f"row range [{first}, {stop}) outside [0, {n_global})")
    rows, cols, vals = _as_arrays(entries)
    if len(rows) and (rows.min() < first or rows.max() >= stop):
        raise DomainError(f"entry row outside owned range [{first}, {stop})")
    if len(cols) and (cols.min() < 0 or cols.max() >= n_global):
        raise DomainError(f"entry column outside [0, {n_global})")

    order = np.lexsort((cols, rows))
    rows, cols, vals = rows[order], cols[order], vals[order]
    if len(rows) > 1:
        dup = (np.diff(rows) == 0) & (np.diff(cols) == 0)
        if dup.any():
            i = int(np.flatnonzero(dup)[0])
            raise DomainError(f"duplicate entry ({rows[i]}, {cols[i]})")

    shifted = shift_columns(cols, first)
    distinct = np.unique(shifted)
    if len(distinct) > capacity:
        raise CapacityError(
            f"{len(distinct)} distinct columns exceed the local index capacity {capacity}"
        )
    col_local = np.searchsorted(distinct, shifted).astype(np.uint32)
    col_map = distinct + np.int64(first)
    n_local = stop - first
    counts = np.bincount(rows - first, minlength=n_local) if n_local else np.zeros(0, np.int64)
    row_offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return LocalCsrBlock(first, n_local, int(n_global), row_offsets, col_local, vals, col_map)


# ---------------------------------------------------------------------------
# Partitions


def validate_partition(row_ranges, n_global: int | None = None) -> int:
    """Check that ranges are contiguous from 0 in rank order; return n_global."""
    expect = 0
    for rank, (lo, hi) in enumerate(row_ranges):
        if lo != expect or hi < lo:
            raise PartitionError(f"rank {rank} range [{lo}, {hi}) breaks contiguity at {expect}")
        expect = hi
    if n_global is not None and expect != n_global:
        raise PartitionError(f"ranges cover [0, {expect}) but n_global = {n_global}")
    return expect


def uniform_row_ranges(n_global: int, size: int) -> list[tuple[int, int]]:
    """Split ``n_global`` rows into ``size`` blocks; low ranks take the remainder."""
    base, extra = divmod(n_global, size)
    out, lo = [], 0
    for r in range(size):
        hi = lo + base + (1 if r < extra else 0)
        out.append((lo, hi))
        lo = hi
    return out


def write_partition(path, row_ranges) -> None:
    desc = [{"rank": r, "first_row": int(lo), "n_rows": int(hi - lo)} for r, (lo, hi) in enumerate(row_ranges)]
    Path(path).write_text(json.dumps(desc, indent=2) + "\n")


def read_partition(path) -> list[tuple[int, int]]:
    desc = sorted(json.loads(Path(path).read_text()), key=lambda d: d["rank"])
    ranges = [(d["first_row"], d["first_row"] + d["n_rows"]) for d in desc]
    validate_partition(ranges)
    return ranges


def distribute_matrix(A, row_ranges) -> list[LocalCsrBlock]:
    """Cut a global sparse matrix into per-rank blocks."""
    A = sp.csr_matrix(A)
    n = A.shape[0]
    validate_partition(row_ranges, n)
    coo = A.tocoo()
    rows, cols, vals = coo.row.astype(np.int64), coo.col.astype(np.int64), coo.data
    blocks = []
    for lo, hi in row_ranges:
        sel = (rows >= lo) & (rows < hi)
        blocks.append(build_local_block((lo, hi), (rows[sel], cols[sel], vals[sel]), A.shape[1]))
    return blocks


def reassemble(blocks) -> sp.csr_matrix:
    """Inverse of :func:`distribute_matrix`; the exact global entry set."""
    parts = [b.global_entries() for b in blocks]
    rows = np.concatenate([p[0] for p in parts])
    cols = np.concatenate([p[1] for p in parts])
    vals = np.concatenate([p[2] for p in parts])
    n = blocks[-1].n_global
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def read_matrix_market(path) -> sp.csr_matrix:
    return sp.csr_matrix(scipy.io.mmread(str(path)))


def write_matrix_market(path, A, symmetric: bool = False) -> None:
    scipy.io.mmwrite(str(path), sp.coo_matrix(A), symmetry="symmetric" if symmetric else "general")


# ---------------------------------------------------------------------------
# Communication plan


@dataclass
class CommPlan:
    rank: int
    halo_globals: np.ndarray
    sends: dict = field(default_factory=dict)  # neighbor -> owned local rows to send
    recvs: dict = field(default_factory=dict)  # neighbor -> halo slots to fill

    @property
    def neighbors(self) -> list[int]:
        return sorted(set(self.sends) | set(self.recvs))

    @property
    def halo_size(self) -> int:
        return len(self.halo_globals)


def build_comm_plan(col_maps, row_ranges) -> list[CommPlan]:
    """Per-rank send/receive schedules from every rank's col_map and row range."""
    validate_partition(row_ranges)
    starts = np.array([lo for lo, _ in row_ranges], dtype=np.int64)
    stop = row_ranges[-1][1]
    plans = []
    for rank, (cmap, (lo, hi)) in enumerate(zip(col_maps, row_ranges)):
        cmap = np.asarray(cmap, dtype=np.int64)
        halo = cmap[(cmap < lo) | (cmap >= hi)]
        if len(halo) and (halo.min() < 0 or halo.max() >= stop):
            bad = halo[(halo < 0) | (halo >= stop)][0]
            raise PartitionError(f"rank {rank}: column {bad} has no owning rank")
        plans.append(CommPlan(rank, halo))
    for a, plan in enumerate(plans):
        owners = np.searchsorted(starts, plan.halo_globals, side="right") - 1
        for r in np.unique(owners):
            r = int(r)
            slots = np.flatnonzero(owners == r)
            plan.recvs[r] = slots.astype(np.uint32)
            plans[r].sends[a] = (plan.halo_globals[slots] - row_ranges[r][0]).astype(np.uint32)
    validate_plans(plans, row_ranges)
    return plans


def validate_plans(plans, row_ranges) -> None:
    """Symmetric consistency: a sends g to b iff b expects g from a; halos covered once."""
    for b, plan in enumerate(plans):
        covered = np.zeros(plan.halo_size, dtype=np.int64)
        for a, slots in plan.recvs.items():
            sends = plans[a].sends.get(b)
            if sends is None or len(sends) != len(slots):
                raise PartitionError(f"plan asymmetry between ranks {a} and {b}")
            if len(np.unique(slots)) != len(slots) or len(np.unique(sends)) != len(sends):
                raise PartitionError(f"duplicate entries in plan {a}->{b}")
            sent_globals = sends.astype(np.int64) + row_ranges[a][0]
            if not np.array_equal(sent_globals, plan.halo_globals[slots.astype(np.int64)]):
                raise PartitionError(f"plan {a}->{b} sends the wrong rows")
            covered[slots.astype(np.int64)] += 1
        if np.any(covered != 1):
            raise PartitionError(f"rank {b}: halo not covered exactly once")
        for dest in plan.sends:
            if b not in plans[dest].recvs:
                raise PartitionError(f"rank {b} sends to {dest}, which expects nothing")


def build_comm_plan_collective(comm, block: LocalCsrBlock) -> CommPlan:
    """Every rank contributes its col_map and row range; returns this rank's plan."""
    info = comm.allgather((block.row_range, block.col_map))
    plans = build_comm_plan([c for _, c in info], [r for r, _ in info])
    return plans[comm.rank]


# ---------------------------------------------------------------------------
# Distributed vectors


class DistVector:
    """Owned segment plus halo copy of remote entries.

    ``owned`` is exposed read-only; mutate through :meth:`assign`, :func:`axpy`
    or :func:`aypx` so that the halo is marked stale.
    """

    __slots__ = ("_owned", "halo", "_fresh")

    def __init__(self, owned, n_halo: int = 0):
        self._owned = np.array(owned, dtype=np.float64)
        self._owned.flags.writeable = False
        self.halo = np.zeros(n_halo)
        self._fresh = False

    @classmethod
    def zeros(cls, block: LocalCsrBlock) -> "DistVector":
        return cls(np.zeros(block.n_local_rows), block.n_halo)

    @classmethod
    def from_global(cls, block: LocalCsrBlock, x_global) -> "DistVector":
        lo, hi = block.row_range
        return cls(np.asarray(x_global, dtype=np.float64)[lo:hi], block.n_halo)

    @property
    def owned(self) -> np.ndarray:
        return self._owned

    @property
    def halo_valid(self) -> bool:
        return self._fresh or len(self.halo) == 0

    def __len__(self) -> int:
        return len(self._owned)

    def assign(self, values) -> "DistVector":
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self._owned.shape:
            raise DomainError(f"length {values.shape} != {self._owned.shape}")
        self._owned.flags.writeable = True
        self._owned[...] = values
        self._owned.flags.writeable = False
        self._fresh = False
        return self

    def copy(self) -> "DistVector":
        out = DistVector(self._owned, len(self.halo))
        out.halo[...] = self.halo
        out._fresh = self._fresh
        return out

    def extended(self) -> np.ndarray:
        return np.concatenate([self._owned, self.halo])


def _check_same(x: DistVector, y: DistVector) -> None:
    if len(x) != len(y):
        raise DomainError(f"vector length mismatch: {len(x)} vs {len(y)}")


def begin_halo_exchange(comm, plan: CommPlan, x: DistVector) -> None:
    for dest, rows in plan.sends.items():
        comm.send(dest, x.owned[rows.astype(np.int64)].copy(), HALO_TAG)


def finish_halo_exchange(comm, plan: CommPlan, x: DistVector) -> DistVector:
    if len(x.halo) != plan.halo_size:
        raise ProtocolError(f"halo length {len(x.halo)} != plan halo size {plan.halo_size}")
    for src, slots in plan.recvs.items():
        data = comm.recv(src, HALO_TAG)
        if len(data) != len(slots):
            raise ProtocolError(f"rank {plan.rank}: got {len(data)} values from {src}, expected {len(slots)}")
        x.halo[slots.astype(np.int64)] = data
    x._fresh = True
    return x


def halo_exchange(comm, plan: CommPlan, x: DistVector) -> DistVector:
    """Fill ``x.halo`` with the owners' current values."""
    begin_halo_exchange(comm, plan, x)
    return finish_halo_exchange(comm, plan, x)


def spmv(A: LocalCsrBlock, x: DistVector) -> np.ndarray:
    """Owned segment of ``A @ x``; requires a fresh halo."""
    if len(x) != A.n_local_rows or len(x.halo) != A.n_halo:
        raise DomainError("vector does not conform to the matrix block")
    if not x.halo_valid:
        raise ContractError("spmv called with a stale halo; run halo_exchange first")
    return A.ext_csr @ x.extended()


def spmv_overlapped(comm, plan: CommPlan, A: LocalCsrBlock, x: DistVector) -> np.ndarray:
    """Halo exchange overlapped with interior rows; same result as exchange + spmv."""
    begin_halo_exchange(comm, plan, x)
    out = np.empty(A.n_local_rows)
    ext = np.concatenate([x.owned, np.zeros(A.n_halo)])
    out[A.interior_rows] = A.ext_csr[A.interior_rows] @ ext
    finish_halo_exchange(comm, plan, x)
    out[A.boundary_rows] = A.ext_csr[A.boundary_rows] @ x.extended()
    return out


# ---------------------------------------------------------------------------
# Vector kernels


def dots(comm, pairs) -> np.ndarray:
    """Several inner products fused into a single global reduction."""
    parts = []
    for x, y in pairs:
        _check_same(x, y)
        parts.append(np.dot(x.owned, y.owned))
    return comm.allreduce(np.array(parts))


def dot(comm, x: DistVector, y: DistVector) -> float:
    return float(dots(comm, [(x, y)])[0])


def norm2(comm, x: DistVector) -> float:
    return float(np.sqrt(dots(comm, [(x, x)])[0]))


def axpy(alpha: float, x: DistVector, y: DistVector) -> DistVector:
    """``y <- y + alpha * x``; no communication."""
    _check_same(x, y)
    return y.assign(y.owned + alpha * x.owned)


def aypx(beta: float, x: DistVector, y: DistVector) -> DistVector:
    """``y <- x + beta * y``; no communication."""
    _check_same(x, y)
    return y.assign(x.owned + beta * y.owned)


def gather_global(comm, x: DistVector) -> np.ndarray:
    """Full vector on every rank (collective)."""
    return np.concatenate(comm.allgather(np.array(x.owned)))
