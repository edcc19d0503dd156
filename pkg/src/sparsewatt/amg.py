"""Aggregation AMG: greedy matching, piecewise-constant prolongation, V-cycle.

Each matching pass pairs vertices of the current (already aggregated) graph
greedily by descending edge weight ``|a_ij| / sqrt(a_ii a_jj)``, ties broken by
the smaller ``(i, j)``. Three passes give aggregates of at most 8 fine DOFs.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .core import DistVector, axpy, gather_global
from .errors import ContractError, DomainError


@dataclass
class AggregateMap:
    fine_to_coarse: np.ndarray
    n_coarse: int

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.fine_to_coarse, minlength=self.n_coarse)

    def validate(self) -> None:
        f2c = self.fine_to_coarse
        if len(f2c) and (f2c.min() < 0 or f2c.max() >= self.n_coarse):
            raise DomainError("aggregate id outside [0, n_coarse)")
        if np.any(self.sizes == 0):
            raise DomainError("aggregate ids are not dense")


@dataclass
class AmgConfig:
    aggregate_passes: int = 3
    max_levels: int = 10
    min_coarse_size: int = 64
    smoother_sweeps: int = 4
    # "pre_post": smoother_sweeps before and after the coarse correction;
    # "total": smoother_sweeps split evenly between the two.
    sweep_split: str = "pre_post"

    def __post_init__(self):
        if self.aggregate_passes < 1 or self.max_levels < 1 or self.min_coarse_size < 1:
            raise DomainError("AMG config values must be >= 1")
        if self.smoother_sweeps < 1:
            raise DomainError("smoother_sweeps must be >= 1")
        if self.sweep_split not in ("pre_post", "total"):
            raise DomainError(f"unknown sweep_split {self.sweep_split!r}")
        if self.sweep_split == "total" and self.smoother_sweeps % 2:
            raise DomainError("sweep_split='total' needs an even sweep count to stay symmetric")

    @property
    def sweeps_per_phase(self) -> int:
        if self.sweep_split == "total":
            return self.smoother_sweeps // 2
        return self.smoother_sweeps


def _positive_diagonal(A) -> np.ndarray:
    d = A.diagonal()
    if np.any(d <= 0):
        raise DomainError("matrix needs a strictly positive diagonal")
    return d


def greedy_matching(A) -> np.ndarray:
    """``mate[i]`` is the matched partner of ``i`` or ``-1``."""
    A = sp.csr_matrix(A)
    d = _positive_diagonal(A)
    up = sp.triu(A, k=1).tocoo()
    keep = up.data != 0
    i, j, a = up.row[keep], up.col[keep], up.data[keep]
    w = np.abs(a) / np.sqrt(d[i] * d[j])
    order = np.lexsort((j, i, -w))
    mate = np.full(A.shape[0], -1, dtype=np.int64)
    for u, v in zip(i[order].tolist(), j[order].tolist()):
        if mate[u] < 0 and mate[v] < 0:
            mate[u] = v
            mate[v] = u
    return mate


def _pairs_to_map(mate: np.ndarray) -> AggregateMap:
    n = len(mate)
    f2c = np.full(n, -1, dtype=np.int64)
    nc = 0
    for v in range(n):
        if f2c[v] >= 0:
            continue
        f2c[v] = nc
        if mate[v] >= 0:
            f2c[mate[v]] = nc
        nc += 1
    return AggregateMap(f2c, nc)


def match_and_aggregate(A, passes: int = 3) -> AggregateMap:
    """Aggregates of up to ``2**passes`` DOFs by repeated pairwise matching."""
    A = sp.csr_matrix(A)
    _positive_diagonal(A)
    f2c = np.arange(A.shape[0], dtype=np.int64)
    n_coarse = A.shape[0]
    current = A
    for _ in range(passes):
        step = _pairs_to_map(greedy_matching(current))
        f2c = step.fine_to_coarse[f2c]
        n_coarse = step.n_coarse
        if step.n_coarse == current.shape[0]:
            break
        current = galerkin_product(current, build_prolongator(step))
    return AggregateMap(f2c, n_coarse)


def build_prolongator(agg: AggregateMap) -> sp.csr_matrix:
    agg.validate()
    n = len(agg.fine_to_coarse)
    return sp.csr_matrix(
        (np.ones(n), agg.fine_to_coarse, np.arange(n + 1)), shape=(n, agg.n_coarse)
    )


def galerkin_product(A, P) -> sp.csr_matrix:
    """Coarse operator ``P^T A P`` as a sparse triple product."""
    if A.shape[0] != A.shape[1] or A.shape[1] != P.shape[0]:
        raise DomainError(f"cannot form P^T A P with A {A.shape} and P {P.shape}")
    Ac = sp.csr_matrix(P.T @ (sp.csr_matrix(A) @ P))
    Ac.sum_duplicates()
    Ac.sort_indices()
    return Ac


def l1_diagonal(A) -> np.ndarray:
    """``a_ii + sum_{j != i} |a_ij|`` for each row."""
    A = sp.csr_matrix(A)
    d = A.diagonal()
    return d + np.asarray(abs(A).sum(axis=1)).ravel() - np.abs(d)


def l1_jacobi(A, d_l1, x, b, sweeps: int) -> np.ndarray:
    """``sweeps`` iterations of ``x <- x + D_l1^{-1} (b - A x)``; returns a new array."""
    if sweeps < 1:
        raise DomainError("sweeps must be >= 1")
    if np.any(np.asarray(d_l1) <= 0):
        raise DomainError("l1 diagonal must be positive")
    x = np.array(x, dtype=np.float64)
    for _ in range(sweeps):
        x += (b - A @ x) / d_l1
    return x


@dataclass
class AmgLevel:
    A: sp.csr_matrix
    P: sp.csr_matrix | None
    d_l1: np.ndarray


@dataclass
class AmgHierarchy:
    levels: list
    coarsest_solver: tuple
    config: AmgConfig = field(default_factory=AmgConfig)
    setup_time: float = 0.0

    @property
    def sizes(self) -> list[int]:
        return [lvl.A.shape[0] for lvl in self.levels]

    def operator_complexity(self) -> float:
        nnz = [lvl.A.nnz for lvl in self.levels]
        return sum(nnz) / nnz[0]


def build_hierarchy(A, config: AmgConfig | None = None) -> AmgHierarchy:
    config = config or AmgConfig()
    t0 = time.perf_counter()
    A = sp.csr_matrix(A, dtype=np.float64)
    levels = []
    while True:
        n = A.shape[0]
        d_l1 = l1_diagonal(A)
        if n <= config.min_coarse_size or len(levels) + 1 >= config.max_levels:
            levels.append(AmgLevel(A, None, d_l1))
            break
        agg = match_and_aggregate(A, config.aggregate_passes)
        if agg.n_coarse == n:
            levels.append(AmgLevel(A, None, d_l1))
            break
        P = build_prolongator(agg)
        levels.append(AmgLevel(A, P, d_l1))
        A = galerkin_product(A, P)
    coarse = scipy.linalg.cho_factor(levels[-1].A.toarray())
    return AmgHierarchy(levels, coarse, config, time.perf_counter() - t0)


def _cycle(h: AmgHierarchy, level: int, b: np.ndarray) -> np.ndarray:
    lvl = h.levels[level]
    if lvl.P is None:
        return scipy.linalg.cho_solve(h.coarsest_solver, b)
    m = h.config.sweeps_per_phase
    x = l1_jacobi(lvl.A, lvl.d_l1, np.zeros_like(b), b, m)
    xc = _cycle(h, level + 1, lvl.P.T @ (b - lvl.A @ x))
    x += lvl.P @ xc
    return l1_jacobi(lvl.A, lvl.d_l1, x, b, m)


def vcycle(h: AmgHierarchy, r) -> np.ndarray:
    """One V-cycle applied to ``r`` with zero initial guess."""
    if h is None or not h.levels:
        raise ContractError("empty AMG hierarchy")
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (h.levels[0].A.shape[0],):
        raise DomainError("residual does not conform to the finest level")
    return _cycle(h, 0, r)


class AmgPreconditioner:
    """Serial V-cycle preconditioner for a single-rank operator."""

    def __init__(self, hierarchy: AmgHierarchy):
        self.hierarchy = hierarchy
        self.setup_time = hierarchy.setup_time

    def apply(self, r: DistVector) -> DistVector:
        return DistVector(vcycle(self.hierarchy, r.owned), len(r.halo))


class DistributedAmgPreconditioner:
    """V-cycle whose finest level runs distributed; coarse levels are replicated.

    Finest-level smoothing uses the distributed SpMV of ``op``. The fine
    residual is gathered once per cycle so every rank restricts it, runs the
    coarse levels, and prolongates its own rows identically.
    """

    def __init__(self, op, hierarchy: AmgHierarchy):
        self.op = op
        self.hierarchy = hierarchy
        self.setup_time = hierarchy.setup_time
        lo, hi = op.block.row_range
        fine = hierarchy.levels[0]
        if fine.A.shape[0] != op.block.n_global:
            raise DomainError("hierarchy does not match the distributed operator")
        self._d_l1 = fine.d_l1[lo:hi]
        self._P = fine.P[lo:hi] if fine.P is not None else None

    def _smooth(self, x: DistVector, b: DistVector, sweeps: int) -> None:
        for _ in range(sweeps):
            res = b.owned - self.op.apply(x).owned
            x.assign(x.owned + res / self._d_l1)

    def apply(self, r: DistVector) -> DistVector:
        h = self.hierarchy
        comm = self.op.comm
        if self._P is None:
            lo, hi = self.op.block.row_range
            return self.op.vector(vcycle(h, gather_global(comm, r))[lo:hi])
        m = h.config.sweeps_per_phase
        x = self.op.vector()
        self._smooth(x, r, m)
        res = r.copy()
        axpy(-1.0, self.op.apply(x), res)
        full = gather_global(comm, res)
        xc = _cycle(h, 1, h.levels[0].P.T @ full)
        x.assign(x.owned + self._P @ xc)
        self._smooth(x, r, m)
        return x
