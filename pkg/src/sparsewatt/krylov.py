"""Conjugate Gradient solvers over row-distributed operators.

Two variants share one calling convention:

``cg_hs``
    Hestenes-Stiefel PCG. Two global reductions per iteration: ``p.Ap`` and
    the fused pair ``(r.z, r.r)``.
``cg_fused``
    Chronopoulos-Gear single-reduction PCG. ``r.u``, ``w.u`` and ``r.r`` are
    fused into one reduction; ``p.Ap`` is recovered from the recurrence.

Both run in lockstep on every rank; the reductions are the only
synchronization points besides the halo exchanges of the SpMV.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import (
    DistVector,
    LocalCsrBlock,
    aypx,
    axpy,
    build_comm_plan_collective,
    dots,
    halo_exchange,
    spmv,
    spmv_overlapped,
)
from .errors import BreakdownError, CapabilityError, DomainError

VARIANTS = ("hs", "fused", "flexible")
MODES = ("converge", "fixed_iterations")
BREAKDOWN_TOL = 1e-300


@dataclass
class SolveConfig:
    rtol: float = 1e-8
    maxit: int = 1000
    variant: str = "hs"
    mode: str = "converge"

    def __post_init__(self):
        if not self.rtol > 0:
            raise DomainError(f"rtol must be > 0, got {self.rtol}")
        if self.maxit < 1:
            raise DomainError(f"maxit must be >= 1, got {self.maxit}")
        if self.variant not in VARIANTS:
            raise DomainError(f"unknown CG variant {self.variant!r}")
        if self.mode == "fixed":
            self.mode = "fixed_iterations"
        if self.mode not in MODES:
            raise DomainError(f"unknown solve mode {self.mode!r}")


@dataclass
class SolveStats:
    iterations: int = 0
    relres_history: list = field(default_factory=list)
    setup_time: float = 0.0
    solve_time: float = 0.0
    per_iteration_marks: list = field(default_factory=list)
    reductions_per_iteration: list = field(default_factory=list)
    final_relres: float = float("nan")
    converged: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


class DistOperator:
    """One rank's view of a row-distributed matrix: SpMV plus reductions."""

    def __init__(self, comm, block: LocalCsrBlock, plan=None, overlap: bool = False):
        self.comm = comm
        self.block = block
        self.plan = plan if plan is not None else build_comm_plan_collective(comm, block)
        self.overlap = overlap

    @property
    def n_local(self) -> int:
        return self.block.n_local_rows

    def vector(self, owned=None) -> DistVector:
        if owned is None:
            return DistVector.zeros(self.block)
        owned = np.asarray(owned, dtype=np.float64)
        if owned.shape != (self.n_local,):
            raise DomainError(f"owned segment has shape {owned.shape}, expected ({self.n_local},)")
        return DistVector(owned, self.block.n_halo)

    def apply(self, x: DistVector, out: DistVector | None = None) -> DistVector:
        if self.overlap:
            y = spmv_overlapped(self.comm, self.plan, self.block, x)
        else:
            halo_exchange(self.comm, self.plan, x)
            y = spmv(self.block, x)
        if out is None:
            return DistVector(y, self.block.n_halo)
        return out.assign(y)

    def dots(self, pairs) -> np.ndarray:
        return dots(self.comm, pairs)


class IdentityPreconditioner:
    def apply(self, r: DistVector) -> DistVector:
        return r.copy()


class JacobiPreconditioner:
    def __init__(self, op: DistOperator):
        d = op.block.diagonal()
        if np.any(d <= 0):
            raise DomainError("Jacobi preconditioner needs a positive diagonal")
        self._inv = 1.0 / d
        self._n_halo = op.block.n_halo

    def apply(self, r: DistVector) -> DistVector:
        if len(r) != len(self._inv):
            raise DomainError("residual does not conform to the preconditioner")
        return DistVector(r.owned * self._inv, self._n_halo)


def _prepare(op, b, x0, M):
    if M is None:
        M = IdentityPreconditioner()
    if len(b) != op.n_local:
        raise DomainError("right-hand side does not conform to the operator")
    x = op.vector() if x0 is None else x0.copy()
    if x0 is not None and len(x0) != op.n_local:
        raise DomainError("initial guess does not conform to the operator")
    return M, x


def _residual(op, b, x):
    r = b.copy()
    axpy(-1.0, op.apply(x), r)
    return r


def _check_curvature(value, what):
    if not math.isfinite(value) or value <= 0 or abs(value) < BREAKDOWN_TOL:
        raise BreakdownError(f"CG breakdown: {what} = {value!r} (operator not SPD?)")


def _finish(op, b, x, bnorm, stats, t0, clock):
    r = _residual(op, b, x)
    (rr,) = op.dots([(r, r)])
    stats.final_relres = math.sqrt(rr) / bnorm if bnorm > 0 else 0.0
    stats.solve_time = clock() - t0
    return x, stats


def cg_hs(op: DistOperator, b: DistVector, x0: DistVector | None, cfg: SolveConfig, M=None, callback=None, clock=time.perf_counter):
    """Hestenes-Stiefel (P)CG. Returns ``(x, SolveStats)``."""
    M, x = _prepare(op, b, x0, M)
    stats = SolveStats(setup_time=getattr(M, "setup_time", 0.0))
    t0 = clock()
    comm = op.comm
    r = _residual(op, b, x)
    z = M.apply(r)
    rz, rr, bb = op.dots([(r, z), (r, r), (b, b)])
    bnorm = math.sqrt(bb)
    if bnorm == 0.0:
        stats.relres_history = [0.0]
        stats.converged = True
        return _finish(op, b, op.vector(), bnorm, stats, t0, clock)
    stats.relres_history.append(math.sqrt(rr) / bnorm)
    if cfg.mode == "converge" and stats.relres_history[0] <= cfg.rtol:
        stats.converged = True
        return _finish(op, b, x, bnorm, stats, t0, clock)
    p = z.copy()
    for k in range(1, cfg.maxit + 1):
        before = comm.reductions
        q = op.apply(p)
        (pq,) = op.dots([(p, q)])
        _check_curvature(pq, "p^T A p")
        alpha = rz / pq
        axpy(alpha, p, x)
        axpy(-alpha, q, r)
        z = M.apply(r)
        rz_new, rr = op.dots([(r, z), (r, r)])
        stats.iterations = k
        stats.reductions_per_iteration.append(comm.reductions - before)
        stats.per_iteration_marks.append(clock())
        relres = math.sqrt(rr) / bnorm
        stats.relres_history.append(relres)
        if callback is not None:
            callback(k, x, r)
        if relres <= cfg.rtol:
            stats.converged = True
            if cfg.mode == "converge" or rr == 0.0:
                break
        beta = rz_new / rz
        rz = rz_new
        aypx(beta, z, p)
    return _finish(op, b, x, bnorm, stats, t0, clock)


def cg_fused(op: DistOperator, b: DistVector, x0: DistVector | None, cfg: SolveConfig, M=None, callback=None, clock=time.perf_counter):
    """Single-reduction (Chronopoulos-Gear) (P)CG. Returns ``(x, SolveStats)``."""
    M, x = _prepare(op, b, x0, M)
    stats = SolveStats(setup_time=getattr(M, "setup_time", 0.0))
    t0 = clock()
    comm = op.comm
    r = _residual(op, b, x)
    u = M.apply(r)
    w = op.apply(u)
    gamma, delta, rr, bb = op.dots([(r, u), (w, u), (r, r), (b, b)])
    bnorm = math.sqrt(bb)
    if bnorm == 0.0:
        stats.relres_history = [0.0]
        stats.converged = True
        return _finish(op, b, op.vector(), bnorm, stats, t0, clock)
    stats.relres_history.append(math.sqrt(rr) / bnorm)
    if cfg.mode == "converge" and stats.relres_history[0] <= cfg.rtol:
        stats.converged = True
        return _finish(op, b, x, bnorm, stats, t0, clock)
    _check_curvature(delta, "u^T A u")
    alpha = gamma / delta
    beta = 0.0
    p = op.vector()
    s = op.vector()
    for k in range(1, cfg.maxit + 1):
        before = comm.reductions
        aypx(beta, u, p)
        aypx(beta, w, s)
        axpy(alpha, p, x)
        axpy(-alpha, s, r)
        u = M.apply(r)
        w = op.apply(u)
        gamma_new, delta, rr = op.dots([(r, u), (w, u), (r, r)])
        stats.iterations = k
        stats.reductions_per_iteration.append(comm.reductions - before)
        stats.per_iteration_marks.append(clock())
        relres = math.sqrt(rr) / bnorm
        stats.relres_history.append(relres)
        if callback is not None:
            callback(k, x, r)
        if relres <= cfg.rtol:
            stats.converged = True
            if cfg.mode == "converge" or rr == 0.0:
                break
        beta = gamma_new / gamma
        curvature = delta - beta * gamma_new / alpha
        _check_curvature(curvature, "p^T A p (recurrence)")
        alpha = gamma_new / curvature
        gamma = gamma_new
    return _finish(op, b, x, bnorm, stats, t0, clock)


def cg_flexible(*args, **kwargs):
    raise CapabilityError("flexible communication-reduced CG is not implemented")


def solve(op: DistOperator, b: DistVector, x0: DistVector | None, cfg: SolveConfig, M=None, **kwargs):
    """Dispatch on ``cfg.variant``."""
    impl = {"hs": cg_hs, "fused": cg_fused, "flexible": cg_flexible}[cfg.variant]
    return impl(op, b, x0, cfg, M, **kwargs)
