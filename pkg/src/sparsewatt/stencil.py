"""3D Poisson benchmark matrices on a 3D task grid.

Rows are numbered subdomain-major: rank ``r`` (x fastest in the task grid)
owns one contiguous block of global rows, and nodes inside a subdomain are
numbered lexicographically with x fastest. With this numbering the "matrix
partitioned by rows" and "3D domain mapped to a 3D task grid" views coincide.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .core import LocalCsrBlock, build_local_block
from .errors import DomainError, SizingError

STENCILS = ("7pt", "27pt")
DIAGONAL = {"7pt": 6.0, "27pt": 26.0}

# Single-GPU sizes used in the original experiments, kept as presets.
PAPER_PRESETS = {
    "spmv-7pt": 405**3,
    "spmv-27pt": 260**3,
    "cg-7pt": 408**3,
    "cg-27pt": 265**3,
    "pcg-7pt": 370**3,
}


@dataclass(frozen=True)
class MeshSpec:
    nx: int
    ny: int
    nz: int
    stencil: str = "7pt"

    def __post_init__(self):
        if min(self.nx, self.ny, self.nz) < 1:
            raise DomainError(f"mesh dimensions must be >= 1, got {self.dims}")
        if self.stencil not in STENCILS:
            raise DomainError(f"unknown stencil {self.stencil!r}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    @property
    def n_global(self) -> int:
        return self.nx * self.ny * self.nz


@dataclass(frozen=True)
class TaskGrid:
    px: int = 1
    py: int = 1
    pz: int = 1

    def __post_init__(self):
        if min(self.px, self.py, self.pz) < 1:
            raise DomainError(f"task grid dimensions must be >= 1, got {self.dims}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.px, self.py, self.pz)

    @property
    def size(self) -> int:
        return self.px * self.py * self.pz

    def coords(self, rank: int) -> tuple[int, int, int]:
        if not 0 <= rank < self.size:
            raise DomainError(f"rank {rank} outside grid of {self.size}")
        ix = rank % self.px
        iy = (rank // self.px) % self.py
        return ix, iy, rank // (self.px * self.py)

    def rank_of(self, ix: int, iy: int, iz: int) -> int:
        return ix + self.px * (iy + self.py * iz)


def split_sizes(n: int, p: int) -> np.ndarray:
    """Sizes of ``p`` consecutive pieces of ``n``; low pieces take one extra plane."""
    base, extra = divmod(n, p)
    return np.array([base + (1 if i < extra else 0) for i in range(p)], dtype=np.int64)


def _check(spec: MeshSpec, grid: TaskGrid) -> None:
    for n, p, axis in zip(spec.dims, grid.dims, "xyz"):
        if p > n:
            raise DomainError(f"task grid {grid.dims} does not fit mesh {spec.dims} along {axis}")


def subdomain_shapes(spec: MeshSpec, grid: TaskGrid) -> list[tuple[int, int, int]]:
    _check(spec, grid)
    sx, sy, sz = (split_sizes(n, p) for n, p in zip(spec.dims, grid.dims))
    return [
        (int(sx[ix]), int(sy[iy]), int(sz[iz]))
        for ix, iy, iz in (grid.coords(r) for r in range(grid.size))
    ]


def row_ranges(spec: MeshSpec, grid: TaskGrid) -> list[tuple[int, int]]:
    sizes = [a * b * c for a, b, c in subdomain_shapes(spec, grid)]
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    return [(int(bounds[r]), int(bounds[r + 1])) for r in range(grid.size)]


def node_ids(spec: MeshSpec, grid: TaskGrid) -> np.ndarray:
    """Global row id of every mesh node, indexed ``[x, y, z]``."""
    _check(spec, grid)
    per_axis = []
    for n, p in zip(spec.dims, grid.dims):
        sizes = split_sizes(n, p)
        owner = np.repeat(np.arange(p), sizes)
        local = np.arange(n) - np.concatenate([[0], np.cumsum(sizes)[:-1]])[owner]
        per_axis.append((owner, local, sizes))
    (ox, lx, sx), (oy, ly, sy), (oz, lz, sz) = per_axis
    starts = np.array([lo for lo, _ in row_ranges(spec, grid)], dtype=np.int64)
    X, Y, Z = np.meshgrid(np.arange(spec.nx), np.arange(spec.ny), np.arange(spec.nz), indexing="ij")
    rank = ox[X] + grid.px * (oy[Y] + grid.py * oz[Z])
    return starts[rank] + lx[X] + sx[ox[X]] * (ly[Y] + sy[oy[Y]] * lz[Z])


def stencil_offsets(stencil: str) -> list[tuple[int, int, int]]:
    if stencil == "7pt":
        return [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)]
    if stencil == "27pt":
        return [o for o in itertools.product((-1, 0, 1), repeat=3) if o != (0, 0, 0)]
    raise DomainError(f"unknown stencil {stencil!r}")


def assemble_poisson(spec: MeshSpec, grid: TaskGrid, rank: int, ids: np.ndarray | None = None) -> LocalCsrBlock:
    """This rank's row block of the Dirichlet Poisson operator.

    ``ids`` may be passed to reuse a precomputed :func:`node_ids` array.
    """
    _check(spec, grid)
    if ids is None:
        ids = node_ids(spec, grid)
    ix, iy, iz = grid.coords(rank)
    bounds = [np.concatenate([[0], np.cumsum(split_sizes(n, p))]) for n, p in zip(spec.dims, grid.dims)]
    xs = np.arange(bounds[0][ix], bounds[0][ix + 1])
    ys = np.arange(bounds[1][iy], bounds[1][iy + 1])
    zs = np.arange(bounds[2][iz], bounds[2][iz + 1])
    X, Y, Z = (a.ravel(order="F") for a in np.meshgrid(xs, ys, zs, indexing="ij"))
    me = ids[X, Y, Z]
    rows, cols, vals = [me], [me], [np.full(len(me), DIAGONAL[spec.stencil])]
    for dx, dy, dz in stencil_offsets(spec.stencil):
        x2, y2, z2 = X + dx, Y + dy, Z + dz
        inside = (x2 >= 0) & (x2 < spec.nx) & (y2 >= 0) & (y2 < spec.ny) & (z2 >= 0) & (z2 < spec.nz)
        rows.append(me[inside])
        cols.append(ids[x2[inside], y2[inside], z2[inside]])
        vals.append(np.full(int(inside.sum()), -1.0))
    lo, hi = row_ranges(spec, grid)[rank]
    return build_local_block(
        (lo, hi), (np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)), spec.n_global
    )


def assemble_all(spec: MeshSpec, grid: TaskGrid) -> list[LocalCsrBlock]:
    ids = node_ids(spec, grid)
    return [assemble_poisson(spec, grid, r, ids) for r in range(grid.size)]


def rhs(block: LocalCsrBlock, kind: str = "ones_solution") -> np.ndarray:
    """Owned right-hand side: ``A @ 1`` (solution all ones) or all ones."""
    if kind == "ones_solution":
        return np.asarray(block.ext_csr.sum(axis=1)).ravel()
    if kind == "ones":
        return np.ones(block.n_local_rows)
    raise DomainError(f"unknown rhs kind {kind!r}")


# ---------------------------------------------------------------------------
# Weak / strong scaling sizing


def halo_surface(spec: MeshSpec, grid: TaskGrid) -> int:
    """Largest per-subdomain area of faces shared with another subdomain."""
    worst = 0
    for rank, (a, b, c) in enumerate(subdomain_shapes(spec, grid)):
        coords = grid.coords(rank)
        faces = (b * c, a * c, a * b)
        area = sum(
            f * ((i > 0) + (i < p - 1)) for f, i, p in zip(faces, coords, grid.dims)
        )
        worst = max(worst, area)
    return worst


def _surface(dims) -> int:
    a, b, c = dims
    return 2 * (a * b + b * c + a * c)


def near_cube_dims(n: int, tolerance: float = 0.01) -> tuple[int, int, int]:
    """Box dimensions ``a <= b <= c`` with ``a*b*c`` within ``tolerance`` of ``n``.

    Among admissible boxes the most cube-like one wins (smallest surface per
    ``volume**(2/3)``, so smaller boxes get no advantage), then the one
    closest to ``n``.
    """
    if n < 1:
        raise SizingError(f"cannot build a mesh with {n} DOFs")
    best = None
    a_max = int(round(n ** (1 / 3))) + 2
    for a in range(1, a_max + 1):
        b_max = int((n / a) ** 0.5) + 2
        for b in range(a, b_max + 1):
            for c in {max(b, int(n // (a * b))), max(b, int(-(-n // (a * b))))}:
                err = abs(a * b * c - n)
                if err > tolerance * n:
                    continue
                vol = a * b * c
                key = (round(_surface((a, b, c)) / vol ** (2 / 3), 9), err, (a, b, c))
                if best is None or key < best:
                    best = key
    if best is None:
        # Only happens for tiny n where no c >= b works; fall back to a line.
        return (1, 1, n)
    return best[2]


def factorizations3(p: int) -> list[tuple[int, int, int]]:
    out = []
    for a in range(1, p + 1):
        if p % a:
            continue
        for b in range(1, p // a + 1):
            if (p // a) % b == 0:
                out.append((a, b, p // (a * b)))
    return out


def size_experiment(mode: str, base_dofs_per_rank: int, ranks: int, stencil: str = "7pt") -> tuple[MeshSpec, TaskGrid]:
    """Mesh and task grid for a weak- or strong-scaling point.

    weak: every rank gets a near-cube block of ``base_dofs_per_rank`` nodes.
    strong: the global mesh holds ``base_dofs_per_rank`` nodes regardless of ``ranks``.
    The task grid minimizes the largest per-subdomain halo surface.
    """
    if ranks < 1:
        raise SizingError("ranks must be >= 1")
    if mode not in ("weak", "strong"):
        raise SizingError(f"unknown scaling mode {mode!r}")
    candidates = []
    if mode == "weak":
        local = near_cube_dims(base_dofs_per_rank)
        for g in factorizations3(ranks):
            for perm in set(itertools.permutations(local)):
                dims = tuple(p * l for p, l in zip(g, perm))
                candidates.append((MeshSpec(*dims, stencil), TaskGrid(*g)))
    else:
        spec = MeshSpec(*near_cube_dims(base_dofs_per_rank), stencil)
        return spec, best_task_grid(spec, ranks)
    if not candidates:
        raise SizingError(f"no task grid of {ranks} ranks fits a mesh of {base_dofs_per_rank} DOFs")
    return min(candidates, key=_sizing_key)


def best_task_grid(spec: MeshSpec, ranks: int) -> TaskGrid:
    """Task grid of ``ranks`` tasks over a fixed mesh, by the sizing order above."""
    if ranks < 1:
        raise SizingError("ranks must be >= 1")
    candidates = [
        (spec, TaskGrid(*g)) for g in factorizations3(ranks) if all(p <= n for p, n in zip(g, spec.dims))
    ]
    if not candidates:
        raise SizingError(f"no task grid of {ranks} ranks fits a {spec.dims} mesh")
    return min(candidates, key=_sizing_key)[1]


def _sizing_key(candidate):
    spec, grid = candidate
    return (halo_surface(spec, grid), _surface(spec.dims), grid.dims, spec.dims)
