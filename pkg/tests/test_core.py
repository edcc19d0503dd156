import json

import numpy as np
import pytest
import scipy.sparse as sp
from conftest import oracle_matrix
from hypothesis import given
from hypothesis import strategies as hs

from sparsewatt import stencil as st
from sparsewatt.core import (
    DistVector,
    build_comm_plan,
    build_local_block,
    distribute_matrix,
    dot,
    dots,
    gather_global,
    halo_exchange,
    norm2,
    read_matrix_market,
    read_partition,
    reassemble,
    shift_columns,
    spmv,
    spmv_overlapped,
    uniform_row_ranges,
    validate_plans,
    write_matrix_market,
    write_partition,
)
from sparsewatt.errors import CapacityError, ContractError, DomainError, PartitionError
from sparsewatt.krylov import DistOperator
from sparsewatt.transport import run_ranks


def random_sparse(rng, n, density=0.2):
    A = sp.random(n, n, density=density, random_state=rng, format="csr")
    return A + sp.identity(n, format="csr")


@hs.composite
def partitions(draw, max_n=40, max_ranks=6):
    n = draw(hs.integers(1, max_n))
    size = draw(hs.integers(1, min(n, max_ranks)))
    cuts = sorted(draw(hs.lists(hs.integers(0, n), min_size=size - 1, max_size=size - 1)))
    bounds = [0] + cuts + [n]
    return n, [(bounds[i], bounds[i + 1]) for i in range(size)]


def test_shift_columns_signed():
    cols = np.array([0, 3, 5, 9], dtype=np.int64)
    np.testing.assert_array_equal(shift_columns(cols, 5), [-5, -2, 0, 4])


def test_block_from_hand_example():
    # Rows 2..4 of a 6-column matrix; entries in unsorted order.
    entries = [(3, 5, 2.0), (2, 0, 1.0), (2, 2, 4.0), (3, 3, 4.0), (2, 3, -1.0)]
    blk = build_local_block((2, 4), entries, 6)
    np.testing.assert_array_equal(blk.col_map, [0, 2, 3, 5])
    np.testing.assert_array_equal(blk.row_offsets, [0, 3, 5])
    np.testing.assert_array_equal(blk.col_local, [0, 1, 2, 2, 3])
    assert blk.col_local.dtype == np.uint32
    np.testing.assert_array_equal(blk.halo_globals, [0, 5])
    blk.validate()


def test_block_rejects_bad_input():
    with pytest.raises(DomainError):
        build_local_block((0, 2), [(0, 0, 1.0), (0, 0, 2.0)], 2)
    with pytest.raises(DomainError):
        build_local_block((0, 2), [(3, 0, 1.0)], 4)
    with pytest.raises(DomainError):
        build_local_block((0, 2), [(0, 7, 1.0)], 4)
    with pytest.raises(CapacityError):
        build_local_block((0, 1), [(0, 0, 1.0), (0, 1, 1.0), (0, 2, 1.0)], 3, capacity=2)


def test_empty_block():
    blk = build_local_block((3, 3), [], 5)
    assert blk.n_local_rows == 0 and blk.nnz == 0
    blk.validate()


@given(partitions(), hs.integers(0, 2**31 - 1))
def test_distribute_reassemble_identity(part, seed):
    n, ranges = part
    A = random_sparse(np.random.default_rng(seed), n)
    blocks = distribute_matrix(A, ranges)
    B = reassemble(blocks)
    assert (A != B).nnz == 0
    for blk in blocks:
        blk.validate()
        # Local columns map back to every global column used by the block, in order.
        rows, cols, _ = blk.global_entries()
        np.testing.assert_array_equal(np.unique(cols), blk.col_map)


def brute_force_halo(A, lo, hi):
    """Every column referenced by rows [lo, hi) that the rank does not own."""
    needed = set()
    A = sp.csr_matrix(A)
    for i in range(lo, hi):
        for j in A.indices[A.indptr[i]:A.indptr[i + 1]]:
            if not lo <= j < hi:
                needed.add(int(j))
    return sorted(needed)


@given(partitions(), hs.integers(0, 2**31 - 1))
def test_halo_matches_brute_force_scan(part, seed):
    n, ranges = part
    A = random_sparse(np.random.default_rng(seed), n)
    blocks = distribute_matrix(A, ranges)
    plans = build_comm_plan([b.col_map for b in blocks], ranges)
    for blk, plan, (lo, hi) in zip(blocks, plans, ranges):
        assert blk.halo_globals.tolist() == brute_force_halo(A, lo, hi)
        assert plan.halo_size == blk.n_halo
    validate_plans(plans, ranges)


def test_plan_asymmetry_detected():
    blocks = st.assemble_all(st.MeshSpec(4, 4, 4), st.TaskGrid(2, 1, 1))
    ranges = [b.row_range for b in blocks]
    plans = build_comm_plan([b.col_map for b in blocks], ranges)
    plans[0].sends[1] = plans[0].sends[1][:-1]
    with pytest.raises(PartitionError):
        validate_plans(plans, ranges)


def test_partition_contiguity():
    with pytest.raises(PartitionError):
        build_comm_plan([np.array([0]), np.array([1])], [(0, 1), (2, 3)])


def test_stale_halo_rejected():
    blocks = st.assemble_all(st.MeshSpec(4, 4, 4), st.TaskGrid(2, 1, 1))
    x = DistVector.zeros(blocks[0])
    with pytest.raises(ContractError):
        spmv(blocks[0], x)


def test_owned_segment_read_only():
    x = DistVector(np.zeros(3), 2)
    with pytest.raises(ValueError):
        x.owned[0] = 1.0
    x.halo[:] = 1.0
    x.assign([1.0, 2.0, 3.0])
    assert not x.halo_valid


def _spmv_worker(comm, blocks, x_global, overlap):
    op = DistOperator(comm, blocks[comm.rank], overlap=overlap)
    x = DistVector.from_global(blocks[comm.rank], x_global)
    y = op.apply(x)
    return y.owned.copy(), dot(comm, x, y), norm2(comm, x), gather_global(comm, y)


@pytest.mark.parametrize("stencil", st.STENCILS)
@pytest.mark.parametrize("ranks", [1, 2, 4, 8])
@pytest.mark.parametrize("overlap", [False, True])
def test_distributed_spmv_matches_kron_oracle(stencil, ranks, overlap, rng):
    spec = st.MeshSpec(8, 8, 8, stencil)
    grid = st.best_task_grid(spec, ranks)
    blocks = st.assemble_all(spec, grid)
    A = oracle_matrix(spec, grid)
    assert (reassemble(blocks) != A).nnz == 0
    x = rng.standard_normal(spec.n_global)
    y_ref = A @ x
    out = run_ranks(_spmv_worker, ranks, blocks, x, overlap)
    y = np.concatenate([o[0] for o in out])
    np.testing.assert_allclose(y, y_ref, rtol=1e-13, atol=1e-13 * np.abs(y_ref).max())
    for _, d, nrm, full in out:
        assert d == pytest.approx(x @ y_ref, rel=1e-13)
        assert nrm == pytest.approx(np.linalg.norm(x), rel=1e-13)
        np.testing.assert_array_equal(full, y)


def _dots_worker(comm, blocks, x_global):
    x = DistVector.from_global(blocks[comm.rank], x_global)
    before = comm.reductions
    res = dots(comm, [(x, x), (x, x)])
    return res, comm.reductions - before


def test_fused_dots_single_reduction():
    blocks = st.assemble_all(st.MeshSpec(6, 6, 6), st.TaskGrid(2, 2, 1))
    x = np.arange(216, dtype=float)
    for res, count in run_ranks(_dots_worker, 4, blocks, x):
        assert count == 1
        np.testing.assert_allclose(res, [x @ x] * 2, rtol=1e-14)


def test_halo_exchange_fills_exact_values():
    spec = st.MeshSpec(6, 5, 4, "27pt")
    blocks = st.assemble_all(spec, st.TaskGrid(2, 2, 1))
    x_global = np.arange(spec.n_global, dtype=float) * 0.5

    def worker(comm):
        blk = blocks[comm.rank]
        plan = build_comm_plan([b.col_map for b in blocks], [b.row_range for b in blocks])[comm.rank]
        x = DistVector.from_global(blk, x_global)
        halo_exchange(comm, plan, x)
        return x.halo.copy(), blk.halo_globals

    for halo, globals_ in run_ranks(worker, 4):
        np.testing.assert_array_equal(halo, x_global[globals_])


def test_overlap_split_covers_all_rows():
    blk = st.assemble_all(st.MeshSpec(8, 8, 8), st.TaskGrid(2, 2, 2))[3]
    rows = np.sort(np.concatenate([blk.interior_rows, blk.boundary_rows]))
    np.testing.assert_array_equal(rows, np.arange(blk.n_local_rows))
    assert len(blk.interior_rows) == 3**3


def test_partition_and_matrix_files_round_trip(tmp_path):
    ranges = uniform_row_ranges(10, 3)
    assert ranges == [(0, 4), (4, 7), (7, 10)]
    write_partition(tmp_path / "p.json", ranges)
    assert read_partition(tmp_path / "p.json") == ranges
    assert json.loads((tmp_path / "p.json").read_text())[1] == {"rank": 1, "first_row": 4, "n_rows": 3}
    A = reassemble(st.assemble_all(st.MeshSpec(3, 3, 3), st.TaskGrid()))
    write_matrix_market(tmp_path / "a.mtx", A, symmetric=True)
    assert (read_matrix_market(tmp_path / "a.mtx") != A).nnz == 0


def test_spmv_overlapped_single_rank_equals_plain():
    blk = st.assemble_all(st.MeshSpec(5, 5, 5), st.TaskGrid())[0]
    plan = build_comm_plan([blk.col_map], [blk.row_range])[0]
    x = DistVector(np.linspace(0, 1, blk.n_local_rows), 0)
    np.testing.assert_array_equal(spmv_overlapped(None, plan, blk, x), spmv(blk, x))
