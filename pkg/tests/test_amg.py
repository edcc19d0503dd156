import numpy as np
import pytest
import scipy.sparse as sp
from conftest import tridiag
from hypothesis import given
from hypothesis import strategies as hs

from sparsewatt import stencil as st
from sparsewatt.amg import (
    AggregateMap,
    AmgConfig,
    DistributedAmgPreconditioner,
    build_hierarchy,
    build_prolongator,
    galerkin_product,
    greedy_matching,
    l1_diagonal,
    l1_jacobi,
    match_and_aggregate,
    vcycle,
)
from sparsewatt.core import DistVector, reassemble
from sparsewatt.errors import DomainError
from sparsewatt.krylov import DistOperator, SolveConfig, solve
from sparsewatt.transport import run_ranks


def poisson_global(n, stencil="7pt"):
    spec = st.MeshSpec(n, n, n, stencil)
    return reassemble(st.assemble_all(spec, st.TaskGrid()))


def reference_matching(A):
    """Plain-Python greedy matching: heaviest edge first, ties by (i, j)."""
    A = A.toarray()
    n = len(A)
    edges = []
    for i in range(n):
        for j in range(i + 1, n):
            if A[i, j] != 0:
                edges.append((-abs(A[i, j]) / np.sqrt(A[i, i] * A[j, j]), i, j))
    mate = [-1] * n
    for _, i, j in sorted(edges):
        if mate[i] < 0 and mate[j] < 0:
            mate[i], mate[j] = j, i
    return mate


def test_greedy_trace_on_1d_laplacian():
    A = tridiag(8, -1.0, 2.0, -1.0)
    assert greedy_matching(A).tolist() == [1, 0, 3, 2, 5, 4, 7, 6]
    agg = match_and_aggregate(A, passes=3)
    assert agg.n_coarse == 1
    h = build_hierarchy(tridiag(64, -1.0, 2.0, -1.0), AmgConfig(min_coarse_size=1))
    assert h.sizes == [64, 8, 1]


def test_greedy_prefers_heavier_edges():
    A = sp.csr_matrix(np.array([[4.0, -1, 0, 0], [-1, 4, -3, 0], [0, -3, 4, -1], [0, 0, -1, 4]]))
    assert greedy_matching(A).tolist() == [-1, 2, 1, -1]
    agg = match_and_aggregate(A, passes=1)
    assert agg.fine_to_coarse.tolist() == [0, 1, 1, 2]


@given(hs.integers(2, 25), hs.integers(0, 2**31 - 1))
def test_matching_matches_reference(n, seed):
    rng = np.random.default_rng(seed)
    B = sp.random(n, n, density=0.3, random_state=rng)
    # Quantized weights force ties through the (i, j) rule.
    B.data = np.round(B.data * 3)
    A = sp.csr_matrix(B + B.T + 10 * n * sp.identity(n))
    assert greedy_matching(A).tolist() == reference_matching(A)


@pytest.mark.parametrize("n", [8, 12, 16])
def test_three_pass_aggregate_sizes(n):
    agg = match_and_aggregate(poisson_global(n), passes=3)
    sizes = agg.sizes
    assert sizes.max() <= 8
    assert sizes.mean() >= 4
    agg.validate()


@pytest.mark.parametrize("stencil", st.STENCILS)
def test_galerkin_matches_dense(stencil):
    A = poisson_global(8, stencil)
    P = build_prolongator(match_and_aggregate(A))
    Ad, Pd = A.toarray(), P.toarray()
    ref = Pd.T @ Ad @ Pd
    got = galerkin_product(A, P).toarray()
    assert np.abs(got - ref).max() <= 1e-14 * np.abs(ref).max()


def test_galerkin_shape_mismatch():
    with pytest.raises(DomainError):
        galerkin_product(sp.identity(4, format="csr"), sp.identity(3, format="csr"))


def test_aggregate_map_validation():
    with pytest.raises(DomainError):
        AggregateMap(np.array([0, 2]), 3).validate()


def test_prolongator_structure():
    P = build_prolongator(AggregateMap(np.array([0, 0, 1, 2, 1]), 3))
    np.testing.assert_array_equal(P.toarray().sum(axis=1), np.ones(5))
    np.testing.assert_array_equal(P.toarray().sum(axis=0), [2, 2, 1])


@pytest.mark.parametrize("stencil", st.STENCILS)
def test_l1_smoother_contracts(stencil):
    A = poisson_global(5, stencil)
    d = l1_diagonal(A)
    np.testing.assert_array_equal(d, np.asarray(abs(A).sum(axis=1)).ravel())
    E = np.eye(A.shape[0]) - A.toarray() / d[:, None]
    assert np.max(np.abs(np.linalg.eigvals(E))) < 1.0
    # A-norm of the error never grows under a sweep.
    rng = np.random.default_rng(1)
    e = rng.standard_normal(A.shape[0])
    e1 = l1_jacobi(A, d, e, np.zeros_like(e), 1)
    assert e1 @ (A @ e1) < e @ (A @ e)


def vcycle_matrix(h, n):
    return np.column_stack([vcycle(h, col) for col in np.eye(n)])


@pytest.mark.parametrize("split", ["pre_post", "total"])
def test_vcycle_symmetric_positive(split):
    A = poisson_global(8)
    h = build_hierarchy(A, AmgConfig(min_coarse_size=8, sweep_split=split))
    assert len(h.levels) >= 2
    rng = np.random.default_rng(7)
    for _ in range(20):
        x, y = rng.standard_normal((2, A.shape[0]))
        lhs, rhs = vcycle(h, x) @ y, x @ vcycle(h, y)
        assert abs(lhs - rhs) <= 1e-12 * max(abs(lhs), 1.0)
    for _ in range(100):
        x = rng.standard_normal(A.shape[0])
        assert x @ vcycle(h, x) > 0


def test_hierarchy_shape():
    h = build_hierarchy(poisson_global(16))
    assert h.sizes == [4096, 512, 64]
    assert 1.0 < h.operator_complexity() < 1.5
    assert h.levels[-1].P is None


def test_config_validation():
    with pytest.raises(DomainError):
        AmgConfig(smoother_sweeps=0)
    with pytest.raises(DomainError):
        AmgConfig(sweep_split="total", smoother_sweeps=3)
    assert AmgConfig().sweeps_per_phase == 4
    assert AmgConfig(sweep_split="total").sweeps_per_phase == 2


def _dist_vcycle(comm, blocks, h, r_global):
    op = DistOperator(comm, blocks[comm.rank])
    M = DistributedAmgPreconditioner(op, h)
    return M.apply(DistVector.from_global(blocks[comm.rank], r_global)).owned.copy()


@pytest.mark.parametrize("ranks", [1, 2, 4])
def test_distributed_vcycle_equals_serial(ranks):
    spec = st.MeshSpec(8, 8, 8)
    blocks = st.assemble_all(spec, st.best_task_grid(spec, ranks))
    A = reassemble(blocks)
    h = build_hierarchy(A, AmgConfig(min_coarse_size=8))
    r = np.random.default_rng(2).standard_normal(spec.n_global)
    got = np.concatenate(run_ranks(_dist_vcycle, ranks, blocks, h, r))
    ref = vcycle(h, r)
    np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-12 * np.abs(ref).max())


def _pcg(comm, blocks, h, cfg):
    op = DistOperator(comm, blocks[comm.rank])
    b = op.vector(st.rhs(blocks[comm.rank]))
    x, stats = solve(op, b, None, cfg, DistributedAmgPreconditioner(op, h))
    return x.owned.copy(), stats


@pytest.mark.parametrize("variant", ["hs", "fused"])
def test_pcg_converges_with_amg(variant):
    spec = st.MeshSpec(12, 12, 12)
    blocks = st.assemble_all(spec, st.TaskGrid(2, 1, 1))
    h = build_hierarchy(reassemble(blocks))
    out = run_ranks(_pcg, 2, blocks, h, SolveConfig(rtol=1e-8, variant=variant))
    x = np.concatenate([o[0] for o in out])
    assert out[0][1].converged
    assert out[0][1].iterations < 20
    assert np.abs(x - 1).max() < 1e-6
