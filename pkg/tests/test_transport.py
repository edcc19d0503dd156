import numpy as np
import pytest

from sparsewatt import stencil as st
from sparsewatt.core import DistVector, reassemble
from sparsewatt.errors import DomainError
from sparsewatt.krylov import DistOperator
from sparsewatt.transport import run_ranks


def _collectives(comm):
    total = comm.allreduce(np.array([comm.rank, 1.0]))
    gathered = comm.allgather(comm.rank * 10)
    root = comm.bcast("hello" if comm.rank == 0 else None)
    comm.barrier()
    return total.tolist(), gathered, root, comm.reductions


def _tagged(comm):
    # Out-of-order tags must be matched, not delivered FIFO.
    peer = 1 - comm.rank
    comm.send(peer, "a", tag=1)
    comm.send(peer, "b", tag=2)
    return comm.recv(peer, tag=2), comm.recv(peer, tag=1)


def _failing(comm):
    if comm.rank == 1:
        raise DomainError("rank 1 failed")
    comm.barrier()


def _socket_spmv(comm, blocks, x_global):
    op = DistOperator(comm, blocks[comm.rank])
    return op.apply(DistVector.from_global(blocks[comm.rank], x_global)).owned.copy()


@pytest.mark.parametrize("size", [1, 3, 4])
def test_collectives_thread(size):
    out = run_ranks(_collectives, size)
    for total, gathered, root, reductions in out:
        assert total == [sum(range(size)), float(size)]
        assert gathered == [10 * r for r in range(size)]
        assert root == "hello"
        assert reductions == 1


def test_tag_matching():
    assert run_ranks(_tagged, 2) == [("b", "a"), ("b", "a")]


def test_rank_failure_propagates():
    with pytest.raises(DomainError, match="rank 1 failed"):
        run_ranks(_failing, 3)


def test_reductions_deterministic():
    vals = np.random.default_rng(3).standard_normal(4) * 1e10

    def fn(comm):
        return comm.allreduce(vals[comm.rank])[0]

    results = {float(v) for _ in range(5) for v in run_ranks(fn, 4)}
    assert len(results) == 1


def test_socket_transport_collectives():
    out = run_ranks(_collectives, 3, transport="socket")
    assert [o[1] for o in out] == [[0, 10, 20]] * 3
    assert all(o[0] == [3.0, 3.0] for o in out)


def test_socket_transport_spmv_matches_serial():
    spec = st.MeshSpec(6, 6, 6)
    blocks = st.assemble_all(spec, st.TaskGrid(2, 1, 1))
    x = np.random.default_rng(0).standard_normal(spec.n_global)
    y = np.concatenate(run_ranks(_socket_spmv, 2, blocks, x, transport="socket"))
    np.testing.assert_allclose(y, reassemble(blocks) @ x, rtol=1e-14)


def test_socket_failure_propagates():
    with pytest.raises(DomainError):
        run_ranks(_failing, 2, transport="socket")


def test_unknown_transport():
    with pytest.raises(ValueError):
        run_ranks(_collectives, 2, transport="carrier-pigeon")
