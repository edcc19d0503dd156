import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import HealthCheck, settings

from sparsewatt import stencil as st

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def tridiag(n, lo, d, hi):
    return sp.diags([np.full(n - 1, lo), np.full(n, d), np.full(n - 1, hi)], [-1, 0, 1], format="csr")


def kron_poisson(nx, ny, nz, stencil="7pt"):
    """Poisson operator in natural x-fastest ordering, built from Kronecker products."""
    I = lambda n: sp.identity(n, format="csr")  # noqa: E731
    if stencil == "7pt":
        T = lambda n: tridiag(n, -1.0, 2.0, -1.0)  # noqa: E731
        A = (
            sp.kron(I(nz), sp.kron(I(ny), T(nx)))
            + sp.kron(I(nz), sp.kron(T(ny), I(nx)))
            + sp.kron(T(nz), sp.kron(I(ny), I(nx)))
        )
    else:
        T1 = lambda n: tridiag(n, 1.0, 1.0, 1.0)  # noqa: E731
        A = 27.0 * sp.identity(nx * ny * nz) - sp.kron(T1(nz), sp.kron(T1(ny), T1(nx)))
    return sp.csr_matrix(A)


def natural_to_subdomain(spec, grid):
    """``perm[g]`` is the natural index of the node with subdomain-major id ``g``."""
    ids = st.node_ids(spec, grid)
    nx, ny, nz = spec.dims
    x, y, z = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    natural = x + nx * (y + ny * z)
    perm = np.empty(spec.n_global, dtype=np.int64)
    perm[ids.ravel()] = natural.ravel()
    return perm


def oracle_matrix(spec, grid):
    """Kronecker oracle reordered into the package's subdomain-major numbering."""
    A = kron_poisson(*spec.dims, spec.stencil)
    perm = natural_to_subdomain(spec, grid)
    return sp.csr_matrix(A[perm][:, perm])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
