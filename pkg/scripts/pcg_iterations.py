"""Iteration counts of CG and PCG+AMG on growing Poisson meshes.

Serial study (one rank): b = A*1, relative residual tolerance --rtol.
Prints a table and the CG/PCG reduction factor per size.
"""

import argparse

from sparsewatt import stencil as st
from sparsewatt.amg import AmgPreconditioner, build_hierarchy
from sparsewatt.core import reassemble
from sparsewatt.krylov import DistOperator, SolveConfig, solve
from sparsewatt.transport import SerialComm


def iterations(n, stencil, rtol, precond):
    spec = st.MeshSpec(n, n, n, stencil)
    (block,) = st.assemble_all(spec, st.TaskGrid())
    op = DistOperator(SerialComm(), block)
    M = AmgPreconditioner(build_hierarchy(reassemble([block]))) if precond else None
    _, stats = solve(op, op.vector(st.rhs(block)), None, SolveConfig(rtol=rtol), M)
    return stats.iterations


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sizes", type=int, nargs="+", default=[8, 16, 24, 32])
    ap.add_argument("--stencil", choices=st.STENCILS, default="7pt")
    ap.add_argument("--rtol", type=float, default=1e-6)
    args = ap.parse_args(argv)

    print(f"{'n':>4} {'dofs':>8} {'cg':>5} {'pcg':>5} {'factor':>7}")
    for n in args.sizes:
        cg = iterations(n, args.stencil, args.rtol, False)
        pcg = iterations(n, args.stencil, args.rtol, True)
        print(f"{n:>4} {n**3:>8} {cg:>5} {pcg:>5} {cg / pcg:>7.2f}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
