"""Command-line entry point: ``sparsewatt {gen,solve,bench,energy,monitor}``.

Exit codes: 0 success, 1 other runtime error, 2 configuration or input
error, 3 numerical breakdown.
"""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import time
from pathlib import Path

import numpy as np

from . import stencil as st
from .amg import AmgConfig, DistributedAmgPreconditioner, build_hierarchy
from .core import (
    distribute_matrix,
    read_matrix_market,
    read_partition,
    reassemble,
    uniform_row_ranges,
    write_matrix_market,
    write_partition,
)
from .energy import build_energy_report
from .errors import (
    BreakdownError,
    ConfigError,
    DomainError,
    ParseError,
    SizingError,
    SparseWattError,
)
from .harness import ExperimentConfig, emit_report, run_experiment
from .krylov import DistOperator, JacobiPreconditioner, SolveConfig, solve
from .sensors import (
    MonotonicClock,
    Sampler,
    find_region,
    make_backend,
    read_device_files,
    read_marks,
    write_device_files,
    write_epoch,
)
from .transport import run_ranks

log = logging.getLogger("sparsewatt")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_BREAKDOWN = 0, 1, 2, 3
CONFIG_ERRORS = (ConfigError, DomainError, ParseError, SizingError, FileNotFoundError, json.JSONDecodeError)


def _dims(values):
    if len(values) == 1:
        return (values[0],) * 3
    if len(values) == 3:
        return tuple(values)
    raise ConfigError("--n takes one value (cube) or three (nx ny nz)")


def cmd_gen(args) -> int:
    spec = st.MeshSpec(*_dims(args.n), stencil=args.stencil)
    grid = st.best_task_grid(spec, args.ranks)
    blocks = st.assemble_all(spec, grid)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_matrix_market(out / "matrix.mtx", reassemble(blocks), symmetric=True)
    write_partition(out / "partition.json", [b.row_range for b in blocks])
    meta = {"mesh": list(spec.dims), "stencil": spec.stencil, "grid": list(grid.dims), "n_global": spec.n_global}
    (out / "mesh.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"wrote {spec.n_global} rows, grid {grid.dims} to {out}")
    return EXIT_OK


def _solve_worker(comm, blocks, cfg: SolveConfig, precond: str, hierarchy, rhs: str):
    op = DistOperator(comm, blocks[comm.rank])
    M = None
    if precond == "jacobi":
        M = JacobiPreconditioner(op)
    elif precond == "amg":
        M = DistributedAmgPreconditioner(op, hierarchy)
    b = op.vector(st.rhs(blocks[comm.rank], rhs))
    x, stats = solve(op, b, None, cfg, M)
    return x.owned.copy(), stats.to_dict()


def cmd_solve(args) -> int:
    if args.matrix:
        A = read_matrix_market(args.matrix)
        ranges = read_partition(args.partition) if args.partition else uniform_row_ranges(A.shape[0], args.ranks)
        blocks = distribute_matrix(A, ranges)
    else:
        spec = st.MeshSpec(*_dims(args.n), stencil=args.stencil)
        blocks = st.assemble_all(spec, st.best_task_grid(spec, args.ranks))
    cfg = SolveConfig(rtol=args.rtol, maxit=args.maxit, variant=args.variant, mode=args.mode)
    hierarchy = build_hierarchy(reassemble(blocks), AmgConfig()) if args.precond == "amg" else None
    results = run_ranks(
        _solve_worker, len(blocks), blocks, cfg, args.precond, hierarchy, args.rhs, transport=args.transport
    )
    stats = results[0][1]
    summary = {
        "ranks": len(blocks),
        "n_global": blocks[0].n_global,
        "variant": cfg.variant,
        "precond": args.precond,
        "iterations": stats["iterations"],
        "converged": stats["converged"],
        "final_relres": stats["final_relres"],
        "solve_time_s": stats["solve_time"],
        "reductions_per_iteration": sorted(set(stats["reductions_per_iteration"])),
    }
    if args.rhs == "ones_solution":
        x = np.concatenate([r[0] for r in results])
        summary["max_error_vs_ones"] = float(np.max(np.abs(x - 1.0)))
    text = json.dumps(summary, indent=2, sort_keys=True)
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "solve.json").write_text(json.dumps({"summary": summary, "stats": stats}, indent=2, sort_keys=True) + "\n")
        np.savetxt(out / "x.txt", np.concatenate([r[0] for r in results]), fmt="%.17g")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = ExperimentConfig.from_json(args.config)
    out = Path(args.out)

    def progress(rec):
        log.info(
            "ranks=%d run=%d iterations=%d solve=%.3fs DE_total=%.3fJ",
            rec["rank_count"], rec["run"], rec["iterations"], rec["solve_time_s"], rec["energy"]["de_total_j"],
        )

    report = run_experiment(cfg, out_dir=out, progress=progress)
    for path in emit_report(report, out, formats=args.format):
        print(path)
    return EXIT_OK


def cmd_energy(args) -> int:
    timelines = read_device_files(args.traces)
    if not timelines:
        raise ConfigError(f"no power_<device>.csv files in {args.traces}")
    region = find_region(read_marks(args.marks), args.region, args.occurrence)
    report = build_energy_report(
        timelines,
        region,
        baseline_window=args.baseline_window,
        threshold_factor=args.threshold_factor,
        cpu_static_w=args.cpu_static_w,
        n_dofs=args.n_dofs,
        iterations=args.iterations,
    )
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_monitor(args) -> int:
    """Sample until the duration elapses or SIGINT/SIGTERM, then write traces."""
    kwargs = {}
    if args.backend == "powercap_files" and args.root:
        kwargs["root"] = args.root
    if args.backend == "trace_replay":
        kwargs["directory"] = args.root
    clock = MonotonicClock()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_epoch(out, clock)
    sampler = Sampler(make_backend(args.backend, **kwargs), args.period, clock=clock).start()
    stop = {"flag": False}

    def handler(_sig, _frame):
        stop["flag"] = True

    signal.signal(signal.SIGINT, handler)
    signal.signal(signal.SIGTERM, handler)
    t_end = time.monotonic() + args.duration if args.duration else float("inf")
    while not stop["flag"] and time.monotonic() < t_end:
        time.sleep(0.05)
    for path in write_device_files(sampler.stop(), out):
        print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sparsewatt", description="Distributed sparse solvers with energy accounting.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a Poisson matrix and its row partition")
    g.add_argument("--stencil", choices=st.STENCILS, default="7pt")
    g.add_argument("--n", type=int, nargs="+", default=[16])
    g.add_argument("--ranks", type=int, default=1)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("solve", help="solve a system with distributed (P)CG")
    s.add_argument("--matrix", help="Matrix Market file; default generates a Poisson problem")
    s.add_argument("--partition", help="partition JSON written by 'gen'")
    s.add_argument("--stencil", choices=st.STENCILS, default="7pt")
    s.add_argument("--n", type=int, nargs="+", default=[16])
    s.add_argument("--ranks", type=int, default=1)
    s.add_argument("--variant", choices=("hs", "fused", "flexible"), default="hs")
    s.add_argument("--precond", choices=("none", "jacobi", "amg"), default="none")
    s.add_argument("--rtol", type=float, default=1e-8)
    s.add_argument("--maxit", type=int, default=1000)
    s.add_argument("--mode", choices=("converge", "fixed_iterations"), default="converge")
    s.add_argument("--rhs", choices=("ones_solution", "ones"), default="ones_solution")
    s.add_argument("--transport", choices=("thread", "socket"), default="thread")
    s.add_argument("--out")
    s.set_defaults(func=cmd_solve)

    b = sub.add_parser("bench", help="run a scaling experiment from a JSON config")
    b.add_argument("--config", required=True)
    b.add_argument("--out", default="bench_out")
    b.add_argument("--format", nargs="+", choices=("json", "csv", "charts"), default=["json", "csv", "charts"])
    b.set_defaults(func=cmd_bench)

    e = sub.add_parser("energy", help="energy report from recorded traces and region marks")
    e.add_argument("--traces", required=True)
    e.add_argument("--marks", required=True)
    e.add_argument("--region", default="kernel")
    e.add_argument("--occurrence", type=int, default=0)
    e.add_argument("--baseline-window", type=float, default=0.05)
    e.add_argument("--threshold-factor", type=float, default=1.2)
    e.add_argument("--cpu-static-w", type=float)
    e.add_argument("--n-dofs", type=int)
    e.add_argument("--iterations", type=int)
    e.add_argument("--out")
    e.set_defaults(func=cmd_energy)

    m = sub.add_parser("monitor", help="record device power to power_<device>.csv until stopped")
    m.add_argument("--backend", choices=("powercap_files", "trace_replay"), default="powercap_files")
    m.add_argument("--root", help="powercap root or trace directory")
    m.add_argument("--period", type=float, default=1e-3)
    m.add_argument("--duration", type=float)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_monitor)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except BreakdownError as exc:
        print(f"sparsewatt: numerical breakdown: {exc}", file=sys.stderr)
        return EXIT_BREAKDOWN
    except CONFIG_ERRORS as exc:
        print(f"sparsewatt: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SparseWattError, OSError) as exc:
        print(f"sparsewatt: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
