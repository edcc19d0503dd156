"""Weak and strong SpMV scaling sweeps on both stencils.

Writes one report directory (report.json, report.csv and charts) per
(stencil, mode) pair under --out.
"""

import argparse
from pathlib import Path

from sparsewatt.harness import ExperimentConfig, emit_report, run_experiment


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="results/spmv")
    ap.add_argument("--base", type=int, default=32, help="edge of the per-rank (weak) or global (strong) cube")
    ap.add_argument("--ranks", type=int, nargs="+", default=[1, 2, 4, 8])
    ap.add_argument("--runs", type=int, default=5)
    ap.add_argument("--reps", type=int, default=100)
    args = ap.parse_args(argv)

    for stencil in ("7pt", "27pt"):
        for mode in ("weak", "strong"):
            cfg = ExperimentConfig(kernel="spmv", stencil=stencil, mode=mode, base_dofs=args.base**3,
                                   rank_counts=args.ranks, runs=args.runs, reps=args.reps)
            out = Path(args.out) / f"{stencil}_{mode}"
            report = run_experiment(cfg, progress=lambda r: print(f"{stencil} {mode} ranks={r['rank_count']} run={r['run']}"))
            emit_report(report, out)
            for p, agg in report.aggregates.items():
                print(f"  ranks={p:>2} time={agg['solve_time_s']['mean']:.4f}s DE={agg['de_total_j']['mean']:.3f}J")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
