"""Fixed-iteration CG and converged PCG+AMG sweeps.

CG runs exactly 100 iterations per solve so energy per iteration is
comparable across rank counts; PCG runs to the requested tolerance.
"""

import argparse
from pathlib import Path

from sparsewatt.harness import ExperimentConfig, emit_report, run_experiment


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="results/solvers")
    ap.add_argument("--base", type=int, default=32)
    ap.add_argument("--ranks", type=int, nargs="+", default=[1, 2, 4, 8])
    ap.add_argument("--runs", type=int, default=5)
    ap.add_argument("--mode", choices=["weak", "strong"], default="weak")
    ap.add_argument("--variant", choices=["hs", "fused"], default="hs")
    ap.add_argument("--rtol", type=float, default=1e-6)
    args = ap.parse_args(argv)

    setups = {
        "cg": dict(kernel="cg", solver={"maxit": 100, "mode": "fixed_iterations", "variant": args.variant}),
        "pcg": dict(kernel="pcg", solver={"rtol": args.rtol, "variant": args.variant}),
    }
    for name, kw in setups.items():
        cfg = ExperimentConfig.from_dict(dict(kw, mode=args.mode, base_dofs=args.base**3,
                                              rank_counts=args.ranks, runs=args.runs))
        report = run_experiment(cfg, progress=lambda r: print(f"{name} ranks={r['rank_count']} run={r['run']}"))
        emit_report(report, Path(args.out) / name)
        for p, agg in report.aggregates.items():
            print(f"  ranks={p:>2} setup={agg['setup_time_s']['mean']:.4f}s solve={agg['solve_time_s']['mean']:.4f}s "
                  f"iters={agg['iterations']['mean']:.0f} J/iter={agg['j_per_iteration']['mean']:.4g}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
