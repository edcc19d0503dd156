"""Strong/weak scaling experiments with energy accounting.

For every rank count the harness sizes and assembles the problem, warms up,
starts the power sampler, runs the kernel inside a marked region, stops the
sampler and turns the recorded timelines into an :class:`EnergyReport`.
Assembly always finishes before the measured region begins.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import stencil as st
from .amg import AmgConfig, DistributedAmgPreconditioner, build_hierarchy
from .core import build_comm_plan, reassemble
from .energy import build_energy_report, device_class
from .errors import ConfigError, DomainError, SparseWattError
from .krylov import DistOperator, JacobiPreconditioner, SolveConfig, solve
from .sensors import (
    ActivityProfile,
    MarkStream,
    MonotonicClock,
    PowercapBackend,
    Sampler,
    SyntheticBackend,
    TraceReplayBackend,
    find_region,
    write_device_files,
    write_marks,
)
from .transport import run_ranks

KERNELS = ("spmv", "cg", "pcg")
PRECONDS = ("none", "jacobi", "amg")
REGION = "kernel"


@dataclass
class PowerConfig:
    backend: str = "synthetic"
    period: float = 1e-3
    output_dir: str | None = None
    idle_pad: float = 0.1
    baseline_window: float = 0.05
    threshold_factor: float = 1.2
    # synthetic backend: one gpu device per rank plus one cpu device
    gpu_static_w: float = 30.0
    gpu_dynamic_w: float = 70.0
    cpu_static_w: float = 15.0
    cpu_dynamic_w: float = 25.0
    noise_w: float = 0.0
    # trace_replay / powercap_files
    trace_dir: str | None = None
    powercap_root: str | None = None
    # measured beforehand on an idle node; None estimates it from pre-region samples
    cpu_static_w_measured: float | None = None

    def __post_init__(self):
        if self.backend not in ("synthetic", "trace_replay", "powercap_files"):
            raise ConfigError(f"unknown power backend {self.backend!r}")
        if not self.period > 0:
            raise ConfigError("power.period must be positive")
        if self.idle_pad < self.baseline_window:
            raise ConfigError("power.idle_pad must cover power.baseline_window")
        if self.backend == "trace_replay" and not self.trace_dir:
            raise ConfigError("trace_replay needs power.trace_dir")


@dataclass
class ExperimentConfig:
    kernel: str = "spmv"
    stencil: str = "7pt"
    mode: str = "weak"
    base_dofs: int = 32**3
    rank_counts: list = field(default_factory=lambda: [1, 2, 4, 8])
    runs: int = 5
    reps: int = 100
    solver: SolveConfig = field(default_factory=SolveConfig)
    precond: str | None = None
    amg: AmgConfig = field(default_factory=AmgConfig)
    power: PowerConfig = field(default_factory=PowerConfig)
    seed: int = 0
    overlap: bool = False
    rhs: str = "ones_solution"
    preset: str | None = None

    def __post_init__(self):
        if self.preset is not None:
            if self.preset not in st.PAPER_PRESETS:
                raise ConfigError(f"unknown preset {self.preset!r}; choose from {sorted(st.PAPER_PRESETS)}")
            self.base_dofs = st.PAPER_PRESETS[self.preset]
        if self.kernel not in KERNELS:
            raise ConfigError(f"unknown kernel {self.kernel!r}")
        if self.stencil not in st.STENCILS:
            raise ConfigError(f"unknown stencil {self.stencil!r}")
        if self.mode not in ("weak", "strong"):
            raise ConfigError(f"unknown scaling mode {self.mode!r}")
        if not self.rank_counts or any(int(r) < 1 for r in self.rank_counts):
            raise ConfigError("rank_counts must be a non-empty list of positive integers")
        if self.runs < 1 or self.reps < 1 or self.base_dofs < 1:
            raise ConfigError("runs, reps and base_dofs must be >= 1")
        if self.precond is None:
            self.precond = "amg" if self.kernel == "pcg" else "none"
        if self.precond not in PRECONDS:
            raise ConfigError(f"unknown preconditioner {self.precond!r}")
        if self.rhs not in ("ones_solution", "ones"):
            raise ConfigError(f"unknown rhs {self.rhs!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if "solver" in d:
                d["solver"] = SolveConfig(**d["solver"])
            if "amg" in d:
                d["amg"] = AmgConfig(**d["amg"])
            if "power" in d:
                d["power"] = PowerConfig(**d["power"])
            return cls(**d)
        except ConfigError:
            raise
        except (TypeError, DomainError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Reports


SCALARS = (
    "setup_time_s",
    "solve_time_s",
    "iterations",
    "te_gpu_j",
    "de_gpu_j",
    "te_cpu_j",
    "de_cpu_j",
    "de_total_j",
    "j_per_dof",
    "j_per_iteration",
    "peak_gpu_w",
    "peak_cpu_w",
)


def _scalars(record: dict) -> dict:
    e = record["energy"]
    cls = e["classes"]
    out = {
        "setup_time_s": record["setup_time_s"],
        "solve_time_s": record["solve_time_s"],
        "iterations": record["iterations"],
        "de_total_j": e["de_total_j"],
        "j_per_dof": e["metrics"]["j_per_dof"],
        "j_per_iteration": e["metrics"]["j_per_iteration"],
    }
    for name in ("gpu", "cpu"):
        c = cls.get(name)
        out[f"te_{name}_j"] = c["te_j"] if c else 0.0
        out[f"de_{name}_j"] = c["de_j"] if c else 0.0
        out[f"peak_{name}_w"] = c["peak_w"] if c else 0.0
    return out


@dataclass
class ExperimentReport:
    config: dict
    records: list
    aggregates: dict

    def to_dict(self) -> dict:
        return {"config": self.config, "records": self.records, "aggregates": self.aggregates}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentReport":
        return cls(d["config"], d["records"], d["aggregates"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def aggregate(records: list, rank_counts) -> dict:
    """Mean/min/max of every scalar metric over the runs of each rank count."""
    out = {}
    for p in rank_counts:
        rows = [_scalars(r) for r in records if r["rank_count"] == p]
        agg = {}
        for key in SCALARS:
            vals = [row[key] for row in rows]
            agg[key] = {
                "mean": float(sum(vals) / len(vals)),
                "min": float(min(vals)),
                "max": float(max(vals)),
                "n": len(vals),
            }
        out[str(p)] = agg
    return out


# ---------------------------------------------------------------------------
# Execution


def _make_backend(pc: PowerConfig, n_gpus: int, seed: int):
    """Backend plus the activity switches the workers toggle (synthetic only)."""
    if pc.backend == "synthetic":
        gpus = [ActivityProfile(pc.gpu_static_w, pc.gpu_dynamic_w) for _ in range(n_gpus)]
        cpu = ActivityProfile(pc.cpu_static_w, pc.cpu_dynamic_w)
        profiles = {f"gpu{i}": g for i, g in enumerate(gpus)}
        profiles["cpu0"] = cpu
        return SyntheticBackend(profiles, pc.noise_w, seed), gpus, cpu
    if pc.backend == "trace_replay":
        return TraceReplayBackend.from_directory(pc.trace_dir), [], None
    return PowercapBackend(pc.powercap_root), [], None


def _precondition(cfg: ExperimentConfig, op, hierarchy):
    if cfg.precond == "jacobi":
        return JacobiPreconditioner(op)
    if cfg.precond == "amg":
        return DistributedAmgPreconditioner(op, hierarchy)
    return None


def _worker(comm, blocks, plans, cfg: ExperimentConfig, A_global, gpus, cpu, marks, x_global):
    rank = comm.rank
    op = DistOperator(comm, blocks[rank], plans[rank], overlap=cfg.overlap)
    # Warm-up, outside the measured region.
    x = op.vector(x_global[slice(*blocks[rank].row_range)])
    op.apply(x)
    comm.barrier()
    if rank == 0:
        marks.mark(REGION, "begin")
        if cpu is not None:
            cpu.active.set()
    comm.barrier()
    if gpus:
        gpus[rank].active.set()
    setup = 0.0
    t0 = time.perf_counter()
    if cfg.kernel == "spmv":
        for _ in range(cfg.reps):
            y = op.apply(x)
        iterations = cfg.reps
        stats = None
        checksum = float(op.dots([(y, y)])[0])
    else:
        hierarchy = None
        if cfg.precond == "amg":
            ts = time.perf_counter()
            hierarchy = comm.bcast(build_hierarchy(A_global, cfg.amg) if rank == 0 else None)
            setup = time.perf_counter() - ts
        M = _precondition(cfg, op, hierarchy)
        b = op.vector(st.rhs(blocks[rank], cfg.rhs))
        t0 = time.perf_counter()
        _, stats = solve(op, b, None, cfg.solver, M)
        stats.setup_time = setup
        iterations = stats.iterations
        checksum = stats.final_relres
    elapsed = time.perf_counter() - t0
    if gpus:
        gpus[rank].active.clear()
    comm.barrier()
    if rank == 0:
        if cpu is not None:
            cpu.active.clear()
        marks.mark(REGION, "end")
    return {
        "setup_time_s": setup,
        "solve_time_s": elapsed,
        "iterations": iterations,
        "stats": stats.to_dict() if stats is not None else None,
        "checksum": checksum,
    }


def run_single(cfg: ExperimentConfig, rank_count: int, run: int, trace_dir: Path | None = None) -> dict:
    """One (rank_count, run) point; returns a JSON-ready record."""
    spec, grid = st.size_experiment(cfg.mode, cfg.base_dofs, rank_count, cfg.stencil)
    clock = MonotonicClock()
    marks = MarkStream(clock)

    marks.mark("assembly", "begin")
    blocks = st.assemble_all(spec, grid)
    plans = build_comm_plan([b.col_map for b in blocks], [b.row_range for b in blocks])
    A_global = reassemble(blocks) if cfg.precond == "amg" else None
    rng = np.random.default_rng(cfg.seed + 7919 * run)
    x_global = rng.standard_normal(spec.n_global)
    marks.mark("assembly", "end")

    pc = cfg.power
    backend, gpus, cpu = _make_backend(pc, rank_count, cfg.seed + run)
    sampler = Sampler(backend, pc.period, clock=clock).start()
    time.sleep(pc.idle_pad)
    results = run_ranks(_worker, rank_count, blocks, plans, cfg, A_global, gpus, cpu, marks, x_global)
    time.sleep(pc.idle_pad)
    timelines = sampler.stop()

    assembly = find_region(marks.marks, "assembly")
    region = find_region(marks.marks, REGION)
    if not assembly.t_end <= region.t_begin:
        raise SparseWattError("assembly overlaps the measured region")
    counters, wraps = None, None
    if isinstance(backend, PowercapBackend):
        counters, wraps = backend.readings, backend.ranges
    iterations = results[0]["iterations"]
    energy = build_energy_report(
        timelines,
        region,
        baseline_window=pc.baseline_window,
        threshold_factor=pc.threshold_factor,
        cpu_static_w=pc.cpu_static_w_measured,
        counters=counters,
        counter_wrap=wraps,
        n_dofs=spec.n_global,
        iterations=max(iterations, 1),
    )
    if trace_dir is not None:
        write_device_files(timelines, trace_dir)
        write_marks(trace_dir / "marks.csv", marks.marks)

    dofs = [a * b * c for a, b, c in st.subdomain_shapes(spec, grid)]
    stats = results[0]["stats"]
    return {
        "rank_count": rank_count,
        "run": run,
        "mesh": list(spec.dims),
        "grid": list(grid.dims),
        "n_global": spec.n_global,
        "dofs_per_rank_min": min(dofs),
        "dofs_per_rank_max": max(dofs),
        "setup_time_s": max(r["setup_time_s"] for r in results),
        "solve_time_s": max(r["solve_time_s"] for r in results),
        "iterations": iterations,
        "relres_history": stats["relres_history"] if stats else [],
        "final_relres": stats["final_relres"] if stats else None,
        "checksum": results[0]["checksum"],
        "assembly_end_t": assembly.t_end,
        "region_begin_t": region.t_begin,
        "region_end_t": region.t_end,
        "n_samples": {d: len(tl) for d, tl in timelines.items()},
        "energy": energy.to_dict(),
    }


def run_experiment(cfg: ExperimentConfig, out_dir=None, progress=None) -> ExperimentReport:
    records = []
    base = Path(out_dir) if out_dir is not None else None
    for p in cfg.rank_counts:
        for run in range(cfg.runs):
            trace_dir = None
            if cfg.power.output_dir is not None:
                root = Path(cfg.power.output_dir)
                if not root.is_absolute() and base is not None:
                    root = base / root
                trace_dir = root / f"ranks{p}_run{run}"
            try:
                records.append(run_single(cfg, p, run, trace_dir))
            except SparseWattError as exc:
                exc.args = (f"rank_count={p}, run={run}: {exc}",) + exc.args[1:]
                raise
            if progress is not None:
                progress(records[-1])
    return ExperimentReport(cfg.to_dict(), records, aggregate(records, cfg.rank_counts))


# ---------------------------------------------------------------------------
# Emission


CSV_COLUMNS = ("row_type", "rank_count", "run", "n_global", "dofs_per_rank_max") + SCALARS


def write_csv(report: ExperimentReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in report.records:
            s = _scalars(r)
            w.writerow(["run", r["rank_count"], r["run"], r["n_global"], r["dofs_per_rank_max"]] + [repr(s[k]) for k in SCALARS])
        for p, agg in report.aggregates.items():
            recs = [r for r in report.records if str(r["rank_count"]) == p]
            w.writerow(
                ["mean", p, "", recs[0]["n_global"], recs[0]["dofs_per_rank_max"]]
                + [repr(agg[k]["mean"]) for k in SCALARS]
            )


def emit_report(report: ExperimentReport, out_dir, formats=("json", "csv", "charts")) -> list[Path]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out}: {exc}") from exc
    written = []
    if "json" in formats:
        path = out / "report.json"
        path.write_text(report.to_json())
        written.append(path)
    if "csv" in formats:
        path = out / "report.csv"
        write_csv(report, path)
        written.append(path)
    if "charts" in formats:
        from .charts import write_charts

        written.extend(write_charts(report, out))
    return written


def read_report(path) -> ExperimentReport:
    return ExperimentReport.from_dict(json.loads(Path(path).read_text()))


__all__ = [
    "ExperimentConfig",
    "ExperimentReport",
    "PowerConfig",
    "aggregate",
    "device_class",
    "emit_report",
    "read_report",
    "run_experiment",
    "run_single",
    "write_csv",
]
