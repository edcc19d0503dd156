"""Static SVG charts of an :class:`ExperimentReport`.

Every file is reproducible byte-for-byte: fixed hash salt, no date metadata,
text kept as ``<text>`` elements so tick labels can be parsed back.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.ticker import FuncFormatter  # noqa: E402

CLASSES = ("gpu", "cpu")
COLORS = {"gpu": "#3b6ea8", "cpu": "#c8733a"}
RC = {"svg.hashsalt": "sparsewatt", "svg.fonttype": "none", "font.size": 9}


def _label(v, _pos=None):
    return f"{v:.12g}"


def _series(report, key):
    ranks = [int(p) for p in report.aggregates]
    agg = [report.aggregates[str(p)][key] for p in ranks]
    return ranks, [a["mean"] for a in agg], [a["min"] for a in agg], [a["max"] for a in agg]


def _save(fig, path: Path) -> Path:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def _line_chart(report, keys, ylabel, title, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for key, label in keys:
        ranks, mean, lo, hi = _series(report, key)
        err = [[m - a for m, a in zip(mean, lo)], [b - m for m, b in zip(mean, hi)]]
        ax.errorbar(ranks, mean, yerr=err, marker="o", capsize=3, label=label)
    ax.set_xscale("log", base=2)
    ax.set_xticks(ranks)
    ax.xaxis.set_major_formatter(FuncFormatter(lambda v, _p: f"{v:g}"))
    ax.set_xlabel("ranks")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    if len(keys) > 1:
        ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def stacked_de_chart(report, path: Path) -> Path:
    """Mean dynamic energy per rank count, stacked by device class.

    Positive shares stack upward from zero, negative ones downward, so the
    signed heights of a bar add up to DE_total. Each rectangle carries the id
    ``de-<ranks>-<class>``.
    """
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ranks = [int(p) for p in report.aggregates]
    xs = range(len(ranks))
    up = [0.0] * len(ranks)
    down = [0.0] * len(ranks)
    labelled = set()
    for cls in CLASSES:
        key = f"de_{cls}_j"
        for i, p in enumerate(ranks):
            v = report.aggregates[str(p)][key]["mean"]
            if v == 0.0:
                continue
            base = up[i] if v > 0 else down[i]
            label = None if cls in labelled else cls
            labelled.add(cls)
            (bar,) = ax.bar([i], [v], bottom=[base], width=0.6, color=COLORS[cls], label=label)
            bar.set_gid(f"de-{p}-{cls}")
            if v > 0:
                up[i] += v
            else:
                down[i] += v
    ax.axhline(0.0, color="black", linewidth=0.6)
    ax.set_xticks(list(xs), [str(p) for p in ranks])
    ax.yaxis.set_major_formatter(FuncFormatter(_label))
    ax.set_xlabel("ranks")
    ax.set_ylabel("dynamic energy [J]")
    ax.set_title("Dynamic energy by device class")
    if labelled:
        ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def write_charts(report, out_dir) -> list[Path]:
    out = Path(out_dir)
    with plt.rc_context(RC):
        paths = [
            _line_chart(report, [("solve_time_s", "solve"), ("setup_time_s", "setup")], "time [s]", "Execution time", out / "time_vs_ranks.svg"),
            stacked_de_chart(report, out / "de_breakdown.svg"),
            _line_chart(report, [("j_per_dof", "J/DOF")], "J/DOF", "Energy per degree of freedom", out / "j_per_dof.svg"),
            _line_chart(report, [("j_per_iteration", "J/iteration")], "J/iteration", "Energy per iteration", out / "j_per_iteration.svg"),
            _line_chart(report, [("peak_gpu_w", "gpu"), ("peak_cpu_w", "cpu")], "power [W]", "Peak power", out / "peak_power.svg"),
        ]
    return paths
