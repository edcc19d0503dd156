"""Static/dynamic energy accounting from power timelines.

Per device class (``gpu``, ``cpu``)::

    SE = SP * T        DE = TE - SE        DE_total = sum of DE over classes

GPU-class devices follow the timeline path: idle transitions are detected on
the trace, static power is the median of the idle samples, and TE integrates
the trace between the transitions. CPU-class devices follow the counter path:
T is the marked region, TE comes from counters (or the trace) over it, and the
static power is measured beforehand on idle data.

Accounting values are snapped to a common binary grid (``2**-g`` joules, time
in ``2**-20`` s) chosen so that every product and sum above is exact in IEEE
double precision. The identities then hold bit for bit, not just to rounding.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import DomainError, EstimationError, NoActivityError
from .sensors import PowerTimeline, Region, counter_to_energy

TIME_BITS = 20
MAX_ENERGY_BITS = 40


def device_class(device: str) -> str:
    return "gpu" if device.lower().startswith("gpu") else "cpu"


# ---------------------------------------------------------------------------
# Integration


def _prepared(timeline: PowerTimeline) -> PowerTimeline:
    tl = timeline.deduplicated()
    if len(tl) < 2:
        raise DomainError(f"{timeline.device}: need at least two samples to integrate")
    return tl


def _power_at(t, p, x):
    return np.interp(x, t, p)


def integrate(timeline: PowerTimeline, t0: float, t1: float) -> float:
    """Trapezoidal energy over ``[t0, t1]``, interpolating linearly at both ends."""
    tl = _prepared(timeline)
    t, p = tl.t, tl.p
    if not t0 < t1:
        raise DomainError(f"empty interval [{t0}, {t1}]")
    if t0 < t[0] or t1 > t[-1]:
        raise DomainError(f"[{t0}, {t1}] outside the timeline span [{t[0]}, {t[-1]}]")
    i = int(np.searchsorted(t, t0, side="right"))
    j = int(np.searchsorted(t, t1, side="left"))
    p0, p1 = _power_at(t, p, t0), _power_at(t, p, t1)
    if i > j - 1:
        return float(0.5 * (p0 + p1) * (t1 - t0))
    inner_t, inner_p = t[i:j], p[i:j]
    total = 0.5 * (p0 + inner_p[0]) * (inner_t[0] - t0)
    total += float(np.sum(0.5 * (inner_p[1:] + inner_p[:-1]) * np.diff(inner_t)))
    total += 0.5 * (inner_p[-1] + p1) * (t1 - inner_t[-1])
    return float(max(total, 0.0))


# ---------------------------------------------------------------------------
# Idle detection and static power


@dataclass(frozen=True)
class IdleTransitions:
    leave_idle_t: float
    return_idle_t: float

    def __post_init__(self):
        if not self.leave_idle_t < self.return_idle_t:
            raise DomainError("leave_idle_t must precede return_idle_t")


def _runs_start(above: np.ndarray, sustain: int) -> np.ndarray:
    """Indices ``i`` with ``above[i:i+sustain]`` all true."""
    if len(above) < sustain:
        return np.zeros(0, dtype=np.int64)
    window = np.convolve(above.astype(np.int64), np.ones(sustain, dtype=np.int64), "valid")
    return np.flatnonzero(window == sustain)


def detect_idle_transitions(
    timeline: PowerTimeline,
    baseline_window: float,
    threshold_factor: float = 1.2,
    sustain: int = 3,
) -> IdleTransitions:
    """First and last sample where power stays above ``factor * baseline`` for ``sustain`` samples.

    The baseline is the median power over the first ``baseline_window`` seconds.
    """
    tl = _prepared(timeline)
    t, p = tl.t, tl.p
    head = p[t <= t[0] + baseline_window]
    if len(head) == 0:
        raise EstimationError(f"{tl.device}: no samples in the baseline window")
    threshold = threshold_factor * float(np.median(head))
    starts = _runs_start(p > threshold, sustain)
    if len(starts) == 0:
        raise NoActivityError(f"{tl.device}: power never exceeds {threshold:.3f} W")
    leave = float(t[starts[0]])
    back = float(t[starts[-1] + sustain - 1])
    if not leave < back:
        raise NoActivityError(f"{tl.device}: activity shorter than one sample period")
    return IdleTransitions(leave, back)


def estimate_static_power(timeline: PowerTimeline, idle: IdleTransitions) -> float:
    """Median of the samples before leaving and after returning to idle."""
    tl = timeline.deduplicated()
    mask = (tl.t < idle.leave_idle_t) | (tl.t > idle.return_idle_t)
    if not mask.any():
        raise EstimationError(f"{tl.device}: idle windows contain no samples")
    return float(np.median(tl.p[mask]))


def static_power_before(timeline: PowerTimeline, t_begin: float) -> float:
    """Median of samples strictly before ``t_begin`` (idle pre-measurement)."""
    tl = timeline.deduplicated()
    pre = tl.p[tl.t < t_begin]
    if len(pre) == 0:
        raise EstimationError(f"{tl.device}: no idle samples before t={t_begin}")
    return float(np.median(pre))


# ---------------------------------------------------------------------------
# Decomposition


class Decomposition(NamedTuple):
    se: float
    de: float

    @property
    def flags(self) -> list[str]:
        return ["negative_DE"] if self.de < 0 else []


def decompose(te: float, sp: float, t: float) -> Decomposition:
    """``SE = SP * T`` and ``DE = TE - SE``; a negative DE is kept as-is."""
    if not t > 0:
        raise DomainError("execution time must be positive")
    if sp < 0:
        raise DomainError("static power must be non-negative")
    se = sp * t
    return Decomposition(se, te - se)


def _snap(x: float, bits: int) -> float:
    return math.ldexp(round(math.ldexp(x, bits)), -bits)


def accounting_grid_bits(magnitudes, n_terms: int = 2) -> int:
    """Energy grid exponent so that sums of ``n_terms`` values stay exact."""
    biggest = max([abs(m) for m in magnitudes] + [1.0])
    headroom = max(1, math.ceil(math.log2(max(n_terms, 2))))
    return min(MAX_ENERGY_BITS, 52 - headroom - math.ceil(math.log2(biggest + 1.0)))


# ---------------------------------------------------------------------------
# Reports


@dataclass
class ClassEnergy:
    te_j: float
    se_j: float
    de_j: float
    sp_w: float
    peak_w: float
    t_s: float
    flags: list = field(default_factory=list)
    devices: list = field(default_factory=list)


@dataclass
class EnergyReport:
    t_s: float
    classes: dict
    de_total_j: float
    metrics: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EnergyReport":
        classes = {k: ClassEnergy(**v) for k, v in d["classes"].items()}
        return cls(d["t_s"], classes, d["de_total_j"], dict(d.get("metrics", {})), list(d.get("flags", [])))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def check_identities(self) -> None:
        """Raise ``AssertionError`` if any accounting identity is violated bit-wise."""
        for name, c in self.classes.items():
            _require(c.se_j == c.sp_w * c.t_s, f"{name}: SE != SP*T")
            _require(c.de_j == c.te_j - c.se_j, f"{name}: DE != TE-SE")
            _require(c.te_j == c.se_j + c.de_j, f"{name}: TE != SE+DE")
        total = 0.0
        for c in self.classes.values():
            total += c.de_j
        _require(self.de_total_j == total, "DE_total != sum of class DE")


def _require(ok: bool, message: str) -> None:
    if not ok:
        raise AssertionError(message)


def assemble_report(raw: dict, region_t: float) -> EnergyReport:
    """Build an exact-accounting report from ``{class: dict(te, sp, t, peak, flags, devices)}``."""
    bits = accounting_grid_bits(
        [v["te"] for v in raw.values()] + [v["sp"] * v["t"] for v in raw.values()], len(raw)
    )
    classes = {}
    for name, v in raw.items():
        t_q = _snap(v["t"], TIME_BITS)
        if not t_q > 0:
            raise DomainError(f"{name}: execution time below the {2**-TIME_BITS} s resolution")
        sp_q = _snap(v["sp"], bits - TIME_BITS)
        te_q = _snap(v["te"], bits)
        se, de = decompose(te_q, sp_q, t_q)
        flags = list(v.get("flags", [])) + Decomposition(se, de).flags
        classes[name] = ClassEnergy(te_q, se, de, sp_q, float(v["peak"]), t_q, flags, list(v.get("devices", [])))
    total = 0.0
    for c in classes.values():
        total += c.de_j
    flags = sorted({f for c in classes.values() for f in c.flags})
    report = EnergyReport(float(region_t), classes, total, {}, flags)
    report.check_identities()
    return report


def region_peak(timeline: PowerTimeline, t0: float, t1: float) -> float:
    inside = (timeline.t >= t0) & (timeline.t <= t1)
    if not inside.any():
        return float(_power_at(timeline.t, timeline.p, 0.5 * (t0 + t1)))
    return float(timeline.p[inside].max())


def metrics(report: EnergyReport, n_dofs: int, iterations: int | None = None, timelines=None, region: Region | None = None) -> dict:
    """Energy per DOF and per iteration, and the peak power per class."""
    if n_dofs < 1:
        raise DomainError("n_dofs must be >= 1")
    out = {"j_per_dof": report.de_total_j / n_dofs}
    if iterations is not None:
        if iterations < 1:
            raise DomainError("iterations must be >= 1 for energy per iteration")
        out["j_per_iteration"] = report.de_total_j / iterations
    if timelines is not None and region is not None:
        peaks = {}
        for tl in timelines.values() if isinstance(timelines, dict) else timelines:
            cls = device_class(tl.device)
            peaks[cls] = max(peaks.get(cls, 0.0), region_peak(tl, region.t_begin, region.t_end))
        out["peak_w"] = peaks
    else:
        out["peak_w"] = {k: c.peak_w for k, c in report.classes.items()}
    return out


def _counter_energy_in(readings, t0, t1, wrap):
    inside = [r for r in readings if t0 <= r.t <= t1]
    if len(inside) < 2:
        return None
    return counter_to_energy(inside, wrap)


def build_energy_report(
    timelines,
    region: Region,
    *,
    baseline_window: float = 0.05,
    threshold_factor: float = 1.2,
    cpu_static_w: float | None = None,
    counters: dict | None = None,
    counter_wrap: dict | None = None,
    n_dofs: int | None = None,
    iterations: int | None = None,
) -> EnergyReport:
    """Full pipeline from recorded timelines and a marked region to a report."""
    if isinstance(timelines, dict):
        timelines = list(timelines.values())
    by_class: dict[str, list[PowerTimeline]] = {}
    for tl in timelines:
        by_class.setdefault(device_class(tl.device), []).append(tl)
    region_t = region.t_end - region.t_begin
    raw = {}
    for cls, tls in sorted(by_class.items()):
        flags: list[str] = []
        peak = max(region_peak(tl, region.t_begin, region.t_end) for tl in tls)
        devices = [tl.device for tl in tls]
        if cls == "gpu":
            windows, sps = [], []
            for tl in tls:
                try:
                    idle = detect_idle_transitions(tl, baseline_window, threshold_factor)
                    sps.append(estimate_static_power(tl, idle))
                except NoActivityError:
                    flags.append(f"no_idle_transition:{tl.device}")
                    idle = IdleTransitions(region.t_begin, region.t_end)
                    sps.append(static_power_before(tl, region.t_begin))
                windows.append(idle)
            t0 = min(w.leave_idle_t for w in windows)
            t1 = max(w.return_idle_t for w in windows)
            te = sum(integrate(tl, t0, t1) for tl in tls)
            raw[cls] = dict(te=te, sp=sum(sps), t=t1 - t0, peak=peak, flags=flags, devices=devices)
        else:
            t0, t1 = region.t_begin, region.t_end
            te = 0.0
            for tl in tls:
                e = None
                if counters and tl.device in counters:
                    wrap = (counter_wrap or {}).get(tl.device, 2**32)
                    e = _counter_energy_in(counters[tl.device], t0, t1, wrap)
                te += e if e is not None else integrate(tl, t0, t1)
            if cpu_static_w is not None:
                sp = cpu_static_w
            else:
                sp = sum(static_power_before(tl, t0) for tl in tls)
            raw[cls] = dict(te=te, sp=sp, t=t1 - t0, peak=peak, flags=flags, devices=devices)
    report = assemble_report(raw, region_t)
    if n_dofs is not None:
        report.metrics = metrics(report, n_dofs, iterations)
    return report
