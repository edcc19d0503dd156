"""Power sampling, region marks and the on-disk trace formats.

A :class:`Sampler` polls a backend at a fixed period and keeps one timeline
per device. Backends:

* ``synthetic``: programmed power profiles ``p(t)`` per device, optional noise.
* ``trace_replay``: re-emits recorded timelines sample by sample.
* ``powercap_files``: a Linux-powercap-shaped tree of ``<zone>/energy_uj``
  cumulative counters; power is the wrap-corrected energy delta over time.

Marks and samples share one clock so regions can be projected onto timelines.
With a :class:`VirtualClock` the sampler is driven explicitly via
:meth:`Sampler.run_until`, which makes long traces cheap and deterministic.
"""

from __future__ import annotations

import os
import re
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BackendError, DomainError, InsufficientDataError, NestingError, ParseError

POWER_DIR_ENV = "SPARSEWATT_POWER_DIR"
DEFAULT_POWERCAP_ROOT = "/sys/class/powercap"
COUNTER_WRAP = 2**32
POWER_HEADER = "timestamp_s,power_w"
MARKS_HEADER = "name,kind,timestamp_s"
EPOCH_FILE = "epoch.txt"
_DEVICE_RE = re.compile(r"^[A-Za-z0-9_.:-]+$")


@dataclass(frozen=True)
class PowerSample:
    t: float
    p: float
    device: str


@dataclass(frozen=True)
class RegionMark:
    name: str
    kind: str
    t: float


@dataclass(frozen=True)
class CounterReading:
    t: float
    raw: int
    unit: float

    def __post_init__(self):
        if not self.unit > 0:
            raise DomainError("counter unit must be positive")


@dataclass(frozen=True)
class Region:
    name: str
    t_begin: float
    t_end: float


class PowerTimeline:
    """Time-sorted power samples of one device."""

    def __init__(self, device: str, t=(), p=()):
        self.device = device
        self.t = np.asarray(t, dtype=np.float64)
        self.p = np.asarray(p, dtype=np.float64)
        if self.t.shape != self.p.shape or self.t.ndim != 1:
            raise DomainError("timestamps and powers must be equal-length 1-D arrays")

    def __len__(self) -> int:
        return len(self.t)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, PowerTimeline)
            and self.device == other.device
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.p, other.p)
        )

    def __repr__(self) -> str:
        return f"PowerTimeline({self.device!r}, n={len(self)})"

    @classmethod
    def from_samples(cls, device: str, samples) -> "PowerTimeline":
        samples = list(samples)
        return cls(device, [s.t for s in samples], [s.p for s in samples])

    def samples(self) -> list[PowerSample]:
        return [PowerSample(float(t), float(p), self.device) for t, p in zip(self.t, self.p)]

    def deduplicated(self) -> "PowerTimeline":
        """Strictly increasing timestamps; the last sample wins on ties."""
        if len(self.t) and np.any(np.diff(self.t) < 0):
            raise DomainError(f"{self.device}: timestamps decrease")
        keep = np.ones(len(self.t), dtype=bool)
        keep[:-1] = np.diff(self.t) > 0
        return PowerTimeline(self.device, self.t[keep], self.p[keep])

    @property
    def span(self) -> tuple[float, float]:
        return float(self.t[0]), float(self.t[-1])


# ---------------------------------------------------------------------------
# Counters


def counter_delta_counts(raws, wrap: int = COUNTER_WRAP) -> int:
    """Total wrap-corrected count increase over a sequence of raw readings."""
    total = 0
    prev = None
    for raw in raws:
        raw = int(raw)
        if not 0 <= raw < wrap:
            raise DomainError(f"raw counter value {raw} outside [0, {wrap})")
        if prev is not None:
            delta = raw - prev
            if delta < 0:
                delta += wrap
            total += delta
        prev = raw
    return total


def counter_to_energy(readings, wrap: int = COUNTER_WRAP) -> float:
    """Joules accumulated across cumulative counter readings."""
    readings = list(readings)
    if len(readings) < 2:
        raise InsufficientDataError("need at least two counter readings")
    for a, b in zip(readings, readings[1:]):
        if not b.t > a.t:
            raise DomainError("counter reading timestamps must increase")
    unit = readings[0].unit
    if any(r.unit != unit for r in readings):
        raise DomainError("mixed counter units")
    return counter_delta_counts((r.raw for r in readings), wrap) * unit


# ---------------------------------------------------------------------------
# Clocks


class MonotonicClock:
    """Seconds since ``epoch`` on the system-wide monotonic clock."""

    def __init__(self, epoch: float | None = None):
        self.epoch = time.monotonic() if epoch is None else epoch

    def now(self) -> float:
        return time.monotonic() - self.epoch

    __call__ = now


class VirtualClock:
    def __init__(self, start: float = 0.0):
        self._t = float(start)
        self._lock = threading.Lock()

    def now(self) -> float:
        return self._t

    __call__ = now

    def advance(self, dt: float) -> float:
        with self._lock:
            self._t += dt
            return self._t

    def set(self, t: float) -> None:
        with self._lock:
            self._t = float(t)


# ---------------------------------------------------------------------------
# Backends


class SyntheticBackend:
    """Programmed power per device: ``profiles[device](t) -> watts``.

    ``noise`` adds uniform noise in ``[-noise, noise]`` from a seeded generator;
    results are clipped at zero.
    """

    name = "synthetic"

    def __init__(self, profiles: dict, noise: float = 0.0, seed: int = 0):
        self.profiles = dict(profiles)
        self.noise = noise
        self._rng = np.random.default_rng(seed)

    def devices(self) -> list[str]:
        return list(self.profiles)

    def open(self) -> None:
        pass

    def poll(self, t: float, devices) -> list[tuple[str, float, float]]:
        out = []
        for dev in devices:
            p = float(self.profiles[dev](t))
            if self.noise:
                p += self._rng.uniform(-self.noise, self.noise)
            out.append((dev, t, max(p, 0.0)))
        return out

    def flush(self, devices) -> list:
        return []


class ActivityProfile:
    """Static power plus a dynamic term while ``active`` is set.

    Lets a synthetic device follow the real workload: the harness toggles
    ``active`` at region boundaries.
    """

    def __init__(self, static_w: float, dynamic_w: float):
        self.static_w = static_w
        self.dynamic_w = dynamic_w
        self.active = threading.Event()

    def __call__(self, t: float) -> float:
        return self.static_w + (self.dynamic_w if self.active.is_set() else 0.0)


class TraceReplayBackend:
    """Re-emits recorded timelines; samples become visible once ``t`` passes them."""

    name = "trace_replay"

    def __init__(self, timelines: dict):
        self.timelines = dict(timelines)
        self._cursor = {d: 0 for d in self.timelines}

    @classmethod
    def from_directory(cls, directory) -> "TraceReplayBackend":
        return cls(read_device_files(directory))

    def devices(self) -> list[str]:
        return list(self.timelines)

    def open(self) -> None:
        self._cursor = {d: 0 for d in self.timelines}

    def _emit(self, dev, stop):
        tl = self.timelines[dev]
        i = self._cursor[dev]
        out = [(dev, float(tl.t[k]), float(tl.p[k])) for k in range(i, stop)]
        self._cursor[dev] = max(i, stop)
        return out

    def poll(self, t: float, devices) -> list:
        out = []
        for dev in devices:
            stop = int(np.searchsorted(self.timelines[dev].t, t, side="right"))
            out.extend(self._emit(dev, stop))
        return out

    def flush(self, devices) -> list:
        out = []
        for dev in devices:
            out.extend(self._emit(dev, len(self.timelines[dev])))
        return out


class PowercapBackend:
    """Reads ``<root>/<zone>/energy_uj`` counters (microjoules, wrapping)."""

    name = "powercap_files"

    def __init__(self, root=None):
        self.root = Path(root or os.environ.get(POWER_DIR_ENV) or DEFAULT_POWERCAP_ROOT)
        self.zones: dict[str, Path] = {}
        self.ranges: dict[str, int] = {}
        self.readings: dict[str, list[CounterReading]] = {}
        self._last: dict[str, tuple[float, int]] = {}

    def _discover(self):
        if not self.root.is_dir():
            raise BackendError(f"powercap root not found: {self.root}")
        zones = {}
        for counter in sorted(self.root.glob("*/energy_uj")):
            zone = counter.parent
            name_file = zone / "name"
            name = name_file.read_text().strip() if name_file.exists() else zone.name
            if name in zones:
                name = f"{name}.{zone.name}"
            zones[name] = zone
        if not zones:
            raise BackendError(f"no energy counters found: {self.root}/*/energy_uj")
        return zones

    def devices(self) -> list[str]:
        if not self.zones:
            self.zones = self._discover()
        return list(self.zones)

    def open(self) -> None:
        self.zones = self._discover()
        for name, zone in self.zones.items():
            rng = zone / "max_energy_range_uj"
            self.ranges[name] = int(rng.read_text()) if rng.exists() else COUNTER_WRAP
            self.readings[name] = []
        self._last = {}

    def _read(self, name) -> int:
        path = self.zones[name] / "energy_uj"
        try:
            return int(path.read_text())
        except FileNotFoundError:
            raise BackendError(f"energy counter vanished: {path}") from None

    def poll(self, t: float, devices) -> list:
        out = []
        for dev in devices:
            raw = self._read(dev)
            prev = self._last.get(dev)
            if prev is not None and t <= prev[0]:
                continue
            self.readings[dev].append(CounterReading(t, raw, 1e-6))
            self._last[dev] = (t, raw)
            if prev is None:
                continue
            delta = raw - prev[1]
            if delta < 0:
                delta += self.ranges[dev]
            out.append((dev, t, delta * 1e-6 / (t - prev[0])))
        return out

    def flush(self, devices) -> list:
        return []


def make_backend(kind: str, **kwargs):
    if kind == "synthetic":
        return SyntheticBackend(**kwargs)
    if kind == "trace_replay":
        if "directory" in kwargs:
            return TraceReplayBackend.from_directory(kwargs["directory"])
        return TraceReplayBackend(**kwargs)
    if kind == "powercap_files":
        return PowercapBackend(**kwargs)
    raise BackendError(f"unknown power backend {kind!r}")


# ---------------------------------------------------------------------------
# Sampler


class Sampler:
    def __init__(self, backend, period: float = 1e-3, devices=None, clock=None):
        if not period > 0:
            raise DomainError("sampling period must be positive")
        self.backend = backend
        self.period = period
        self.clock = clock or MonotonicClock()
        self._devices = list(devices) if devices is not None else None
        self._buf: dict[str, tuple[list, list]] = {}
        self._stop = threading.Event()
        self._thread = None
        self._running = False

    @property
    def devices(self) -> list[str]:
        return self._devices

    def start(self) -> "Sampler":
        self.backend.open()
        if self._devices is None:
            self._devices = self.backend.devices()
        self._buf = {d: ([], []) for d in self._devices}
        self._running = True
        if not isinstance(self.clock, VirtualClock):
            self._stop.clear()
            self._thread = threading.Thread(target=self._loop, name="sampler", daemon=True)
            self._thread.start()
        return self

    def _record(self, items):
        for dev, t, p in items:
            ts, ps = self._buf[dev]
            if ts and t < ts[-1]:
                continue
            ts.append(t)
            ps.append(p)

    def step(self) -> None:
        self._record(self.backend.poll(self.clock.now(), self._devices))

    def _loop(self):
        deadline = self.clock.now()
        while not self._stop.is_set():
            self.step()
            deadline += self.period
            now = self.clock.now()
            if deadline < now - self.period:
                deadline = now
            self._stop.wait(max(0.0, deadline - now))

    def run_until(self, t_end: float, hook=None) -> None:
        """Drive a virtual clock: sample every period until ``t_end``.

        ``hook(t)`` runs before each sample, e.g. to update fixture counters.
        """
        if not isinstance(self.clock, VirtualClock):
            raise DomainError("run_until needs a VirtualClock")
        n = int(np.floor((t_end - self.clock.now()) / self.period + 1e-9))
        t0 = self.clock.now()
        for k in range(n + 1):
            self.clock.set(t0 + k * self.period)
            if hook is not None:
                hook(self.clock.now())
            self.step()

    def snapshot(self) -> dict[str, PowerTimeline]:
        return {d: PowerTimeline(d, list(ts), list(ps)) for d, (ts, ps) in self._buf.items()}

    def stop(self) -> dict[str, PowerTimeline]:
        if self._thread is not None:
            self._stop.set()
            self._thread.join()
            self._thread = None
        if self._running:
            self.step()
            self._record(self.backend.flush(self._devices))
            self._running = False
        return self.snapshot()


def start_sampler(backend, period: float = 1e-3, devices=None, clock=None) -> Sampler:
    return Sampler(backend, period, devices, clock).start()


# ---------------------------------------------------------------------------
# Marks


class MarkStream:
    """Append-only, thread-safe stream of region marks."""

    def __init__(self, clock=None):
        self.clock = clock or MonotonicClock()
        self._marks: list[RegionMark] = []
        self._open: dict[str, int] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._marks)

    @property
    def marks(self) -> list[RegionMark]:
        with self._lock:
            return list(self._marks)

    def mark(self, name: str, kind: str, t: float | None = None) -> RegionMark:
        if kind not in ("begin", "end"):
            raise DomainError(f"mark kind must be 'begin' or 'end', got {kind!r}")
        with self._lock:
            stamp = self.clock.now() if t is None else float(t)
            if self._marks and stamp < self._marks[-1].t:
                raise DomainError("marks must be appended in time order")
            depth = self._open.get(name, 0)
            if kind == "end" and depth == 0:
                raise NestingError(f"end of region {name!r} without a begin")
            self._open[name] = depth + (1 if kind == "begin" else -1)
            m = RegionMark(name, kind, stamp)
            self._marks.append(m)
            return m

    def region(self, name: str):
        return _RegionContext(self, name)

    def regions(self) -> list[Region]:
        return reconstruct_regions(self.marks)


class _RegionContext:
    def __init__(self, stream, name):
        self.stream, self.name = stream, name

    def __enter__(self):
        self.stream.mark(self.name, "begin")
        return self

    def __exit__(self, *exc):
        self.stream.mark(self.name, "end")
        return False


def mark_region(stream: MarkStream, name: str, kind: str) -> RegionMark:
    return stream.mark(name, kind)


def reconstruct_regions(marks) -> list[Region]:
    """Pair begin/end marks per name (innermost first); sorted by begin time."""
    stacks: dict[str, list[float]] = {}
    out = []
    for m in marks:
        if m.kind == "begin":
            stacks.setdefault(m.name, []).append(m.t)
        elif m.kind == "end":
            stack = stacks.get(m.name)
            if not stack:
                raise NestingError(f"end of region {m.name!r} without a begin")
            out.append((stack.pop(), len(out), m.name, m.t))
        else:
            raise DomainError(f"bad mark kind {m.kind!r}")
    unclosed = [n for n, s in stacks.items() if s]
    if unclosed:
        raise NestingError(f"regions never closed: {sorted(unclosed)}")
    out.sort()
    return [Region(name, t0, t1) for t0, _, name, t1 in out]


def find_region(marks, name: str, occurrence: int = 0) -> Region:
    hits = [r for r in reconstruct_regions(marks) if r.name == name]
    if len(hits) <= occurrence:
        raise DomainError(f"region {name!r} (occurrence {occurrence}) not found")
    return hits[occurrence]


# ---------------------------------------------------------------------------
# Files


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def device_filename(device: str) -> str:
    if not _DEVICE_RE.match(device):
        raise DomainError(f"device id {device!r} is not filename-safe")
    return f"power_{device}.csv"


def write_device_file(path, timeline: PowerTimeline) -> None:
    lines = [POWER_HEADER]
    lines.extend(f"{_fmt(t)},{_fmt(p)}" for t, p in zip(timeline.t.tolist(), timeline.p.tolist()))
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def write_device_files(timelines, directory) -> list[Path]:
    """One ``power_<device>.csv`` per timeline; values rounded to 6 decimals."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if isinstance(timelines, dict):
        timelines = list(timelines.values())
    paths = []
    for tl in timelines:
        path = directory / device_filename(tl.device)
        write_device_file(path, tl)
        paths.append(path)
    return paths


def _read_csv(path, header, ncols):
    with open(path, newline="") as fh:
        text = fh.read()
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or lines[0] != header:
        raise ParseError(f"expected header {header!r}", path, 1)
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != ncols:
            raise ParseError(f"expected {ncols} fields, got {len(parts)}", path, lineno)
        yield lineno, parts


def read_device_file(path, device: str | None = None) -> PowerTimeline:
    path = Path(path)
    if device is None:
        device = path.stem[len("power_"):]
    t, p = [], []
    for lineno, (ts, ps) in _read_csv(path, POWER_HEADER, 2):
        try:
            t.append(float(ts))
            p.append(float(ps))
        except ValueError:
            raise ParseError(f"non-numeric sample {ts!r},{ps!r}", path, lineno) from None
        if len(t) > 1 and t[-1] < t[-2]:
            raise ParseError("timestamps decrease", path, lineno)
        if p[-1] < 0:
            raise ParseError("negative power", path, lineno)
    return PowerTimeline(device, t, p)


def read_device_files(directory) -> dict[str, PowerTimeline]:
    files = sorted(Path(directory).glob("power_*.csv"))
    out = {}
    for f in files:
        tl = read_device_file(f)
        out[tl.device] = tl
    return out


def write_marks(path, marks) -> None:
    lines = [MARKS_HEADER]
    for m in marks:
        if "," in m.name or "\n" in m.name:
            raise DomainError(f"region name {m.name!r} cannot contain ',' or newlines")
        lines.append(f"{m.name},{m.kind},{_fmt(m.t)}")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_marks(path) -> list[RegionMark]:
    out = []
    for lineno, (name, kind, ts) in _read_csv(path, MARKS_HEADER, 3):
        if kind not in ("begin", "end"):
            raise ParseError(f"bad mark kind {kind!r}", path, lineno)
        try:
            out.append(RegionMark(name, kind, float(ts)))
        except ValueError:
            raise ParseError(f"non-numeric timestamp {ts!r}", path, lineno) from None
    return out


def write_epoch(directory, clock: MonotonicClock) -> Path:
    """Record the monitor's t=0 so an external application can share its clock."""
    path = Path(directory) / EPOCH_FILE
    path.write_text(f"monotonic_epoch_s={clock.epoch!r}\n")
    return path


def read_epoch(directory) -> float:
    path = Path(directory) / EPOCH_FILE
    text = path.read_text().strip()
    key, _, value = text.partition("=")
    if key != "monotonic_epoch_s":
        raise ParseError("expected monotonic_epoch_s=<seconds>", path, 1)
    return float(value)
