import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as hs

from sparsewatt.errors import BackendError, DomainError, InsufficientDataError, NestingError, ParseError
from sparsewatt.sensors import (
    POWER_DIR_ENV,
    CounterReading,
    MarkStream,
    MonotonicClock,
    PowercapBackend,
    PowerTimeline,
    RegionMark,
    Sampler,
    SyntheticBackend,
    TraceReplayBackend,
    VirtualClock,
    counter_delta_counts,
    counter_to_energy,
    find_region,
    read_device_file,
    read_device_files,
    read_epoch,
    read_marks,
    reconstruct_regions,
    write_device_file,
    write_device_files,
    write_epoch,
    write_marks,
)


def test_counter_examples():
    r = [CounterReading(0.0, 1000, 1e-6), CounterReading(1.0, 5000, 1e-6)]
    assert counter_to_energy(r) == pytest.approx(0.004, rel=1e-15)
    r = [CounterReading(0.0, 2**32 - 100, 1e-6), CounterReading(1.0, 50, 1e-6)]
    assert counter_to_energy(r) == pytest.approx(150e-6, rel=1e-15)
    with pytest.raises(InsufficientDataError):
        counter_to_energy(r[:1])
    with pytest.raises(DomainError):
        CounterReading(0.0, 1, 0.0)


def test_counter_wrap_vs_wide_integer_oracle():
    rng = np.random.default_rng(99)
    steps = rng.integers(0, 2**31, size=10**4, dtype=np.int64)
    wide = np.cumsum(steps, dtype=np.int64) + int(rng.integers(0, 2**32))
    raws = wide % 2**32
    assert np.sum(np.diff(wide // 2**32) > 0) >= 10
    assert counter_delta_counts(raws) == int(wide[-1] - wide[0])


def test_counter_rejects_out_of_range_raw():
    with pytest.raises(DomainError):
        counter_delta_counts([0, 2**32])


def test_device_file_naming_and_empty(tmp_path):
    tls = [PowerTimeline("gpu0", [0.0, 1.0], [1.0, 2.0]), PowerTimeline("gpu1")]
    paths = write_device_files(tls, tmp_path)
    assert [p.name for p in paths] == ["power_gpu0.csv", "power_gpu1.csv"]
    assert (tmp_path / "power_gpu1.csv").read_bytes() == b"timestamp_s,power_w\n"
    back = read_device_files(tmp_path)
    assert back["gpu0"] == tls[0] and len(back["gpu1"]) == 0


def test_device_file_round_trip_large(tmp_path):
    rng = np.random.default_rng(5)
    t = np.cumsum(rng.uniform(0, 2e-3, 10**5))
    p = rng.uniform(0, 400, 10**5)
    write_device_file(tmp_path / "a.csv", PowerTimeline("x", t, p))
    back = read_device_file(tmp_path / "a.csv", "x")
    # Values are stored with 6 fractional digits.
    assert np.abs(back.t - t).max() <= 5e-7 + 1e-12
    write_device_file(tmp_path / "b.csv", back)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert read_device_file(tmp_path / "b.csv", "x") == back


@pytest.mark.parametrize(
    "body,line",
    [
        ("timestamp_s,power_w\n0.0,1.0\n1.0\n", 3),
        ("timestamp_s,power_w\n0.0,1.0\n1.0,abc\n", 3),
        ("timestamp_s,power_w\n1.0,1.0\n0.5,1.0\n", 3),
        ("timestamp_s,power_w\n1.0,-1.0\n", 2),
        ("t,p\n", 1),
    ],
)
def test_device_file_parse_errors(tmp_path, body, line):
    path = tmp_path / "power_bad.csv"
    path.write_text(body)
    with pytest.raises(ParseError) as err:
        read_device_file(path)
    assert err.value.line == line
    assert f":{line}:" in str(err.value)


def test_marks_round_trip(tmp_path):
    marks = [RegionMark("solve", "begin", 0.5), RegionMark("spmv", "begin", 1.25), RegionMark("spmv", "end", 2.0), RegionMark("solve", "end", 3.0)]
    write_marks(tmp_path / "marks.csv", marks)
    assert read_marks(tmp_path / "marks.csv") == marks
    assert (tmp_path / "marks.csv").read_text().splitlines()[0] == "name,kind,timestamp_s"


def test_region_examples():
    s = MarkStream(VirtualClock())
    s.mark("spmv", "begin", 1.0)
    s.mark("spmv", "end", 2.0)
    assert find_region(s.marks, "spmv") == find_region(s.marks, "spmv", 0)
    r = find_region(s.marks, "spmv")
    assert (r.t_begin, r.t_end) == (1.0, 2.0)
    s.mark("solve", "begin", 3.0)
    s.mark("spmv", "begin", 3.5)
    s.mark("spmv", "end", 4.0)
    s.mark("solve", "end", 5.0)
    regs = [(r.name, r.t_begin, r.t_end) for r in s.regions()]
    assert regs == [("spmv", 1.0, 2.0), ("solve", 3.0, 5.0), ("spmv", 3.5, 4.0)]
    with pytest.raises(NestingError):
        s.mark("other", "end", 6.0)


def test_region_context_manager():
    clock = VirtualClock()
    s = MarkStream(clock)
    with s.region("a"):
        clock.advance(2.0)
    (r,) = s.regions()
    assert r.t_end - r.t_begin == 2.0


def bracket_oracle(seq):
    """Seq of (name, kind, t); match each end with the most recent open begin of that name."""
    open_ = {}
    out = []
    for name, kind, t in seq:
        if kind == "begin":
            open_.setdefault(name, []).append(t)
        else:
            out.append((open_[name].pop(), name, t))
    return sorted(out)


def random_nested(rng):
    names = ["a", "b", "c"]
    seq, stack, t = [], [], 0.0
    for _ in range(rng.integers(1, 20)):
        t += float(rng.integers(1, 4))
        if stack and rng.random() < 0.45:
            seq.append((stack.pop(), "end", t))
        else:
            name = names[rng.integers(0, 3)]
            stack.append(name)
            seq.append((name, "begin", t))
    while stack:
        t += 1.0
        seq.append((stack.pop(), "end", t))
    return seq


def test_nested_marks_vs_stack_oracle():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        seq = random_nested(rng)
        s = MarkStream(VirtualClock())
        for name, kind, t in seq:
            s.mark(name, kind, t)
        got = sorted((r.t_begin, r.name, r.t_end) for r in s.regions())
        assert got == bracket_oracle(seq)


def test_unclosed_region():
    with pytest.raises(NestingError):
        reconstruct_regions([RegionMark("a", "begin", 0.0)])


def test_synthetic_constant_real_time():
    backend = SyntheticBackend({"gpu0": lambda t: 100.0})
    sampler = Sampler(backend, period=0.01).start()
    time.sleep(1.0)
    tl = sampler.stop()["gpu0"]
    assert 95 <= len(tl) <= 105
    assert np.all(tl.p == 100.0)
    assert np.all(np.diff(tl.t) >= 0)


@given(hs.floats(0.001, 0.05), hs.floats(0.1, 2.0))
def test_virtual_sampler_count(period, duration):
    clock = VirtualClock()
    s = Sampler(SyntheticBackend({"d": lambda t: 1.0}), period, clock=clock).start()
    s.run_until(duration)
    tl = s.stop()["d"]
    assert len(tl) >= int(np.floor(duration / period)) - 1
    assert np.all(np.diff(tl.t) >= 0)


def test_trace_replay_identity(tmp_path):
    rng = np.random.default_rng(3)
    src = {
        "gpu0": PowerTimeline("gpu0", np.round(np.cumsum(rng.uniform(1e-4, 1e-3, 500)), 6), np.round(rng.uniform(20, 200, 500), 6)),
        "gpu1": PowerTimeline("gpu1", np.round(np.cumsum(rng.uniform(1e-4, 1e-3, 300)), 6), np.round(rng.uniform(20, 200, 300), 6)),
    }
    write_device_files(src, tmp_path)
    clock = VirtualClock()
    s = Sampler(TraceReplayBackend.from_directory(tmp_path), 1e-3, clock=clock).start()
    s.run_until(0.1)
    out = s.stop()
    assert out == src


def make_powercap_fixture(root, zones):
    """zones: name -> (max_range_uj, initial_uj)."""
    for i, (name, (rng_uj, _)) in enumerate(zones.items()):
        d = root / f"intel-rapl:{i}"
        d.mkdir(parents=True)
        (d / "name").write_text(name + "\n")
        (d / "max_energy_range_uj").write_text(f"{rng_uj}\n")
    return root


def test_powercap_fixture_power(tmp_path, monkeypatch):
    zones = {"package-0": (2**32, 2**32 - 3_000_000), "dram": (262143328850, 0)}
    watts = {"package-0": 42.0, "dram": 7.5}
    make_powercap_fixture(tmp_path, zones)
    monkeypatch.setenv(POWER_DIR_ENV, str(tmp_path))

    def hook(t):
        for i, (name, (rng_uj, start)) in enumerate(zones.items()):
            uj = (start + int(watts[name] * t * 1e6)) % rng_uj
            (tmp_path / f"intel-rapl:{i}" / "energy_uj").write_text(f"{uj}\n")

    hook(0.0)
    backend = PowercapBackend()
    assert backend.root == tmp_path
    clock = VirtualClock()
    s = Sampler(backend, 1e-3, clock=clock).start()
    s.run_until(0.5, hook)
    out = s.stop()
    for name, w in watts.items():
        assert np.all(np.abs(out[name].p - w) <= 0.01 * w)
        assert counter_to_energy(backend.readings[name], backend.ranges[name]) == pytest.approx(w * 0.5, rel=0.01)


def test_powercap_missing_path(tmp_path):
    missing = tmp_path / "nope"
    with pytest.raises(BackendError, match=str(missing)):
        Sampler(PowercapBackend(missing)).start()
    (tmp_path / "zone").mkdir()
    with pytest.raises(BackendError, match="energy_uj"):
        Sampler(PowercapBackend(tmp_path)).start()


def test_epoch_file(tmp_path):
    clock = MonotonicClock()
    write_epoch(tmp_path, clock)
    assert read_epoch(tmp_path) == clock.epoch
    # A second process adopting the epoch sees the same clock.
    other = MonotonicClock(read_epoch(tmp_path))
    assert abs(other.now() - clock.now()) < 1e-3


def test_timeline_dedup():
    tl = PowerTimeline("d", [0.0, 1.0, 1.0, 2.0], [1.0, 2.0, 3.0, 4.0]).deduplicated()
    assert tl.t.tolist() == [0.0, 1.0, 2.0] and tl.p.tolist() == [1.0, 3.0, 4.0]
    with pytest.raises(DomainError):
        PowerTimeline("d", [1.0, 0.0], [1.0, 1.0]).deduplicated()
