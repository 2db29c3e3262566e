import os
import stat
from pathlib import Path

import pytest
from hypothesis import given, strategies as st

from gemmbench import energy as en
from gemmbench.energy import EnergyDomain, EnergyReading
from gemmbench.errors import CapabilityError, CounterReadError, MeasurementError
from tests.conftest import make_zone


def domain(path, max_range=10**9, zone="package-0"):
    return EnergyDomain(zone, Path(path), max_range)


def test_no_powercap_tree(tmp_path):
    assert en.rapl_domains(tmp_path / "absent") == []


def test_discovers_package_and_dram(powercap_tree):
    doms = en.rapl_domains()
    assert [d.zone_id for d in doms] == ["package-0", "dram"]
    assert all(d.max_range_uj == 10**9 for d in doms)
    assert doms[0].counter_path == powercap_tree / "intel-rapl:0" / "energy_uj"


def test_discovers_flat_layout(tmp_path):
    make_zone(tmp_path, "intel-rapl:0", "package-0", 1)
    make_zone(tmp_path, "intel-rapl:1", "package-1", 2)
    make_zone(tmp_path, "intel-rapl:0:0", "dram", 3)
    make_zone(tmp_path, "intel-rapl:1:0", "dram", 4)
    ids = [d.zone_id for d in en.rapl_domains(tmp_path)]
    assert ids == ["package-0", "dram", "package-1", "dram@intel-rapl:1:0"]


def test_discovery_is_read_only(powercap_tree):
    before = {p: (p.stat().st_mtime_ns, p.read_bytes()) for p in powercap_tree.rglob("*") if p.is_file()}
    en.rapl_domains()
    after = {p: (p.stat().st_mtime_ns, p.read_bytes()) for p in powercap_tree.rglob("*") if p.is_file()}
    assert before == after


def test_unreadable_counter_is_capability_error(powercap_tree, monkeypatch):
    target = powercap_tree / "intel-rapl:0" / "energy_uj"
    original = Path.read_text

    def guarded(self, *args, **kwargs):
        if self == target:
            raise PermissionError(13, "Permission denied", str(self))
        return original(self, *args, **kwargs)

    monkeypatch.setattr(Path, "read_text", guarded)
    with pytest.raises(CapabilityError, match="permission denied"):
        en.rapl_domains()


@pytest.mark.skipif(os.geteuid() == 0, reason="root bypasses file permissions")
def test_unreadable_counter_chmod(powercap_tree):
    target = powercap_tree / "intel-rapl:0" / "energy_uj"
    target.chmod(0)
    try:
        with pytest.raises(CapabilityError):
            en.rapl_domains()
    finally:
        target.chmod(stat.S_IRUSR | stat.S_IWUSR)


def test_read_energy_uj(tmp_path):
    f = tmp_path / "energy_uj"
    f.write_text("123456\n")
    assert en.read_energy_uj(domain(f)) == 123456
    f.write_text("garbage")
    with pytest.raises(CounterReadError):
        en.read_energy_uj(domain(f))
    with pytest.raises(OSError):
        en.read_energy_uj(domain(tmp_path / "missing"))
    f.write_text("2000")
    with pytest.raises(CounterReadError):
        en.read_energy_uj(domain(f, max_range=1000))


def test_wrap_delta_cases():
    assert en.wrap_delta(100, 700, 10**9) == 600
    assert en.wrap_delta(999_999_900, 50, 10**9) == 150
    assert en.wrap_delta(5, 5, 10**9) == 0


@given(st.integers(1, 2**64 - 1).flatmap(
    lambda m: st.tuples(st.just(m), st.integers(0, m), st.integers(0, m))))
def test_wrap_delta_never_negative(triple):
    max_range, before, after = triple
    delta = en.wrap_delta(before, after, max_range)
    assert 0 <= delta <= max_range


def scripted_reader(values):
    it = iter(values)
    return lambda d: next(it)


def test_scoped_plain_delta():
    d = domain("/nonexistent")
    reading = en.scoped_energy([d], lambda: None, 1, reader=scripted_reader([100, 700]))
    assert reading.scope == "scoped"
    assert reading.joules == 6.0e-4
    assert reading.per_domain == {"package-0": 6.0e-4}


def test_scoped_wrap_delta():
    d = domain("/nonexistent")
    reading = en.scoped_energy([d], lambda: None, 1, reader=scripted_reader([999_999_900, 50]))
    assert reading.joules == pytest.approx(150e-6, abs=0)


def test_scoped_runs_work_reps_times_and_sums_domains():
    pkg, dram = domain("/x", zone="package-0"), domain("/y", zone="dram")
    calls = []
    ticks = iter([10.0, 12.0])
    reading = en.scoped_energy([pkg, dram], lambda: calls.append(1), 20,
                               reader=scripted_reader([0, 0, 3_000_000, 1_000_000]),
                               clock=lambda: next(ticks))
    assert len(calls) == 20
    assert reading.reps == 20
    assert reading.per_domain == {"package-0": 3.0, "dram": 1.0}
    assert reading.joules == sum(reading.per_domain.values()) == 4.0
    assert reading.elapsed_s == 2.0
    assert reading.mean_watts == 2.0
    assert reading.joules_per_rep == 0.2


def test_scoped_frozen_counters_zero(powercap_tree):
    reading = en.scoped_energy(en.rapl_domains(), lambda: None, 3)
    assert reading.joules == 0.0
    assert reading.mean_watts == 0.0


def test_scoped_read_failure_is_measurement_error():
    def broken(d):
        raise CounterReadError("gone")
    with pytest.raises(MeasurementError):
        en.scoped_energy([domain("/x")], lambda: None, 1, reader=broken)


def test_scoped_needs_domains():
    with pytest.raises(CapabilityError):
        en.scoped_energy([], lambda: None, 1)


def test_watts():
    assert en.watts(EnergyReading("scoped", 6.0, 2.0, {"p": 6.0})) == 3.0
    assert en.watts(EnergyReading("scoped", 0.0, 5.0, {"p": 0.0})) == 0.0
    with pytest.raises(ValueError):
        en.watts(EnergyReading("scoped", 1.0, 0.0, {"p": 1.0}))


def test_parse_pkg_ram_fixture(fixtures_dir):
    per_domain, warnings, elapsed = en.parse_perf_stat((fixtures_dir / "perf_stat_pkg_ram.txt").read_text())
    assert per_domain == {"pkg": 12.34, "ram": 3.21}
    assert warnings == [] and elapsed is None


def test_parse_not_supported_fixture(fixtures_dir):
    text = (fixtures_dir / "perf_stat_ram_not_supported.txt").read_text()
    per_domain, warnings, _ = en.parse_perf_stat(text)
    assert per_domain == {"pkg": 12.34}
    assert len(warnings) == 1 and "energy-ram" in warnings[0]


def test_parse_duration_fixture(fixtures_dir):
    per_domain, warnings, elapsed = en.parse_perf_stat((fixtures_dir / "perf_stat_with_duration.txt").read_text())
    assert per_domain == {"pkg": 7.5, "ram": 0.5}
    assert elapsed == pytest.approx(2.003338125)


def test_perf_command_shape():
    assert en.perf_command(["prog", "x"]) == [
        "perf", "stat", "-x", ";", "-e", "power/energy-pkg/,power/energy-ram/", "--", "prog", "x"]


def test_process_energy_tool_missing(monkeypatch):
    monkeypatch.setenv("GEMMBENCH_PERF_BIN", "no-such-perf-tool")
    with pytest.raises(CapabilityError, match="no-such-perf-tool"):
        en.process_energy(["true"])


def fake_perf(tmp_path, fixture: Path, exit_code=0):
    """Executable that replays a captured perf stderr, runs the wrapped command, and exits."""
    script = tmp_path / "fake-perf"
    script.write_text(
        "#!/bin/sh\n"
        "while [ \"$1\" != \"--\" ]; do shift; done; shift\n"
        "\"$@\"\n"
        f"cat '{fixture}' >&2\n"
        f"exit {exit_code}\n"
    )
    script.chmod(0o755)
    return str(script)


def test_process_energy_with_fake_tool(tmp_path, fixtures_dir, monkeypatch):
    monkeypatch.setenv("GEMMBENCH_PERF_BIN", fake_perf(tmp_path, fixtures_dir / "perf_stat_pkg_ram.txt"))
    reading = en.process_energy(["true"])
    assert reading.scope == "process"
    assert reading.per_domain == {"pkg": 12.34, "ram": 3.21}
    assert reading.joules == 12.34 + 3.21
    assert reading.elapsed_s > 0
    assert reading.warnings == []


def test_process_energy_not_supported_partial(tmp_path, fixtures_dir):
    perf = fake_perf(tmp_path, fixtures_dir / "perf_stat_ram_not_supported.txt")
    reading = en.process_energy(["true"], perf_bin=perf)
    assert reading.per_domain == {"pkg": 12.34}
    assert reading.warnings


def test_process_energy_uses_reported_elapsed(tmp_path, fixtures_dir):
    perf = fake_perf(tmp_path, fixtures_dir / "perf_stat_with_duration.txt")
    reading = en.process_energy(["true"], perf_bin=perf)
    assert reading.elapsed_s == pytest.approx(2.003338125)
    assert reading.mean_watts == pytest.approx(8.0 / 2.003338125)


def test_process_energy_child_failure(tmp_path, fixtures_dir):
    perf = fake_perf(tmp_path, fixtures_dir / "perf_stat_pkg_ram.txt", exit_code=3)
    with pytest.raises(MeasurementError, match="exited with 3"):
        en.process_energy(["true"], perf_bin=perf)


def test_reading_to_dict():
    r = EnergyReading("scoped", 4.0, 2.0, {"package-0": 3.0, "dram": 1.0}, reps=20)
    d = r.to_dict()
    assert d["mean_watts"] == 2.0 and d["joules_per_rep"] == 0.2 and d["reps"] == 20
