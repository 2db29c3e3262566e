"""RAPL energy under two attribution scopes.

``scoped`` brackets only the multiplication call with powercap counter
reads. ``process`` wraps a whole child process in ``perf stat`` and takes
its package and DRAM totals, so operand generation and interpreter start-up
are charged too.
"""

from __future__ import annotations

import logging
import os
import shutil
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

from gemmbench.errors import CapabilityError, CounterReadError, MeasurementError

log = logging.getLogger(__name__)

DEFAULT_POWERCAP_ROOT = "/sys/class/powercap"
POWERCAP_ENV = "GEMMBENCH_POWERCAP_ROOT"
PERF_ENV = "GEMMBENCH_PERF_BIN"
PERF_EVENTS = ("power/energy-pkg/", "power/energy-ram/")
UNSUPPORTED_SENTINELS = ("<not supported>", "<not counted>")

PERMISSION_HINT = (
    "energy_uj is root-only on recent kernels; run as root or grant read access, "
    "e.g. `sudo chmod a+r /sys/class/powercap/intel-rapl:*/energy_uj`"
)


@dataclass(frozen=True)
class EnergyDomain:
    zone_id: str
    counter_path: Path
    max_range_uj: int


@dataclass
class EnergyReading:
    scope: str
    joules: float
    elapsed_s: float
    per_domain: dict[str, float]
    reps: int = 1
    warnings: list[str] = field(default_factory=list)
    provenance: str = "rapl"

    @property
    def mean_watts(self) -> float:
        return watts(self)

    @property
    def joules_per_rep(self) -> float:
        return self.joules / self.reps

    def to_dict(self) -> dict:
        return {
            "scope": self.scope,
            "joules": self.joules,
            "joules_per_rep": self.joules_per_rep,
            "elapsed_s": self.elapsed_s,
            "mean_watts": self.mean_watts if self.elapsed_s > 0 else None,
            "per_domain": dict(self.per_domain),
            "reps": self.reps,
            "warnings": list(self.warnings),
            "provenance": self.provenance,
        }


def watts(reading: EnergyReading) -> float:
    if reading.elapsed_s <= 0:
        raise ValueError(f"elapsed time must be positive, got {reading.elapsed_s}")
    return reading.joules / reading.elapsed_s


def powercap_root() -> Path:
    return Path(os.environ.get(POWERCAP_ENV, DEFAULT_POWERCAP_ROOT))


def _wanted(name: str) -> bool:
    return name.startswith("package") or name == "dram"


def _read_counter_file(path: Path) -> str:
    try:
        return path.read_text()
    except PermissionError as exc:
        raise CapabilityError(f"cannot read {path}: permission denied. {PERMISSION_HINT}") from exc


def rapl_domains(root: Optional[Path] = None) -> list[EnergyDomain]:
    """Package and DRAM powercap zones, or [] when the tree is absent.

    Zones are found both as flat ``intel-rapl:*`` entries (the
    ``/sys/class/powercap`` view) and nested under their parent package.
    """
    root = Path(root) if root is not None else powercap_root()
    if not root.is_dir():
        return []
    zone_dirs = {}
    for path in sorted(root.rglob("intel-rapl:*")):
        if path.is_dir() and (path / "energy_uj").exists():
            zone_dirs.setdefault(path.name, path)
    domains: list[EnergyDomain] = []
    seen: set[str] = set()
    for dirname in sorted(zone_dirs):
        zone = zone_dirs[dirname]
        try:
            name = (zone / "name").read_text().strip()
        except FileNotFoundError:
            continue
        if not _wanted(name):
            continue
        _read_counter_file(zone / "energy_uj")
        max_range = int(_read_counter_file(zone / "max_energy_range_uj").strip())
        zone_id = name if name not in seen else f"{name}@{dirname}"
        seen.add(zone_id)
        domains.append(EnergyDomain(zone_id, zone / "energy_uj", max_range))
    return domains


def read_energy_uj(domain: EnergyDomain) -> int:
    try:
        text = domain.counter_path.read_text()
    except OSError as exc:
        raise CounterReadError(f"cannot read {domain.counter_path}: {exc}") from exc
    try:
        value = int(text.strip())
    except ValueError:
        raise CounterReadError(f"{domain.counter_path}: not an integer counter: {text.strip()!r}") from None
    if value < 0 or value > domain.max_range_uj:
        raise CounterReadError(f"{domain.counter_path}: {value} outside [0, {domain.max_range_uj}]")
    return value


def wrap_delta(before: int, after: int, max_range_uj: int) -> int:
    """Counter advance between two reads, allowing for one wraparound."""
    if after >= before:
        return after - before
    return after + (max_range_uj - before)


def scoped_energy(domains: Sequence[EnergyDomain], work: Callable[[], object], reps: int,
                  reader: Callable[[EnergyDomain], int] = read_energy_uj,
                  clock: Callable[[], float] = time.perf_counter) -> EnergyReading:
    """Counter deltas bracketing ``reps`` executions of ``work``.

    The returned joules are totals over all reps; ``joules_per_rep`` gives
    the per-call figure.
    """
    if not domains:
        raise CapabilityError("scoped energy needs at least one RAPL domain")
    if reps < 1:
        raise ValueError(f"reps must be >= 1, got {reps}")
    try:
        before = [reader(d) for d in domains]
        t0 = clock()
        for _ in range(reps):
            work()
        t1 = clock()
        after = [reader(d) for d in domains]
    except (CounterReadError, OSError) as exc:
        raise MeasurementError(f"energy counter read failed: {exc}") from exc
    per_domain = {
        d.zone_id: wrap_delta(b0, b1, d.max_range_uj) / 1e6
        for d, b0, b1 in zip(domains, before, after)
    }
    return EnergyReading("scoped", sum(per_domain.values()), t1 - t0, per_domain, reps=reps)


def _event_domain(event: str) -> str:
    # power/energy-pkg/ -> pkg
    name = event.strip("/").split("/")[-1]
    return name[len("energy-"):] if name.startswith("energy-") else name


def parse_perf_stat(text: str) -> tuple[dict[str, float], list[str], Optional[float]]:
    """Parse ``perf stat -x ';'`` output.

    Returns (joules per domain, warnings, elapsed seconds if perf reported it).
    Records marked ``<not supported>`` or ``<not counted>`` are dropped with a
    warning rather than read as zero.
    """
    per_domain: dict[str, float] = {}
    warnings: list[str] = []
    elapsed = None
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "seconds time elapsed" in line:
            try:
                elapsed = float(line.split()[0])
            except ValueError:
                pass
            continue
        fields = line.split(";")
        if len(fields) < 3:
            continue
        value, unit, event = fields[0].strip(), fields[1].strip(), fields[2].strip()
        if event == "duration_time":
            try:
                elapsed = float(value) / 1e9
            except ValueError:
                pass
            continue
        if not event.startswith("power/"):
            continue
        domain = _event_domain(event)
        if value in UNSUPPORTED_SENTINELS:
            warnings.append(f"{event} {value.strip('<>')}")
            continue
        try:
            joules = float(value)
        except ValueError:
            warnings.append(f"{event}: unparseable value {value!r}")
            continue
        if unit.lower() not in ("joules", "j"):
            warnings.append(f"{event}: unexpected unit {unit!r}")
            continue
        per_domain[domain] = joules
    return per_domain, warnings, elapsed


def perf_command(command: Sequence[str], perf_bin: str = "perf") -> list[str]:
    return [perf_bin, "stat", "-x", ";", "-e", ",".join(PERF_EVENTS), "--", *command]


def process_energy(command: Sequence[str], perf_bin: Optional[str] = None,
                   timeout: Optional[float] = None) -> EnergyReading:
    """Whole-process package and DRAM energy of ``command`` via ``perf stat``."""
    perf_bin = perf_bin or os.environ.get(PERF_ENV, "perf")
    resolved = shutil.which(perf_bin)
    if resolved is None:
        raise CapabilityError(f"hardware counter tool {perf_bin!r} not found on PATH")
    argv = perf_command(command, resolved)
    t0 = time.perf_counter()
    proc = subprocess.run(argv, capture_output=True, text=True, timeout=timeout)
    wall = time.perf_counter() - t0
    if proc.returncode != 0:
        raise MeasurementError(
            f"{' '.join(argv)} exited with {proc.returncode}\n"
            f"stdout:\n{proc.stdout}\nstderr:\n{proc.stderr}"
        )
    per_domain, warnings, elapsed = parse_perf_stat(proc.stderr)
    if not per_domain:
        raise CapabilityError(f"{perf_bin} reported no energy events: {'; '.join(warnings) or proc.stderr.strip()}")
    for w in warnings:
        log.warning("process energy: %s", w)
    if elapsed is None:
        # perf omits the elapsed line in -x mode unless duration_time is requested
        elapsed = wall
    return EnergyReading("process", sum(per_domain.values()), elapsed, per_domain,
                         warnings=warnings, provenance="perf")
