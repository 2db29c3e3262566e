"""Benchmark protocol: warmup, timed repetitions, statistics and the size sweep."""

from __future__ import annotations

import logging
import os
import platform
import shlex
import statistics
import sys
import tempfile
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence

from gemmbench import backend as be
from gemmbench import energy as en
from gemmbench.errors import BackendError, CapabilityError, GemmBenchError, MeasurementError
from gemmbench.kernels import KernelSpec, available_parallelism, detect_lane_width
from gemmbench.matrix import (
    Matrix, mix_seed, mse, random_matrix, serial_gemm_ref, write_matrix_file,
)

log = logging.getLogger(__name__)

DEFAULT_TIME_REPS = 10
DEFAULT_ENERGY_REPS = 20
DEFAULT_WARMUP = 1
DEFAULT_SEED = 42
DEFAULT_MAX_N = 2048
FULL_MAX_N = 8192
ENERGY_MODES = ("none", "scoped", "process")


def geometric_sizes(start: int, stop: int, factor: int = 2) -> list[int]:
    if start < 1 or factor < 2 or stop < start:
        raise ValueError(f"bad geometric range {start}..{stop}x{factor}")
    sizes = []
    n = start
    while n <= stop:
        sizes.append(n)
        n *= factor
    return sizes


def parse_sizes(text: str) -> list[int]:
    """``"32,64,128"`` or ``"32..8192x2"`` (geometric, factor after ``x``)."""
    text = text.strip()
    if ".." in text:
        lo, _, rest = text.partition("..")
        hi, _, factor = rest.partition("x")
        return geometric_sizes(int(lo), int(hi), int(factor or 2))
    return [int(tok) for tok in text.split(",") if tok.strip()]


def default_sizes(max_n: int = DEFAULT_MAX_N) -> list[int]:
    return geometric_sizes(32, max_n)


@dataclass
class RunConfig:
    sizes: list[int] = field(default_factory=default_sizes)
    kernel_ids: list[str] = field(default_factory=list)
    time_reps: int = DEFAULT_TIME_REPS
    energy_reps: int = DEFAULT_ENERGY_REPS
    warmup: int = DEFAULT_WARMUP
    seed: int = DEFAULT_SEED
    tile: int = 64
    workers: int = field(default_factory=available_parallelism)
    energy_mode: str = "none"
    check_determinism: bool = True
    backend_timeout_s: Optional[float] = None

    def __post_init__(self):
        if not self.sizes:
            raise ValueError("sizes must be non-empty")
        if any(n < 1 for n in self.sizes) or any(b <= a for a, b in zip(self.sizes, self.sizes[1:])):
            raise ValueError(f"sizes must be positive and strictly increasing: {self.sizes}")
        if self.time_reps < 1 or self.energy_reps < 1:
            raise ValueError("time_reps and energy_reps must be >= 1")
        if self.warmup < 0:
            raise ValueError("warmup must be >= 0")
        if self.energy_mode not in ENERGY_MODES:
            raise ValueError(f"energy_mode must be one of {ENERGY_MODES}")

    def tunables(self) -> dict:
        return {
            "tile": self.tile, "workers": self.workers, "seed": self.seed,
            "time_reps": self.time_reps, "energy_reps": self.energy_reps, "warmup": self.warmup,
        }


@dataclass
class TimingStats:
    samples_ms: list[float]
    mean_ms: float
    std_ms: float
    min_ms: float
    max_ms: float
    median_ms: float

    def summary(self) -> dict:
        return {"mean": self.mean_ms, "std": self.std_ms, "min": self.min_ms,
                "max": self.max_ms, "median": self.median_ms}


def aggregate(samples_ms: Sequence[float]) -> TimingStats:
    """Mean, population std, min, max and lower median of the samples."""
    samples = [float(s) for s in samples_ms]
    if not samples:
        raise ValueError("cannot aggregate an empty sample list")
    mean = statistics.fmean(samples)
    # fmean can land one ulp outside [min, max] for near-equal samples
    mean = min(max(mean, min(samples)), max(samples))
    return TimingStats(
        samples_ms=samples,
        mean_ms=mean,
        std_ms=statistics.pstdev(samples) if len(samples) > 1 else 0.0,
        min_ms=min(samples),
        max_ms=max(samples),
        median_ms=statistics.median_low(samples),
    )


def timed_runs(kernel: Callable[[Matrix, Matrix], Matrix], a: Matrix, b: Matrix, reps: int,
               warmup: int, clock: Callable[[], int] = time.perf_counter_ns,
               check_determinism: bool = False) -> tuple[TimingStats, Matrix]:
    """Timing protocol returning the stats and the last repetition's output.

    Only the kernel call sits between the two clock reads.
    """
    if reps < 1:
        raise ValueError(f"reps must be >= 1, got {reps}")
    for _ in range(warmup):
        kernel(a, b)
    samples = []
    first = out = None
    for _ in range(reps):
        t0 = clock()
        out = kernel(a, b)
        t1 = clock()
        if t1 < t0:
            raise MeasurementError(f"clock went backwards ({t0} -> {t1})")
        samples.append((t1 - t0) / 1e6)
        if first is None:
            first = out
    if check_determinism and reps > 1 and not first.bit_equal(out):
        raise MeasurementError("kernel output differs between repetitions")
    return aggregate(samples), out


def time_kernel(kernel: Callable[[Matrix, Matrix], Matrix], a: Matrix, b: Matrix, reps: int,
                warmup: int, clock: Callable[[], int] = time.perf_counter_ns) -> TimingStats:
    return timed_runs(kernel, a, b, reps, warmup, clock)[0]


def _cpu_model() -> str:
    try:
        with open("/proc/cpuinfo") as fh:
            for line in fh:
                if line.startswith("model name"):
                    return line.split(":", 1)[1].strip()
    except OSError:
        pass
    return platform.processor() or platform.machine()


def host_info() -> dict:
    return {"cpu": _cpu_model(), "logical_cores": os.cpu_count() or 1, "lane_width": detect_lane_width()}


def operand_seeds(seed: int, n: int) -> tuple[int, int]:
    return mix_seed(seed, 2 * n), mix_seed(seed, 2 * n + 1)


def make_operands(seed: int, n: int) -> tuple[Matrix, Matrix]:
    sa, sb = operand_seeds(seed, n)
    return random_matrix(n, n, sa), random_matrix(n, n, sb)


@dataclass
class Measurement:
    kernel: str
    n: int
    spec: dict
    timing: Optional[TimingStats]
    mse: Optional[float]
    energy: Optional[en.EnergyReading]
    host: dict
    tunables: dict
    timestamp: str
    backend: Optional[str] = None
    status: str = "ok"
    message: Optional[str] = None
    notes: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def cell_command(spec: KernelSpec, n: int, config: RunConfig) -> list[str]:
    """Child command for process-scope energy: generate operands, run the kernel energy_reps times."""
    argv = [sys.executable, "-m", "gemmbench", "cell", "--kernel", spec.id, "--n", str(n),
            "--seed", str(config.seed), "--reps", str(config.energy_reps)]
    if spec.tile is not None:
        argv += ["--tile", str(spec.tile)]
    if spec.workers is not None:
        argv += ["--workers", str(spec.workers)]
    if spec.lanes is not None:
        argv += ["--lanes", str(spec.lanes)]
    return argv


class EnergyProvider:
    """Energy protocol for one sweep, degrading to "no energy" when unavailable."""

    def __init__(self, mode: str, domains: Optional[list[en.EnergyDomain]] = None,
                 perf_bin: Optional[str] = None):
        self.mode = mode
        self.perf_bin = perf_bin
        self.note: Optional[str] = None
        self.domains = domains
        if mode == "scoped":
            if self.domains is None:
                try:
                    self.domains = en.rapl_domains()
                except CapabilityError as exc:
                    self.domains, self.note = [], str(exc)
            if not self.domains and self.note is None:
                self.note = "no RAPL powercap domains on this host; scoped energy omitted"

    @property
    def available(self) -> bool:
        return self.mode != "none" and not (self.mode == "scoped" and not self.domains)

    def measure(self, spec: KernelSpec, n: int, a: Matrix, b: Matrix, config: RunConfig) -> en.EnergyReading:
        if self.mode == "scoped":
            try:
                return en.scoped_energy(self.domains, lambda: spec.run(a, b), config.energy_reps)
            except MeasurementError as exc:
                log.warning("energy read failed for %s n=%d (%s); retrying once", spec.id, n, exc)
                return en.scoped_energy(self.domains, lambda: spec.run(a, b), config.energy_reps)
        if self.mode == "process":
            if spec.fn is not None:
                raise CapabilityError(f"kernel {spec.id} has no standalone command for process energy")
            reading = en.process_energy(cell_command(spec, n, config), perf_bin=self.perf_bin)
            reading.reps = config.energy_reps
            return reading
        raise GemmBenchError("energy disabled")


def _failed(kernel: str, n: int, spec: dict, config: RunConfig, host: dict, message: str,
            backend: Optional[str] = None) -> Measurement:
    return Measurement(kernel, n, spec, None, None, None, host, config.tunables(), _now(),
                       backend=backend, status="failed", message=message)


class _BackendSlot:
    """A backend command plus its current handle; respawned after a crash or timeout."""

    def __init__(self, argv: Sequence[str]):
        self.argv = list(argv)
        self.handle: Optional[be.BackendHandle] = None
        self.label = Path(self.argv[0]).name if self.argv else "backend"

    def get(self) -> be.BackendHandle:
        if self.handle is None or not self.handle.alive:
            if self.handle is not None:
                be.shutdown(self.handle)
            self.handle = be.spawn_backend(self.argv)
            self.label = self.handle.name
        return self.handle

    def close(self) -> None:
        if self.handle is not None:
            be.shutdown(self.handle)


def iter_sweep(config: RunConfig, registry: Sequence[KernelSpec],
               energy_provider: Optional[EnergyProvider] = None,
               backends: Sequence[Sequence[str]] = (),
               reference: Callable[[Matrix, Matrix], Matrix] = serial_gemm_ref,
               workdir: Optional[Path] = None) -> Iterator[Measurement]:
    """Yield one Measurement per (n, kernel) cell, size-major, as each completes.

    A failing kernel or backend yields a failed row and the sweep moves on.
    """
    by_id = {spec.id: spec for spec in registry}
    ids = config.kernel_ids or [spec.id for spec in registry]
    unknown = [k for k in ids if k not in by_id]
    if unknown:
        raise ValueError(f"unknown kernels {unknown}; available: {sorted(by_id)}")
    kernels = [by_id[k] for k in ids]
    if energy_provider is None:
        energy_provider = EnergyProvider(config.energy_mode)
    host = host_info()
    slots = [_BackendSlot(argv) for argv in backends]
    tmp = None
    if slots and workdir is None:
        tmp = tempfile.TemporaryDirectory(prefix="gemmbench-")
        workdir = Path(tmp.name)
    try:
        for n in config.sizes:
            try:
                a, b = make_operands(config.seed, n)
                ref = reference(a, b)
            except (MemoryError, GemmBenchError) as exc:
                for spec in kernels:
                    yield _failed(spec.id, n, spec.snapshot(), config, host, f"operands/reference: {exc!r}")
                for slot in slots:
                    yield _failed(f"backend:{slot.label}", n, {}, config, host,
                                  f"operands/reference: {exc!r}", backend=slot.label)
                continue
            for spec in kernels:
                yield _kernel_cell(spec, n, a, b, ref, config, host, energy_provider)
            if slots:
                a_path, b_path = workdir / f"a-{n}.gemmmat", workdir / f"b-{n}.gemmmat"
                write_matrix_file(a_path, a)
                write_matrix_file(b_path, b)
                for slot in slots:
                    yield _backend_cell(slot, n, a_path, b_path, ref, config, host, workdir)
                a_path.unlink(missing_ok=True)
                b_path.unlink(missing_ok=True)
            del a, b, ref
    finally:
        for slot in slots:
            slot.close()
        if tmp is not None:
            tmp.cleanup()


def _kernel_cell(spec: KernelSpec, n: int, a: Matrix, b: Matrix, ref: Matrix, config: RunConfig,
                 host: dict, energy_provider: EnergyProvider) -> Measurement:
    snapshot = spec.snapshot()
    try:
        timing, out = timed_runs(spec.run, a, b, config.time_reps, config.warmup,
                                 check_determinism=config.check_determinism)
        err = mse(out, ref)
    except Exception as exc:  # fail-soft: one bad cell never stops the sweep
        log.warning("kernel %s failed at n=%d: %r", spec.id, n, exc)
        return _failed(spec.id, n, snapshot, config, host, f"{type(exc).__name__}: {exc}")
    row = Measurement(spec.id, n, snapshot, timing, err, None, host, config.tunables(), _now())
    if config.energy_mode != "none":
        if not energy_provider.available:
            row.notes.append(energy_provider.note or "energy unavailable")
        else:
            try:
                row.energy = energy_provider.measure(spec, n, a, b, config)
            except (GemmBenchError, OSError) as exc:
                row.notes.append(f"energy omitted: {exc}")
    return row


def _backend_cell(slot: _BackendSlot, n: int, a_path: Path, b_path: Path, ref: Matrix,
                  config: RunConfig, host: dict, workdir: Path) -> Measurement:
    spec = {"id": "backend", "argv": shlex.join(slot.argv)}
    try:
        handle = slot.get()
        info = handle.info
        spec.update({"device": info.device, "includes_transfer_time": info.includes_transfer_time,
                     "reports_energy": info.reports_energy})
        result_path = workdir / f"c-{slot.label}-{n}.gemmmat"
        res = be.request_gemm(handle, a_path, b_path, n, config.time_reps, config.warmup,
                              result_path=result_path, timeout=config.backend_timeout_s)
    except BackendError as exc:
        if slot.handle is not None:
            be.shutdown(slot.handle)
        return _failed(f"backend:{slot.label}", n, spec, config, host, str(exc), backend=slot.label)
    name = f"backend:{info.name}"
    if not res.ok:
        return _failed(name, n, spec, config, host, res.message, backend=info.name)
    row = Measurement(name, n, spec, aggregate(res.per_rep_time_ms), mse(res.result, ref), None,
                      host, config.tunables(), _now(), backend=info.name)
    if res.energy_j is not None:
        elapsed = sum(res.per_rep_time_ms) / 1e3
        row.energy = en.EnergyReading("scoped", res.energy_j, elapsed, {info.name: res.energy_j},
                                      reps=config.time_reps, provenance="backend-reported")
    res.result_path.unlink(missing_ok=True)
    return row


def run_sweep(config: RunConfig, registry: Sequence[KernelSpec],
              energy_provider: Optional[EnergyProvider] = None,
              backends: Sequence[Sequence[str]] = (), **kwargs) -> list[Measurement]:
    return list(iter_sweep(config, registry, energy_provider, backends, **kwargs))
