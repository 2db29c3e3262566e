"""``gemmbench`` command line: list, run, verify, report."""

from __future__ import annotations

import argparse
import logging
import os
import shlex
import shutil
import sys
from typing import Optional, Sequence

from gemmbench import backend as be
from gemmbench import energy as en
from gemmbench import kernels as kn
from gemmbench import measure as ms
from gemmbench import report as rp
from gemmbench import results as rs
from gemmbench import verify as vf
from gemmbench.errors import BackendError, CapabilityError, GemmBenchError, SchemaError

log = logging.getLogger("gemmbench")

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


def _sizes(text: str) -> list[int]:
    try:
        sizes = ms.parse_sizes(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad --sizes {text!r}: {exc}") from None
    if not sizes:
        raise argparse.ArgumentTypeError("--sizes is empty")
    return sizes


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _non_negative(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gemmbench", description="fp32 GEMM kernel benchmark harness")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{list,run,verify,report}")

    backend_help = "backend command line (quoted), repeatable"

    p = sub.add_parser("list", help="kernels, energy domains and backends available")
    p.add_argument("--backend", action="append", default=[], help=backend_help)

    p = sub.add_parser("run", help="run a size sweep and append results")
    p.add_argument("--sizes", type=_sizes, help="comma list or A..Bx2 (default 32..MAX_Nx2)")
    p.add_argument("--max-n", type=_positive, default=ms.DEFAULT_MAX_N,
                   help=f"cap of the default sweep (default {ms.DEFAULT_MAX_N}; {ms.FULL_MAX_N} for the full range)")
    p.add_argument("--kernels", help="comma list of kernel ids (default: all)")
    p.add_argument("--backend", action="append", default=[], help=backend_help)
    p.add_argument("--time-reps", type=_positive, default=ms.DEFAULT_TIME_REPS)
    p.add_argument("--energy-reps", type=_positive, default=ms.DEFAULT_ENERGY_REPS)
    p.add_argument("--warmup", type=_non_negative, default=ms.DEFAULT_WARMUP)
    p.add_argument("--seed", type=int, default=ms.DEFAULT_SEED)
    p.add_argument("--tile", type=_positive, default=kn.DEFAULT_TILE)
    p.add_argument("--workers", type=_positive, default=None, help="default: available cores")
    p.add_argument("--energy", choices=ms.ENERGY_MODES, default="none")
    p.add_argument("--backend-timeout", type=float, default=None, metavar="SECONDS")
    p.add_argument("--out", default="results.jsonl")

    p = sub.add_parser("verify", help="Tier-A bit identity and Tier-B error bound at small N")
    p.add_argument("--max-n", type=_positive, default=64)
    p.add_argument("--seeds", default="1,2,3")

    p = sub.add_parser("report", help="render a results file as a table and/or plot")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--baseline", default=None, help="kernel for speedups (default: naive or first)")
    p.add_argument("--plot", default=None, help="SVG output path")
    p.add_argument("--plot-metric", choices=rp.METRICS, default="time")
    p.add_argument("--mark-provenance", action="store_true",
                   help="dash backend and backend-reported series")

    # child side of process-scope energy; not part of the public surface
    p = sub.add_parser("cell")
    p.add_argument("--kernel", required=True, choices=kn.KERNEL_IDS)
    p.add_argument("--n", type=_positive, required=True)
    p.add_argument("--seed", type=int, default=ms.DEFAULT_SEED)
    p.add_argument("--reps", type=_positive, default=ms.DEFAULT_ENERGY_REPS)
    p.add_argument("--tile", type=_positive, default=None)
    p.add_argument("--workers", type=_positive, default=None)
    p.add_argument("--lanes", type=_positive, default=None)
    return parser


def cmd_list(args, out) -> int:
    print("kernels:", file=out)
    for spec in kn.kernel_registry():
        tunables = ", ".join(f"{k}={v}" for k, v in (("tile", spec.tile), ("workers", spec.workers),
                                                      ("lanes", spec.lanes)) if v is not None)
        tier = "bit-identical" if spec.bit_identical_tier else "error-bounded"
        print(f"  {spec.id:<9} {tier:<14} {tunables}".rstrip(), file=out)
    print("energy domains:", file=out)
    try:
        domains = en.rapl_domains()
    except CapabilityError as exc:
        print(f"  unavailable: {exc}", file=out)
    else:
        if not domains:
            print(f"  none (no powercap tree under {en.powercap_root()})", file=out)
        for d in domains:
            print(f"  {d.zone_id:<12} {d.counter_path} (wraps at {d.max_range_uj} uJ)", file=out)
    perf = shutil.which(os.environ.get(en.PERF_ENV, "perf"))
    print(f"process energy tool: {perf or 'not found'}", file=out)
    status = EXIT_OK
    for text in args.backend:
        argv = shlex.split(text)
        try:
            handle = be.spawn_backend(argv)
        except BackendError as exc:
            print(f"backend {text!r}: unavailable: {exc}", file=out)
            status = EXIT_FAILED
            continue
        info = handle.info
        be.shutdown(handle)
        print(f"backend {info.name}: device={info.device} protocol={info.protocol_version} "
              f"includes_transfer_time={info.includes_transfer_time} reports_energy={info.reports_energy}",
              file=out)
    return status


def cmd_run(args, parser, out) -> int:
    sizes = args.sizes or ms.default_sizes(args.max_n)
    registry = kn.kernel_registry(tile=max(args.tile, kn.MIN_TILE), workers=args.workers)
    if args.tile < kn.MIN_TILE:
        registry = [kn.KernelSpec("tiled", tile=args.tile) if s.id == "tiled" else s for s in registry]
    valid = [spec.id for spec in registry]
    if args.kernels is not None:
        kernel_ids = [k.strip() for k in args.kernels.split(",") if k.strip()]
        unknown = [k for k in kernel_ids if k not in valid]
        if unknown or not kernel_ids:
            parser.error(f"unknown kernel(s) {', '.join(unknown) or '(none given)'}; valid kernels: {', '.join(valid)}")
    else:
        kernel_ids = [] if args.backend else valid
    try:
        config = ms.RunConfig(
            sizes=sizes, kernel_ids=kernel_ids, time_reps=args.time_reps, energy_reps=args.energy_reps,
            warmup=args.warmup, seed=args.seed, tile=args.tile, workers=args.workers or kn.available_parallelism(),
            energy_mode=args.energy, backend_timeout_s=args.backend_timeout,
        )
    except ValueError as exc:
        parser.error(str(exc))
    try:
        rs.check_writable(args.out)
    except OSError as exc:
        print(f"gemmbench: cannot write results to {args.out}: {exc}", file=sys.stderr)
        return EXIT_FAILED
    if not config.kernel_ids and not args.backend:
        parser.error("nothing to run")
    registry = [spec for spec in registry if spec.id in config.kernel_ids]
    config.kernel_ids = [spec.id for spec in registry]
    kn.warm_up_jit()
    provider = ms.EnergyProvider(config.energy_mode)
    if config.energy_mode != "none" and not provider.available:
        print(f"gemmbench: {provider.note}", file=sys.stderr)

    failed = 0
    backends = [shlex.split(text) for text in args.backend]
    for m in ms.iter_sweep(config, registry, provider, backends):
        row = rs.ResultRow.from_measurement(m)
        rs.append_results(args.out, [row])
        if m.ok:
            print(f"n={m.n:<5} {m.kernel:<14} mean={m.timing.mean_ms:10.3f} ms  mse={m.mse:.3e}", file=out)
        else:
            failed += 1
            print(f"n={m.n:<5} {m.kernel:<14} FAILED: {m.message}", file=out)
    print(f"results appended to {args.out}", file=out)
    return EXIT_FAILED if failed else EXIT_OK


def cmd_verify(args, out) -> int:
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    sizes = vf.tier_a_sizes(args.max_n)
    violations = vf.check_tier_a(sizes, seeds)
    print(f"tier-a: {len(sizes)} sizes x {len(seeds)} seeds, {len(violations)} violations", file=out)
    b_sizes = [n for n in (16, 37, 64, 128, 512) if n <= args.max_n] or [args.max_n]
    b_violations = []
    for lanes in sorted({kn.detect_lane_width(), 8, 1}):
        b_violations += vf.check_tier_b(b_sizes, seeds, lanes=lanes)
    print(f"tier-b: sizes {b_sizes}, {len(b_violations)} violations", file=out)
    for v in violations + b_violations:
        print(f"  {v}", file=out)
    return EXIT_FAILED if violations or b_violations else EXIT_OK


def cmd_report(args, out) -> int:
    rows = rs.read_results(args.inp)
    if not rows:
        print(f"gemmbench: {args.inp} holds no results", file=sys.stderr)
        return EXIT_FAILED
    kernels = list(dict.fromkeys(r.kernel for r in rows))
    baseline = args.baseline or ("naive" if "naive" in kernels else kernels[0])
    out.write(rp.render_table(rows, baseline))
    if args.plot:
        rp.render_plot(rows, rp.PlotSpec(args.plot_metric, mark_provenance=args.mark_provenance), args.plot)
        print(f"plot written to {args.plot}", file=out)
    return EXIT_OK


def cmd_cell(args) -> int:
    a, b = ms.make_operands(args.seed, args.n)
    spec = kn.KernelSpec(args.kernel, tile=args.tile, workers=args.workers, lanes=args.lanes)
    for _ in range(args.reps):
        spec.run(a, b)
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "list":
            return cmd_list(args, out)
        if args.command == "run":
            return cmd_run(args, parser, out)
        if args.command == "verify":
            return cmd_verify(args, out)
        if args.command == "report":
            return cmd_report(args, out)
        if args.command == "cell":
            return cmd_cell(args)
    except (SchemaError, ValueError) as exc:
        print(f"gemmbench: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (GemmBenchError, OSError) as exc:
        print(f"gemmbench: {exc}", file=sys.stderr)
        return EXIT_FAILED
    parser.error(f"unknown command {args.command}")
    return EXIT_USAGE
