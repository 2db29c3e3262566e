"""Speedup tables and SVG line charts from result rows."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence
from xml.sax.saxutils import escape

from gemmbench.results import ResultRow

DASH = "—"
METRICS = ("time", "mse", "watts", "joules")
UNITS = {"time": "mean time [ms]", "mse": "MSE vs serial fp32", "watts": "mean power [W]",
         "joules": "energy per rep [J]"}
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2",
           "#7f7f7f", "#bcbd22", "#17becf")


def _latest(rows: Sequence[ResultRow]) -> dict[tuple[int, str], ResultRow]:
    cells: dict[tuple[int, str], ResultRow] = {}
    for row in rows:
        cells[(row.n, row.kernel)] = row
    return cells


def _kernel_order(rows: Sequence[ResultRow]) -> list[str]:
    seen: dict[str, None] = {}
    for row in rows:
        seen.setdefault(row.kernel, None)
    return list(seen)


def speedup(baseline_ms: float, kernel_ms: float) -> float:
    return baseline_ms / kernel_ms


def render_table(rows: Sequence[ResultRow], baseline_kernel: str) -> str:
    """Aligned text table of mean time, speedup over ``baseline_kernel``, MSE and watts."""
    kernels = _kernel_order(rows)
    if baseline_kernel not in kernels:
        raise ValueError(f"baseline {baseline_kernel!r} not in results; available: {', '.join(kernels)}")
    cells = _latest(rows)
    base_ns = {n for (n, k), r in cells.items() if k == baseline_kernel}
    sizes = sorted({n for n, _ in cells})
    if not base_ns & set(sizes):
        raise ValueError(f"baseline {baseline_kernel!r} shares no size with the other rows")

    header = ("n", "kernel", "mean_ms", f"speedup_vs_{baseline_kernel}", "mse", "watts")
    lines = [header]
    for n in sizes:
        base = cells.get((n, baseline_kernel))
        for k in kernels:
            row = cells.get((n, k))
            if row is None:
                continue
            if not row.ok:
                lines.append((str(n), k, DASH, DASH, DASH, DASH))
                continue
            if base is not None and base.ok and row.mean_ms > 0:
                sp = f"{speedup(base.mean_ms, row.mean_ms):.2f}"
            else:
                sp = DASH
            watts = row.watts
            lines.append((str(n), k, f"{row.mean_ms:.3f}", sp, f"{row.mse:.3e}",
                          DASH if watts is None else f"{watts:.1f}"))
    widths = [max(len(line[i]) for line in lines) for i in range(len(header))]
    out = []
    for line in lines:
        cols = [line[0].rjust(widths[0]), line[1].ljust(widths[1])]
        cols += [cell.rjust(w) for cell, w in zip(line[2:], widths[2:])]
        out.append("  ".join(cols).rstrip())
    return "\n".join(out) + "\n"


@dataclass(frozen=True)
class PlotSpec:
    metric: str = "time"
    title: Optional[str] = None
    mark_provenance: bool = False

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}, got {self.metric!r}")

    @property
    def log_y(self) -> bool:
        return self.metric != "watts"


def metric_value(row: ResultRow, metric: str) -> Optional[float]:
    if not row.ok:
        return None
    if metric == "time":
        return row.mean_ms
    if metric == "mse":
        return row.mse
    if not row.energy:
        return None
    if metric == "watts":
        return row.energy.get("mean_watts")
    return row.energy.get("joules_per_rep", row.energy.get("joules"))


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def render_plot(rows: Sequence[ResultRow], spec: PlotSpec, out_path=None) -> str:
    """Standalone SVG 1.1 line chart, one polyline per kernel, x = N on a log2 axis.

    Output depends only on the rows' values, so equal inputs give identical
    bytes. Written to ``out_path`` when given; the document is returned.
    """
    series: dict[str, list[tuple[int, float]]] = {}
    backend_series = set()
    for (n, kernel), row in sorted(_latest(rows).items()):
        value = metric_value(row, spec.metric)
        if value is None:
            continue
        series.setdefault(kernel, []).append((n, float(value)))
        if row.backend or (row.energy or {}).get("provenance") == "backend-reported":
            backend_series.add(kernel)
    if not series:
        raise ValueError(f"no ok rows carry the {spec.metric!r} metric")
    names = sorted(series)

    values = [v for pts in series.values() for _, v in pts]
    positive = [v for v in values if v > 0]
    note = None
    log_y = spec.log_y and bool(positive)
    if spec.log_y and not positive:
        note = "all values are 0: linear axis (log of zero is undefined)"
    if log_y:
        floor = min(positive)
        if len(positive) < len(values):
            floor = 10 ** (math.floor(math.log10(min(positive))) - 1)
            note = f"values of 0 drawn at the floor {floor:.0e}"
        lo_dec = math.floor(math.log10(floor))
        hi_dec = math.ceil(math.log10(max(positive)))
        if hi_dec == lo_dec:
            hi_dec += 1
        y_lo, y_hi = float(lo_dec), float(hi_dec)
        y_ticks = [(float(d), f"1e{d}") for d in range(lo_dec, hi_dec + 1)]

        def ty(v: float) -> float:
            return math.log10(max(v, floor))
    else:
        y_lo = min(0.0, min(values))
        y_hi = max(values) * 1.05 if max(values) > 0 else 1.0
        step = (y_hi - y_lo) / 5
        y_ticks = [(y_lo + i * step, f"{y_lo + i * step:.3g}") for i in range(6)]

        def ty(v: float) -> float:
            return v

    ns = sorted({n for pts in series.values() for n, _ in pts})
    x_lo, x_hi = math.log2(ns[0]), math.log2(ns[-1])
    if x_hi == x_lo:
        x_lo, x_hi = x_lo - 1, x_hi + 1

    width, height = 760, 480
    left, right, top, bottom = 80, 190, 40, 60
    pw, ph = width - left - right, height - top - bottom

    def px(n: int) -> float:
        return left + (math.log2(n) - x_lo) / (x_hi - x_lo) * pw

    def py(v: float) -> float:
        return top + ph - (ty(v) - y_lo) / (y_hi - y_lo) * ph

    def py_raw(t: float) -> float:
        return top + ph - (t - y_lo) / (y_hi - y_lo) * ph

    title = spec.title or f"{UNITS[spec.metric]} vs N"
    out = [
        '<?xml version="1.0" encoding="UTF-8" standalone="no"?>',
        '<!DOCTYPE svg PUBLIC "-//W3C//DTD SVG 1.1//EN" "http://www.w3.org/Graphics/SVG/1.1/DTD/svg11.dtd">',
        f'<svg version="1.1" xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2 - right / 2:.2f}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for n in ns:
        x = px(n)
        out.append(f'<line x1="{_fmt(x)}" y1="{top + ph}" x2="{_fmt(x)}" y2="{top + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{_fmt(x)}" y="{top + ph + 20}" text-anchor="middle">{n}</text>')
    for t, label in y_ticks:
        y = py_raw(t)
        out.append(f'<line x1="{left - 5}" y1="{_fmt(y)}" x2="{left + pw}" y2="{_fmt(y)}" stroke="#dddddd"/>')
        out.append(f'<text x="{left - 8}" y="{_fmt(y + 4)}" text-anchor="end">{escape(label)}</text>')
    out.append(f'<text x="{left + pw / 2:.2f}" y="{height - 15}" text-anchor="middle">matrix size N (log2 scale)</text>')
    y_label = UNITS[spec.metric] + (" (log10 scale)" if log_y else "")
    out.append(f'<text x="18" y="{top + ph / 2:.2f}" text-anchor="middle" '
               f'transform="rotate(-90 18 {top + ph / 2:.2f})">{escape(y_label)}</text>')

    for idx, name in enumerate(names):
        color = PALETTE[idx % len(PALETTE)]
        dash = ' stroke-dasharray="6 3"' if spec.mark_provenance and name in backend_series else ""
        pts = " ".join(f"{_fmt(px(n))},{_fmt(py(v))}" for n, v in series[name])
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2"{dash} points="{pts}"/>')
        for n, v in series[name]:
            out.append(f'<circle cx="{_fmt(px(n))}" cy="{_fmt(py(v))}" r="3" fill="{color}"/>')
        ly = top + 10 + idx * 18
        out.append(f'<line x1="{left + pw + 15}" y1="{ly}" x2="{left + pw + 40}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"{dash}/>')
        label = name + (" (backend)" if spec.mark_provenance and name in backend_series else "")
        out.append(f'<text x="{left + pw + 45}" y="{ly + 4}">{escape(label)}</text>')
    if note:
        out.append(f'<text x="{left + 5}" y="{top + ph - 6}" font-size="10" fill="#555555">{escape(note)}</text>')
    out.append("</svg>")
    doc = "\n".join(out) + "\n"
    if out_path is not None:
        Path(out_path).write_text(doc, encoding="utf-8")
    return doc
