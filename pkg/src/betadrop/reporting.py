"""Sparsity reports: CSV emission/parsing and a static SVG tradeoff plot.

CSV schema (stable column order, '.' decimal separator, LF line endings):
method,kl_scale,error_pct,speedup,memory_pct,kept_counts
Kept counts are dash-joined ("137-90-37"); floats are written with repr so a
parse round trip reproduces the exact values.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

CSV_HEADER = ["method", "kl_scale", "error_pct", "speedup", "memory_pct", "kept_counts"]


@dataclass
class SparsityReport:
    method: str  # "bb" | "dbb" | "pretrained" ...
    kl_scale: float
    error_pct: float
    speedup: float
    memory_pct: float
    kept_counts: list[int] = field(default_factory=list)
    flops_orig: int | None = None
    flops_pruned: int | None = None
    mean_runtime_kept: list[float] | None = None  # DBB only
    mean_runtime_flops: float | None = None

    def __post_init__(self):
        if self.speedup < 1.0 - 1e-12:
            raise ValueError(f"speedup must be >= 1, got {self.speedup}")
        if not 0.0 < self.memory_pct <= 100.0 + 1e-12:
            raise ValueError(f"memory_pct must lie in (0, 100], got {self.memory_pct}")

    def result_line(self) -> str:
        kept = "-".join(str(k) for k in self.kept_counts)
        return (
            f"RESULT method={self.method} kl_scale={self.kl_scale:g} "
            f"error_pct={self.error_pct:.4f} speedup={self.speedup:.4f} "
            f"memory_pct={self.memory_pct:.4f} kept={kept}"
        )


def emit_report_csv(reports: list[SparsityReport], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in reports:
            writer.writerow(
                [
                    r.method,
                    repr(float(r.kl_scale)),
                    repr(float(r.error_pct)),
                    repr(float(r.speedup)),
                    repr(float(r.memory_pct)),
                    "-".join(str(int(k)) for k in r.kept_counts),
                ]
            )


def parse_report_csv(path) -> list[SparsityReport]:
    out: list[SparsityReport] = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != CSV_HEADER:
            raise ValueError(f"unexpected report header {header}")
        for row in reader:
            method, kl_scale, err, speedup, mem, kept = row
            out.append(
                SparsityReport(
                    method=method,
                    kl_scale=float(kl_scale),
                    error_pct=float(err),
                    speedup=float(speedup),
                    memory_pct=float(mem),
                    kept_counts=[int(k) for k in kept.split("-")] if kept else [],
                )
            )
    return out


def _svg_path_points(xs, ys, width, height, pad=45.0):
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    x0, x1 = xs.min(), xs.max()
    y0, y1 = ys.min(), ys.max()
    xr = x1 - x0 or 1.0
    yr = y1 - y0 or 1.0
    px = pad + (xs - x0) / xr * (width - 2 * pad)
    py = height - pad - (ys - y0) / yr * (height - 2 * pad)
    return px, py


def emit_tradeoff_svg(reports: list[SparsityReport], path,
                      width: int = 480, height: int = 360) -> None:
    """Error vs speedup, one polyline per method, SVG 1.1."""
    methods: dict[str, list[SparsityReport]] = {}
    for r in reports:
        methods.setdefault(r.method, []).append(r)
    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b"]
    all_x = [r.speedup for r in reports] or [1.0]
    all_y = [r.error_pct for r in reports] or [0.0]
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
        f'width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="45" y1="{height - 45}" x2="{width - 20}" y2="{height - 45}" stroke="black"/>',
        f'<line x1="45" y1="20" x2="45" y2="{height - 45}" stroke="black"/>',
        f'<text x="{width // 2}" y="{height - 12}" font-size="12" '
        f'text-anchor="middle">speedup (x)</text>',
        f'<text x="14" y="{height // 2}" font-size="12" text-anchor="middle" '
        f'transform="rotate(-90 14 {height // 2})">test error (%)</text>',
    ]
    for mi, (method, rs) in enumerate(sorted(methods.items())):
        rs = sorted(rs, key=lambda r: r.speedup)
        xs = [r.speedup for r in rs]
        ys = [r.error_pct for r in rs]
        # scale against the global extent so methods share axes
        gx, gy = _svg_path_points(
            np.concatenate([all_x, xs]), np.concatenate([all_y, ys]), width, height
        )
        px, py = gx[len(all_x):], gy[len(all_y):]
        color = palette[mi % len(palette)]
        pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(px, py))
        lines.append(
            f'<polyline class="series-{method}" points="{pts}" fill="none" '
            f'stroke="{color}" stroke-width="1.5"/>'
        )
        for x, y in zip(px, py):
            lines.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="3" fill="{color}"/>')
        lines.append(
            f'<text x="{width - 150}" y="{30 + 16 * mi}" font-size="12" '
            f'fill="{color}">{method}</text>'
        )
    lines.append("</svg>")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
