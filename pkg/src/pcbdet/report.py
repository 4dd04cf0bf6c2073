"""Report artifacts: per-class statistics CSV, verdict JSON, histogram SVG.

All emission is byte-deterministic: floats are written with repr (shortest
round-trip form) and nothing carries a timestamp unless explicitly requested.
"""

from __future__ import annotations

import json
import math

from pcbdet.inference import DetectionReport, ablation_statistics

__all__ = ["STATS_HEADER", "write_statistics_csv", "read_statistics_csv", "write_report_json", "write_histogram_svg"]

STATS_HEADER = "class,t_hat,r_s,r_t,z,w,r,inv_rs,rt_over_rs,w_over_rs,excluded"


def _f(x: float) -> str:
    return repr(float(x))


def write_statistics_csv(report: DetectionReport, path) -> None:
    excluded = set(report.fit.excluded) if report.fit else set()
    extras = ablation_statistics(report.stats)
    lines = [STATS_HEADER]
    for st, ab in zip(report.stats, extras):
        t_hat = -1 if st.t_hat is None else st.t_hat
        lines.append(
            ",".join(
                [
                    str(st.source),
                    str(t_hat),
                    _f(st.r_s),
                    _f(st.r_t),
                    _f(st.z),
                    _f(st.w),
                    _f(st.r),
                    _f(ab["inv_rs"]),
                    _f(ab["rt_over_rs"]),
                    _f(ab["w_over_rs"]),
                    "1" if st.source in excluded else "0",
                ]
            )
        )
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def read_statistics_csv(path):
    """Rows as dicts with parsed numbers (t_hat -1 means a failed estimate)."""
    with open(path, "r", encoding="ascii") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != STATS_HEADER:
        raise ValueError(f"{path}: not a statistics CSV")
    names = STATS_HEADER.split(",")
    rows = []
    for ln in lines[1:]:
        parts = ln.split(",")
        row = dict(zip(names, parts))
        for k in names:
            row[k] = int(row[k]) if k in ("class", "t_hat", "excluded") else float(row[k])
        rows.append(row)
    return rows


def write_report_json(report: DetectionReport, path) -> None:
    payload = {
        "verdict": report.verdict,
        "pv": None if report.pvalue is None else report.pvalue.pv,
        "log_pv": None if report.pvalue is None else report.pvalue.log_pv,
        "pv_display": None if report.pvalue is None else report.pvalue.display(),
        "phi": report.phi,
        "s_max": report.s_max,
        "inferred_target": report.inferred_target,
        "gamma_shape": None if report.fit is None else report.fit.shape,
        "gamma_scale": None if report.fit is None else report.fit.scale,
        "J": report.num_excluded,
        "K": report.num_classes,
    }
    with open(path, "w", encoding="ascii") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_histogram_svg(report: DetectionReport, path, bins: int = 20, timestamp: str | None = None) -> None:
    """Histogram of the per-class r statistics, excluded classes highlighted."""
    values = [st.r for st in report.stats]
    excluded = set(report.fit.excluded) if report.fit else set()
    hi = max(max(values), 1e-9)
    width, height, margin = 480, 280, 40
    plot_w, plot_h = width - 2 * margin, height - 2 * margin
    edges = [hi * i / bins for i in range(bins + 1)]
    counts = [0] * bins
    counts_ex = [0] * bins
    for st in report.stats:
        b = min(int(st.r / hi * bins), bins - 1)
        counts[b] += 1
        if st.source in excluded:
            counts_ex[b] += 1
    peak = max(max(counts), 1)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">'
    ]
    if timestamp:
        parts.append(f"<!-- generated {timestamp} -->")
    parts.append(f'<rect width="{width}" height="{height}" fill="white"/>')
    parts.append(
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" y2="{height - margin}" stroke="black"/>'
    )
    parts.append(f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>')
    bar_w = plot_w / bins
    for b in range(bins):
        total = counts[b]
        if total == 0:
            continue
        ex = counts_ex[b]
        x = margin + b * bar_w
        h_total = plot_h * total / peak
        y = height - margin - h_total
        parts.append(
            f'<rect x="{x:.2f}" y="{y:.2f}" width="{bar_w:.2f}" height="{h_total:.2f}" '
            f'fill="#7799cc" stroke="black" stroke-width="0.5"/>'
        )
        if ex:
            h_ex = plot_h * ex / peak
            parts.append(
                f'<rect x="{x:.2f}" y="{height - margin - h_ex:.2f}" width="{bar_w:.2f}" height="{h_ex:.2f}" '
                f'fill="#cc5544" stroke="black" stroke-width="0.5"/>'
            )
    for i in (0, bins // 2, bins):
        x = margin + plot_w * i / bins
        parts.append(
            f'<text x="{x:.2f}" y="{height - margin + 16}" font-size="11" text-anchor="middle">{edges[i]:.2f}</text>'
        )
    parts.append(
        f'<text x="{width / 2:.0f}" y="{height - 6}" font-size="12" text-anchor="middle">per-class statistic r</text>'
    )
    parts.append(
        f'<text x="{width / 2:.0f}" y="{margin - 16}" font-size="12" text-anchor="middle">'
        f"r histogram (red = excluded from null)</text>"
    )
    parts.append("</svg>")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(parts) + "\n")
