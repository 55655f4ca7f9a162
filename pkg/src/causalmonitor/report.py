"""Result files: power-curve CSVs, the summary table, and SVG plots.

All output is plain text with deterministic formatting, so identical runs
produce byte-identical files.
"""

from __future__ import annotations

import csv
from pathlib import Path

MONITOR_COLORS = {
    "1N": "#888888",
    "1I": "#1f77b4",
    "1O": "#aec7e8",
    "2I": "#d62728",
    "2O": "#ff9896",
    "3I": "#2ca02c",
    "3O": "#98df8a",
}


def ensure_dir(path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _fmt(x: float) -> str:
    return repr(float(x))


def write_power_csv(path, result) -> None:
    """Schema: cell, monitor, batch, t_end_of_batch, power, mc_se."""
    with open(path, "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell", "monitor", "batch", "t_end_of_batch", "power", "mc_se"])
        for monitor, curve in result.curves.items():
            for j in range(result.n_batches):
                writer.writerow(
                    [
                        result.cell_name,
                        monitor,
                        j + 1,
                        (j + 1) * result.batch_size,
                        _fmt(curve.power[j]),
                        _fmt(curve.mc_se[j]),
                    ]
                )


def write_summary_csv(path, results) -> None:
    """Schema: cell, monitor, type_i_or_power_final, median_delay_batches."""
    with open(path, "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell", "monitor", "type_i_or_power_final", "median_delay_batches"])
        for result in results:
            for monitor, curve in result.curves.items():
                writer.writerow(
                    [
                        result.cell_name,
                        monitor,
                        _fmt(curve.power[-1]),
                        _fmt(result.median_delays[monitor]),
                    ]
                )


def write_failures_csv(path, failures) -> None:
    with open(path, "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell", "error"])
        for cell, message in failures:
            writer.writerow([cell, message])


def read_summary_csv(path) -> list[dict]:
    with open(path, newline="", encoding="ascii") as fh:
        return list(csv.DictReader(fh))


def format_summary_table(rows: list[dict]) -> str:
    if not rows:
        return "(no results)"
    header = ["cell", "monitor", "final power / Type-I", "median delay (batches)"]
    table = [header]
    for row in rows:
        table.append(
            [
                row["cell"],
                row["monitor"],
                f"{float(row['type_i_or_power_final']):.3f}",
                row["median_delay_batches"],
            ]
        )
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    lines = []
    for i, r in enumerate(table):
        lines.append("  ".join(cell.ljust(widths[j]) for j, cell in enumerate(r)))
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def write_power_svg(path, result, width: int = 640, height: int = 420) -> None:
    """One chart per cell: power versus time for every monitor, with a vertical
    rule at the shift time when there is one."""
    margin_left, margin_right, margin_top, margin_bottom = 56, 130, 36, 44
    plot_w = width - margin_left - margin_right
    plot_h = height - margin_top - margin_bottom
    horizon = result.n_batches * result.batch_size

    def sx(t: float) -> float:
        return margin_left + plot_w * t / horizon

    def sy(p: float) -> float:
        return margin_top + plot_h * (1.0 - p)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<rect x="{margin_left}" y="{margin_top}" width="{plot_w}" height="{plot_h}" '
        'fill="none" stroke="#333333" stroke-width="1"/>',
        f'<text x="{margin_left}" y="{margin_top - 12}" font-family="sans-serif" '
        f'font-size="14">{result.cell_name}</text>',
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = sy(frac)
        parts.append(
            f'<line x1="{margin_left}" y1="{y:.1f}" x2="{margin_left + plot_w}" y2="{y:.1f}" '
            'stroke="#dddddd" stroke-width="1"/>'
        )
        parts.append(
            f'<text x="{margin_left - 8}" y="{y + 4:.1f}" text-anchor="end" '
            f'font-family="sans-serif" font-size="11">{frac:g}</text>'
        )
    for t in range(0, horizon + 1, max(result.batch_size, horizon // 8)):
        parts.append(
            f'<text x="{sx(t):.1f}" y="{margin_top + plot_h + 16}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="11">{t}</text>'
        )
    parts.append(
        f'<text x="{margin_left + plot_w / 2:.1f}" y="{height - 8}" text-anchor="middle" '
        'font-family="sans-serif" font-size="12">time (patients)</text>'
    )
    if result.change_time is not None:
        x = sx(result.change_time)
        parts.append(
            f'<line x1="{x:.1f}" y1="{margin_top}" x2="{x:.1f}" y2="{margin_top + plot_h}" '
            'stroke="#555555" stroke-width="1" stroke-dasharray="5,4"/>'
        )
    legend_y = margin_top + 8
    for monitor, curve in result.curves.items():
        color = MONITOR_COLORS.get(monitor, "#000000")
        points = " ".join(
            f"{sx((j + 1) * result.batch_size):.1f},{sy(curve.power[j]):.1f}"
            for j in range(result.n_batches)
        )
        parts.append(
            f'<polyline points="{points}" fill="none" stroke="{color}" stroke-width="1.6"/>'
        )
        lx = margin_left + plot_w + 12
        parts.append(
            f'<line x1="{lx}" y1="{legend_y}" x2="{lx + 18}" y2="{legend_y}" '
            f'stroke="{color}" stroke-width="3"/>'
        )
        parts.append(
            f'<text x="{lx + 24}" y="{legend_y + 4}" font-family="sans-serif" '
            f'font-size="12">{monitor}</text>'
        )
        legend_y += 18
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="ascii")
