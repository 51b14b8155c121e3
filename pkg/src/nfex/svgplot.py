"""Minimal deterministic SVG line plots; no plotting dependency needed for the
handful of loss-curve and trace charts the CLI emits."""

from __future__ import annotations

WIDTH = 640
HEIGHT = 360
MARGIN = 48
PALETTE = ("#1f6fb2", "#d1495b", "#3a7d44", "#8d6a9f", "#c88a2d", "#4a4e69")


def _scale(vals, lo, hi, out_lo, out_hi):
    span = hi - lo if hi > lo else 1.0
    return [out_lo + (v - lo) / span * (out_hi - out_lo) for v in vals]


def write_svg_lines(
    path,
    series: dict[str, list[float]],
    title: str = "",
    x_label: str = "",
    y_label: str = "",
) -> None:
    """Write one polyline per named series, indexed by position on the x-axis."""
    all_vals = [v for vs in series.values() for v in vs]
    n = max((len(vs) for vs in series.values()), default=0)
    lo = min(all_vals, default=0.0)
    hi = max(all_vals, default=1.0)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<text x="{WIDTH / 2}" y="{HEIGHT - 8}" text-anchor="middle" '
        f'font-size="11">{x_label}</text>',
        f'<text x="14" y="{HEIGHT / 2}" text-anchor="middle" font-size="11" '
        f'transform="rotate(-90 14 {HEIGHT / 2})">{y_label}</text>',
        f'<line x1="{MARGIN}" y1="{HEIGHT - MARGIN}" x2="{WIDTH - MARGIN}" '
        f'y2="{HEIGHT - MARGIN}" stroke="black"/>',
        f'<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{HEIGHT - MARGIN}" '
        f'stroke="black"/>',
        f'<text x="{MARGIN - 4}" y="{MARGIN + 4}" text-anchor="end" '
        f'font-size="10">{hi:.4g}</text>',
        f'<text x="{MARGIN - 4}" y="{HEIGHT - MARGIN}" text-anchor="end" '
        f'font-size="10">{lo:.4g}</text>',
    ]
    for k, (name, vals) in enumerate(series.items()):
        if not vals:
            continue
        xs = _scale(list(range(len(vals))), 0, max(n - 1, 1), MARGIN, WIDTH - MARGIN)
        ys = _scale(vals, lo, hi, HEIGHT - MARGIN, MARGIN)
        color = PALETTE[k % len(PALETTE)]
        points = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))
        parts.append(f'<polyline points="{points}" fill="none" stroke="{color}" '
                     f'stroke-width="1.5"/>')
        parts.append(
            f'<text x="{WIDTH - MARGIN + 4}" y="{MARGIN + 14 * k + 10}" font-size="10" '
            f'fill="{color}">{name}</text>'
        )
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(parts) + "\n")
