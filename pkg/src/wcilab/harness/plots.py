"""Learning-curve charts.

Each chart is written twice: a self-contained SVG built by hand (one
``<polyline>`` per contiguous run of finite values, data y mapped so larger
values sit higher on the page) and a matplotlib PNG of the same series.
"""

from __future__ import annotations

import math
from pathlib import Path
from xml.sax.saxutils import escape

from ..metrics import MetricsRow, column

WIDTH, HEIGHT, PAD = 640, 360, 48
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


def _segments(xs, ys):
    seg = []
    for x, y in zip(xs, ys):
        if y is None or not math.isfinite(y):
            if seg:
                yield seg
            seg = []
        else:
            seg.append((x, y))
    if seg:
        yield seg


def _bounds(vals):
    vals = [v for v in vals if v is not None and math.isfinite(v)]
    if not vals:
        return 0.0, 1.0
    lo, hi = min(vals), max(vals)
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    return lo, hi


def svg_chart(title: str, epochs, series: dict[str, list], ylabel: str = "") -> str:
    """Render ``series`` (name -> values aligned with ``epochs``) as SVG text."""
    x_lo, x_hi = _bounds(epochs)
    y_lo, y_hi = _bounds([v for vs in series.values() for v in vs])
    iw, ih = WIDTH - 2 * PAD, HEIGHT - 2 * PAD

    def px(x):
        return PAD + (x - x_lo) / (x_hi - x_lo) * iw

    def py(y):
        return PAD + (y_hi - y) / (y_hi - y_lo) * ih

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2}" y="{PAD / 2}" text-anchor="middle" font-family="sans-serif" font-size="14">{escape(title)}</text>',
        f'<rect x="{PAD}" y="{PAD}" width="{iw}" height="{ih}" fill="none" stroke="#444"/>',
        f'<text x="{PAD}" y="{HEIGHT - PAD / 3}" font-family="sans-serif" font-size="11">epoch {x_lo:g}..{x_hi:g}</text>',
        f'<text x="4" y="{PAD - 6}" font-family="sans-serif" font-size="11">{escape(ylabel)} [{y_lo:.4g}, {y_hi:.4g}]</text>',
    ]
    for i, (name, ys) in enumerate(series.items()):
        color = COLORS[i % len(COLORS)]
        for seg in _segments(epochs, ys):
            pts = " ".join(f"{px(x):.3f},{py(y):.3f}" for x, y in seg)
            out.append(f'<polyline data-series="{escape(name)}" fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        out.append(
            f'<text x="{WIDTH - PAD + 4}" y="{PAD + 14 * (i + 1)}" fill="{color}" font-family="sans-serif" font-size="10">{escape(name)}</text>'
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def chart_series(rows: list[MetricsRow]) -> dict[str, tuple[str, dict[str, list]]]:
    """Chart name -> (title, series) for the standard learning-curve set."""
    K = rows[0].num_layers
    factors = {}
    for k in range(1, K + 1):
        factors[f"w_sq_{k}"] = column(rows, f"w_sq_{k}")
        factors[f"trace_{k}"] = column(rows, f"trace_{k}")
    factors["cs_weight_sum"] = column(rows, "cs_weight_sum")
    factors["cs_trace_sum"] = column(rows, "cs_trace_sum")
    return {
        "wci": ("WCI", {"wci": column(rows, "wci"), "cs_bound": column(rows, "cs_bound")}),
        "loss_gap": ("robust loss gap", {"loss_gap": column(rows, "loss_gap")}),
        "err_gap": ("robust error gap", {"err_gap": column(rows, "err_gap")}),
        "lr": ("learning rate", {"lr": column(rows, "lr")}),
        "factors": ("per-layer factors", factors),
    }


def _png(path: Path, title: str, epochs, series) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6.4, 3.6), dpi=100)
    for name, ys in series.items():
        ax.plot(epochs, [math.nan if v is None else v for v in ys], label=name, lw=1.2)
    ax.set_title(title)
    ax.set_xlabel("epoch")
    if len(series) > 1:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def emit_plots(rows: list[MetricsRow], out_dir, *, png: bool = True) -> list[Path]:
    if not rows:
        raise ValueError("no metrics rows to plot")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    epochs = [r.epoch for r in rows]
    written = []
    for name, (title, series) in chart_series(rows).items():
        p = out_dir / f"{name}.svg"
        p.write_text(svg_chart(title, epochs, series), encoding="utf-8")
        written.append(p)
        if png:
            q = out_dir / f"{name}.png"
            _png(q, title, epochs, series)
            written.append(q)
    return written


def parse_polylines(svg_text: str) -> dict[str, list[list[tuple[float, float]]]]:
    """Read back ``series -> [segment points]`` from an SVG written here."""
    import xml.etree.ElementTree as ET

    root = ET.fromstring(svg_text)
    out: dict[str, list] = {}
    for el in root.iter("{http://www.w3.org/2000/svg}polyline"):
        pts = [tuple(float(c) for c in p.split(",")) for p in el.get("points").split()]
        out.setdefault(el.get("data-series"), []).append(pts)
    return out
