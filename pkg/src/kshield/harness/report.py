"""Results CSV plus line-chart rendering (hand-written SVG and matplotlib PNG)."""
from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import astuple, fields
from xml.sax.saxutils import escape

from .experiment import ROW_FIELDS, ExperimentRow

_TYPES = {f.name: f.type for f in fields(ExperimentRow)}
_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")


def _cell(v):
    return repr(v) if isinstance(v, float) else str(v)


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ROW_FIELDS)
    for row in rows:
        w.writerow([_cell(v) for v in astuple(row)])
    return buf.getvalue()


def write_csv(rows, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(rows_to_csv(rows))


def _parse(name, text):
    kind = _TYPES[name]
    if kind in ("float", float):
        return float(text)
    if kind in ("int", int):
        return int(text)
    return text


def read_csv(path) -> list:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != ROW_FIELDS:
            raise ValueError(f"{path}: header does not match the experiment row schema")
        return [ExperimentRow(**{k: _parse(k, v) for k, v in zip(ROW_FIELDS, rec)}) for rec in reader]


def series(rows, x, y, key):
    """``{series value: [(x, y), ...]}`` sorted by x, series in first-seen order."""
    for name in (x, y, key):
        if name not in _TYPES:
            raise ValueError(f"unknown row field {name!r}")
    out = defaultdict(list)
    for row in rows:
        out[getattr(row, key)].append((float(getattr(row, x)), float(getattr(row, y))))
    return {k: sorted(v) for k, v in out.items()}


def svg_chart(rows, x, y, key, width=480, height=320) -> str:
    """Static SVG line chart with one polyline per distinct ``key`` value."""
    data = series(rows, x, y, key)
    pad_l, pad_r, pad_t, pad_b = 56, 120, 20, 44
    xs = [p[0] for pts in data.values() for p in pts] or [0.0, 1.0]
    ys = [p[1] for pts in data.values() for p in pts] or [0.0, 1.0]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(0.0, min(ys)), max(1.0, max(ys))
    x1 = x1 if x1 > x0 else x0 + 1.0
    pw, ph = width - pad_l - pad_r, height - pad_t - pad_b

    def px(v):
        return pad_l + (v - x0) / (x1 - x0) * pw

    def py(v):
        return pad_t + (1.0 - (v - y0) / (y1 - y0)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect x="{pad_l}" y="{pad_t}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>']
    for t in range(5):
        v = y0 + (y1 - y0) * t / 4
        out.append(f'<text x="{pad_l - 6}" y="{py(v) + 4:.1f}" text-anchor="end">{v:.2f}</text>')
    for v in sorted(set(xs)):
        out.append(f'<text x="{px(v):.1f}" y="{pad_t + ph + 16}" text-anchor="middle">{v:g}</text>')
    out.append(f'<text x="{pad_l + pw / 2}" y="{height - 8}" text-anchor="middle">{escape(x)}</text>')
    out.append(f'<text x="14" y="{pad_t + ph / 2}" text-anchor="middle" '
               f'transform="rotate(-90 14 {pad_t + ph / 2})">{escape(y)}</text>')
    for i, (name, pts) in enumerate(data.items()):
        colour = _PALETTE[i % len(_PALETTE)]
        coords = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in pts)
        out.append(f'<polyline fill="none" stroke="{colour}" stroke-width="2" points="{coords}"/>')
        ly = pad_t + 14 + 16 * i
        out.append(f'<line x1="{width - pad_r + 10}" y1="{ly - 4}" x2="{width - pad_r + 28}" y2="{ly - 4}" '
                   f'stroke="{colour}" stroke-width="2"/>')
        out.append(f'<text x="{width - pad_r + 32}" y="{ly}">{escape(f"{key}={name}")}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot_svg(rows, x, y, key, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(svg_chart(rows, x, y, key))


def plot_png(rows, x, y, key, path):
    """Same chart rendered by matplotlib (Agg backend)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.4))
    for name, pts in series(rows, x, y, key).items():
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=f"{key}={name}")
    ax.set_xlabel(x)
    ax.set_ylabel(y)
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
