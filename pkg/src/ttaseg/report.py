"""CSV tables, SVG charts and PNG label previews for adaptation runs and sweeps."""

from __future__ import annotations

import csv
import html
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .data import CLASS_NAMES

TRACE_FIELDS = ("run_id", "sample_index", "cumulative_miou", "loss", "method", "seed")
SERIES_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf")
LABEL_COLORS = np.array([(40, 40, 40), (220, 60, 50), (50, 90, 220), (235, 200, 40), (150, 70, 180),
                         (60, 180, 170), (240, 140, 40), (120, 200, 80)], dtype=np.uint8)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            values = [r[h] for h in header] if isinstance(r, dict) else r
            w.writerow([_fmt(v) for v in values])
    return path


def write_trace_csv(report, path) -> Path:
    rows = [{"run_id": report.run_id, "sample_index": i, "cumulative_miou": m,
             "loss": report.losses[i], "method": report.method, "seed": report.seed}
            for i, m in enumerate(report.trace)]
    return write_csv(path, TRACE_FIELDS, rows)


def read_trace_csv(path) -> list[dict]:
    out = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            out.append({"run_id": r["run_id"], "sample_index": int(r["sample_index"]),
                        "cumulative_miou": float(r["cumulative_miou"]),
                        "loss": float(r["loss"]) if r["loss"] else None,
                        "method": r["method"], "seed": int(r["seed"])})
    return out


# -- SVG ---------------------------------------------------------------------

def _svg_open(width, height, title) -> list[str]:
    return [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
            f'<rect width="{width}" height="{height}" fill="white"/>',
            f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="14">{html.escape(title)}</text>']


def _nice_range(lo, hi):
    if hi - lo < 1e-9:
        lo, hi = lo - 0.05, hi + 0.05
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def svg_line_chart(series: dict[str, list[float]], title: str, xlabel: str = "sample",
                   ylabel: str = "cumulative mIoU", xs: dict[str, list[float]] | None = None,
                   width: int = 640, height: int = 400) -> str:
    left, right, top, bottom = 60, 150, 35, 45
    pw, ph = width - left - right, height - top - bottom
    all_y = [v for s in series.values() for v in s if v is not None]
    all_x = [v for name, s in series.items() for v in (xs[name] if xs else range(len(s)))]
    ylo, yhi = _nice_range(min(all_y, default=0), max(all_y, default=1))
    xlo, xhi = min(all_x, default=0), max(all_x, default=1)
    xhi = xhi if xhi > xlo else xlo + 1

    def px(x):
        return left + (x - xlo) / (xhi - xlo) * pw

    def py(y):
        return top + (1 - (y - ylo) / (yhi - ylo)) * ph

    out = _svg_open(width, height, title)
    out.append(f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>')
    for t in np.linspace(ylo, yhi, 5):
        out.append(f'<line x1="{left - 4}" y1="{py(t):.1f}" x2="{left}" y2="{py(t):.1f}" stroke="#444"/>')
        out.append(f'<text x="{left - 6}" y="{py(t) + 4:.1f}" text-anchor="end">{t:.3f}</text>')
    for t in np.linspace(xlo, xhi, 5):
        out.append(f'<text x="{px(t):.1f}" y="{top + ph + 15}" text-anchor="middle">{t:g}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 8}" text-anchor="middle">{html.escape(xlabel)}</text>')
    out.append(f'<text x="14" y="{top + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 14 {top + ph / 2:.1f})">{html.escape(ylabel)}</text>')
    for j, (name, ys) in enumerate(series.items()):
        color = SERIES_COLORS[j % len(SERIES_COLORS)]
        xv = xs[name] if xs else list(range(len(ys)))
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xv, ys) if y is not None)
        out.append(f'<polyline class="series" data-name="{html.escape(name)}" points="{pts}" '
                   f'fill="none" stroke="{color}" stroke-width="1.5"/>')
        ly = top + 12 + 16 * j
        out.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 28}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 32}" y="{ly + 4}">{html.escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def svg_bar_chart(values: dict[str, float], title: str, ylabel: str = "mIoU",
                  width: int = 640, height: int = 400) -> str:
    left, right, top, bottom = 60, 20, 35, 60
    pw, ph = width - left - right, height - top - bottom
    vals = list(values.values())
    hi = max(max(vals, default=1.0), 1e-9) * 1.1
    out = _svg_open(width, height, title)
    out.append(f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="#444"/>')
    n = max(len(values), 1)
    bw = pw / n
    for i, (name, v) in enumerate(values.items()):
        h = v / hi * ph
        x = left + i * bw + 0.15 * bw
        out.append(f'<rect class="bar" data-name="{html.escape(name)}" x="{x:.1f}" y="{top + ph - h:.1f}" '
                   f'width="{0.7 * bw:.1f}" height="{h:.1f}" fill="{SERIES_COLORS[0]}"/>')
        out.append(f'<text x="{x + 0.35 * bw:.1f}" y="{top + ph - h - 4:.1f}" text-anchor="middle">{v:.4f}</text>')
        out.append(f'<text x="{x + 0.35 * bw:.1f}" y="{top + ph + 15}" text-anchor="middle">{html.escape(name)}</text>')
    out.append(f'<text x="14" y="{top + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 14 {top + ph / 2:.1f})">{html.escape(ylabel)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def heat_color(v: float, vmin: float = 0.0, vmax: float = 1.0) -> str:
    """White (low) to dark blue (high); darkness is monotone in ``v``."""
    t = 0.0 if vmax <= vmin else float(np.clip((v - vmin) / (vmax - vmin), 0, 1))
    r = round(255 - t * (255 - 8))
    g = round(255 - t * (255 - 48))
    b = round(255 - t * (255 - 107))
    return f"#{r:02x}{g:02x}{b:02x}"


def svg_heatmap(matrix, row_labels, col_labels, title: str, cell: int = 56) -> str:
    m = np.asarray(matrix, dtype=float)
    left, top = 110, 60
    width = left + cell * m.shape[1] + 20
    height = top + cell * m.shape[0] + 60
    out = _svg_open(width, height, title)
    for j, name in enumerate(col_labels):
        out.append(f'<text x="{left + (j + 0.5) * cell:.1f}" y="{top - 6}" text-anchor="middle" '
                   f'font-size="9">{html.escape(name)}</text>')
    for i, name in enumerate(row_labels):
        out.append(f'<text x="{left - 6}" y="{top + (i + 0.5) * cell + 4:.1f}" text-anchor="end">'
                   f'{html.escape(name)}</text>')
        for j in range(m.shape[1]):
            v = m[i, j]
            out.append(f'<rect class="cell" data-row="{i}" data-col="{j}" data-value="{v!r}" '
                       f'x="{left + j * cell}" y="{top + i * cell}" width="{cell}" height="{cell}" '
                       f'fill="{heat_color(v)}" stroke="#ccc"/>')
            ink = "white" if v > 0.5 else "black"
            out.append(f'<text x="{left + (j + 0.5) * cell:.1f}" y="{top + (i + 0.5) * cell + 4:.1f}" '
                       f'text-anchor="middle" fill="{ink}">{v:.2f}</text>')
    out.append(f'<text x="{left + cell * m.shape[1] / 2:.1f}" y="{height - 20}" text-anchor="middle">'
               f'columns: unsupervised class, rows: supervised class</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# -- PNG -----------------------------------------------------------------------

def write_png(path, rgb: np.ndarray) -> Path:
    """Minimal 8-bit RGB PNG writer."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    raw = b"".join(b"\x00" + rgb[i].tobytes() for i in range(h))

    def chunk(tag, data):
        return struct.pack(">I", len(data)) + tag + data + struct.pack(">I", zlib.crc32(tag + data) & 0xFFFFFFFF)

    png = (b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0))
           + chunk(b"IDAT", zlib.compress(raw, 9)) + chunk(b"IEND", b""))
    Path(path).write_bytes(png)
    return Path(path)


def colorize(labels: np.ndarray) -> np.ndarray:
    return LABEL_COLORS[np.asarray(labels, dtype=np.int64) % len(LABEL_COLORS)]


# -- run reports -------------------------------------------------------------

def emit_report(report, out_dir) -> list[Path]:
    """Write report.json, CSVs, the evolution chart, transfer-matrix heatmap and label previews."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create report directory {out}: {e}") from e
    written = []
    p = out / "report.json"
    p.write_text(json.dumps(report.to_dict(), sort_keys=True))
    written.append(p)
    written.append(write_trace_csv(report, out / "trace.csv"))
    names = list(CLASS_NAMES) if len(report.per_class_iou) == len(CLASS_NAMES) else \
        [f"class{i}" for i in range(len(report.per_class_iou))]
    written.append(write_csv(out / "per_class_iou.csv", ("class", "iou"),
                             [(n, v) for n, v in zip(names, report.per_class_iou)]))
    written.append(write_csv(out / "confusion.csv", ("gt",) + tuple(names),
                             [(names[i],) + tuple(row) for i, row in enumerate(report.confusion)]))
    p = out / "evolution.svg"
    p.write_text(svg_line_chart({f"{report.method} ({report.head_config})": report.trace},
                                f"mIoU evolution: {report.run_id}"))
    written.append(p)
    if report.transfer_matrix is not None:
        p = out / "transfer_matrix.svg"
        p.write_text(svg_heatmap(report.transfer_matrix, names, names, "Transfer matrix W_su"))
        written.append(p)
    for key, pv in sorted(report.previews.items()):
        pred, gt = np.asarray(pv["pred"]), np.asarray(pv["gt"])
        sep = np.full((gt.shape[0], 2, 3), 255, dtype=np.uint8)
        img = np.concatenate([colorize(gt), sep, colorize(pred)], axis=1)
        written.append(write_png(out / f"preview_{int(key):05d}.png", np.repeat(np.repeat(img, 4, 0), 4, 1)))
    return written


def emit_overlay(reports, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    series = {}
    for r in reports:
        key = r.run_id if r.run_id not in series else f"{r.run_id} ({len(series)})"
        series[key] = r.trace
    p = out / "evolution_overlay.svg"
    p.write_text(svg_line_chart(series, "mIoU evolution"))
    rows = []
    for r in reports:
        rows += [{"run_id": r.run_id, "sample_index": i, "cumulative_miou": m, "loss": r.losses[i],
                  "method": r.method, "seed": r.seed} for i, m in enumerate(r.trace)]
    return [p, write_csv(out / "traces.csv", TRACE_FIELDS, rows)]
