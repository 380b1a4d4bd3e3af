"""CSV/JSON artifact writers and dependency-free SVG plots.

Every writer is deterministic: no timestamps, fixed float formatting, fixed
key order, so re-running a command reproduces its files byte for byte.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

DECOMPOSITION_COLUMNS = ("step", "loss_total", "loss_mean", "loss_equiv", "percent_equiv", "n_rotations", "seed")
BOOTSTRAP_COLUMNS = ("n", "percent_mean", "percent_stderr")
HEAD_SERIES_COLUMNS = ("step", "head_deviation_sq", "percent_equiv")

_W, _H = 640, 400
_PAD = dict(left=70, right=20, top=36, bottom=50)
_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def write_rows(path: str | Path, header: Sequence[str], rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            if isinstance(row, dict):
                row = [row[c] for c in header]
            w.writerow([fmt(v) for v in row])
    return path


def write_decomposition_csv(path, rows: Sequence[dict]) -> Path:
    return write_rows(path, DECOMPOSITION_COLUMNS, rows)


def write_bootstrap_csv(path, rows) -> Path:
    return write_rows(path, BOOTSTRAP_COLUMNS, rows)


def write_matrix_csv(path, values: np.ndarray) -> Path:
    """Headerless CSV matrix (row i = first grid axis offset i - radius)."""
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        for row in np.asarray(values):
            w.writerow([fmt(v) for v in row])
    return path


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(plain(obj), indent=2, sort_keys=True, allow_nan=True) + "\n")
    return path


def plain(obj):
    if isinstance(obj, dict):
        return {str(k): plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return plain(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def code_hash() -> str:
    """sha256 over the package sources in sorted path order (a content hash of the code version)."""
    root = Path(__file__).resolve().parent
    h = hashlib.sha256()
    for p in sorted(root.glob("*.py")):
        h.update(p.name.encode())
        h.update(b"\0")
        h.update(p.read_bytes())
    return h.hexdigest()


def manifest(config: dict, seeds: dict, dataset_hash: str, artifacts: Sequence[str], extra: dict | None = None) -> dict:
    out = {"config": config, "seeds": seeds, "code_hash": code_hash(), "dataset_hash": dataset_hash,
           "artifacts": sorted(artifacts)}
    if extra:
        out.update(extra)
    return out


# --------------------------------------------------------------------- SVG


def _num(v: float) -> str:
    return format(v, ".2f")


def _tick(v: float) -> str:
    return format(v, ".3g")


def _svg(body: list[str], title: str, width: int = _W, height: int = _H) -> str:
    head = [f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {width} {height}" width="{width}" height="{height}">',
            f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
            f'<text x="{width / 2:.1f}" y="22" text-anchor="middle" font-family="sans-serif" font-size="15">{escape(title)}</text>']
    return "\n".join(head + body + ["</svg>"]) + "\n"


def line_plot(series: dict, title: str, xlabel: str, ylabel: str, logx: bool = False, logy: bool = False,
              hline: float | None = None) -> str:
    """Polyline chart of ``{label: (x, y)}``; non-finite or non-positive (on log axes) points are dropped."""
    cleaned = {}
    for label, (x, y) in series.items():
        x, y = np.asarray(x, float), np.asarray(y, float)
        ok = np.isfinite(x) & np.isfinite(y)
        if logx:
            ok &= x > 0
        if logy:
            ok &= y > 0
        cleaned[label] = (x[ok], y[ok])
    tx = (lambda v: np.log10(v)) if logx else (lambda v: v)
    ty = (lambda v: np.log10(v)) if logy else (lambda v: v)
    xs = np.concatenate([tx(x) for x, _ in cleaned.values()] or [np.zeros(0)])
    ys = np.concatenate([ty(y) for _, y in cleaned.values()] or [np.zeros(0)])
    if hline is not None and (not logy or hline > 0):
        ys = np.append(ys, ty(hline))
    x0, x1 = (float(xs.min()), float(xs.max())) if xs.size else (0.0, 1.0)
    y0, y1 = (float(ys.min()), float(ys.max())) if ys.size else (0.0, 1.0)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0
    left, top = _PAD["left"], _PAD["top"]
    pw, ph = _W - left - _PAD["right"], _H - top - _PAD["bottom"]
    px = lambda v: left + (v - x0) / (x1 - x0) * pw
    py = lambda v: top + ph - (v - y0) / (y1 - y0) * ph
    body = [f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for k in range(5):
        fx = x0 + (x1 - x0) * k / 4
        fy = y0 + (y1 - y0) * k / 4
        lx = 10**fx if logx else fx
        ly = 10**fy if logy else fy
        body.append(f'<text x="{_num(px(fx))}" y="{top + ph + 16}" text-anchor="middle" font-family="sans-serif" '
                    f'font-size="11">{_tick(lx)}</text>')
        body.append(f'<text x="{left - 6}" y="{_num(py(fy) + 4)}" text-anchor="end" font-family="sans-serif" '
                    f'font-size="11">{_tick(ly)}</text>')
    body.append(f'<text x="{left + pw / 2:.1f}" y="{_H - 10}" text-anchor="middle" font-family="sans-serif" '
                f'font-size="12">{escape(xlabel)}</text>')
    body.append(f'<text x="16" y="{top + ph / 2:.1f}" text-anchor="middle" font-family="sans-serif" font-size="12" '
                f'transform="rotate(-90 16 {top + ph / 2:.1f})">{escape(ylabel)}</text>')
    if hline is not None and (not logy or hline > 0):
        yy = _num(py(ty(hline)))
        body.append(f'<line x1="{left}" y1="{yy}" x2="{left + pw}" y2="{yy}" stroke="gray" stroke-dasharray="4 3"/>')
    for k, (label, (x, y)) in enumerate(cleaned.items()):
        color = _COLORS[k % len(_COLORS)]
        pts = " ".join(f"{_num(px(a))},{_num(py(b))}" for a, b in zip(tx(x), ty(y)))
        body.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        body.append(f'<text x="{left + pw - 8}" y="{top + 16 + 15 * k}" text-anchor="end" font-family="sans-serif" '
                    f'font-size="11" fill="{color}">{escape(label)}</text>')
    return _svg(body, title)


def _ramp(t: float) -> str:
    # white -> dark blue
    t = min(max(t, 0.0), 1.0)
    r = int(round(255 * (1 - t) + 8 * t))
    g = int(round(255 * (1 - t) + 48 * t))
    b = int(round(255 * (1 - t) + 107 * t))
    return f"#{r:02x}{g:02x}{b:02x}"


def heatmap_pair(panels: dict, title: str, log: bool = True) -> str:
    """Side-by-side heat maps, each panel on its own colour scale (values shifted to start at 0)."""
    n = len(panels)
    cell = 14
    side = max(np.asarray(v).shape[0] for v in panels.values())
    pw = side * cell
    width = n * (pw + 40) + 40
    height = pw + 90
    body = []
    for k, (label, values) in enumerate(panels.items()):
        v = np.asarray(values, float)
        v = v - np.nanmin(v)
        if log:
            v = np.log10(v + max(float(np.nanmax(v)), 1e-300) * 1e-6)
        lo, hi = float(np.nanmin(v)), float(np.nanmax(v))
        span = hi - lo if hi > lo else 1.0
        ox, oy = 40 + k * (pw + 40), 50
        body.append(f'<text x="{ox + pw / 2:.1f}" y="{oy - 8}" text-anchor="middle" font-family="sans-serif" '
                    f'font-size="13">{escape(label)}</text>')
        for i in range(v.shape[0]):
            for j in range(v.shape[1]):
                # row index i runs along axis 1 (horizontal), j along axis 2 (vertical, up)
                x = ox + i * cell
                y = oy + (v.shape[1] - 1 - j) * cell
                body.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{_ramp((v[i, j] - lo) / span)}"/>')
        body.append(f'<rect x="{ox}" y="{oy}" width="{v.shape[0] * cell}" height="{v.shape[1] * cell}" '
                    f'fill="none" stroke="black"/>')
    return _svg(body, title, width, height)


def write_svg(path, svg: str) -> Path:
    path = Path(path)
    path.write_text(svg)
    return path


def finite_or_none(v: float):
    return v if isinstance(v, (int, float)) and math.isfinite(v) else None
