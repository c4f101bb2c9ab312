"""SVG 1.1 figures rendered from report and prediction CSVs only.

Three figure types: the accuracy-vs-AUC trade-off (one polyline per
configuration family), paired member/nonmember confidence histograms, and
grouped bars of the correct-agreement level ``c``.
"""

import csv
import os
from xml.sax.saxutils import escape

import numpy as np

from .exceptions import SchemaError

WIDTH, HEIGHT = 480, 360
MARGIN = {"left": 60, "right": 150, "top": 30, "bottom": 50}
PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
           "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")

TRADEOFF_COLUMNS = ("dataset", "ensemble_kind", "n_models", "fusion", "defense", "epochs",
                    "attack", "auc", "test_acc")
PREDICTION_COLUMNS = ("is_member", "fused_max_conf", "agreement_c")


def read_csv_checked(path, required):
    """Rows of ``path`` as dicts; raises SchemaError naming the first missing column."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for column in required:
            if column not in header:
                raise SchemaError(f"{os.path.basename(path)}: missing column {column!r}")
        return list(reader)


class _Canvas:
    """Plot area mapping data coordinates onto the SVG viewport."""

    def __init__(self, title, xlabel, ylabel, xlim=(0.0, 1.0), ylim=(0.0, 1.0)):
        self.parts = []
        self.xlim, self.ylim = xlim, ylim
        self.x0, self.x1 = MARGIN["left"], WIDTH - MARGIN["right"]
        self.y0, self.y1 = HEIGHT - MARGIN["bottom"], MARGIN["top"]
        self._axes(title, xlabel, ylabel)

    def sx(self, x):
        lo, hi = self.xlim
        return self.x0 + (x - lo) / (hi - lo) * (self.x1 - self.x0)

    def sy(self, y):
        lo, hi = self.ylim
        return self.y0 - (y - lo) / (hi - lo) * (self.y0 - self.y1)

    def add(self, element):
        self.parts.append(element)

    def _text(self, x, y, text, anchor="middle", size=11, extra=""):
        self.add(f'<text x="{x:.2f}" y="{y:.2f}" font-size="{size}" text-anchor="{anchor}"'
                 f'{extra}>{escape(str(text))}</text>')

    def _axes(self, title, xlabel, ylabel):
        self.add(f'<rect x="{self.x0}" y="{self.y1}" width="{self.x1 - self.x0}" '
                 f'height="{self.y0 - self.y1}" fill="none" stroke="black"/>')
        for k in range(6):
            fx = self.xlim[0] + k * (self.xlim[1] - self.xlim[0]) / 5
            fy = self.ylim[0] + k * (self.ylim[1] - self.ylim[0]) / 5
            self.add(f'<line x1="{self.sx(fx):.2f}" y1="{self.y0}" x2="{self.sx(fx):.2f}" '
                     f'y2="{self.y0 + 4}" stroke="black"/>')
            self._text(self.sx(fx), self.y0 + 16, f"{fx:.2f}", size=9)
            self.add(f'<line x1="{self.x0 - 4}" y1="{self.sy(fy):.2f}" x2="{self.x0}" '
                     f'y2="{self.sy(fy):.2f}" stroke="black"/>')
            self._text(self.x0 - 6, self.sy(fy) + 3, f"{fy:.2f}", anchor="end", size=9)
        self._text((self.x0 + self.x1) / 2, MARGIN["top"] - 10, title, size=13)
        self._text((self.x0 + self.x1) / 2, HEIGHT - 12, xlabel)
        cy = (self.y0 + self.y1) / 2
        self._text(16, cy, ylabel, extra=f' transform="rotate(-90 16 {cy:.2f})"')

    def legend(self, entries):
        for k, (label, color) in enumerate(entries):
            y = MARGIN["top"] + 14 + 16 * k
            self.add(f'<rect x="{self.x1 + 10}" y="{y - 9}" width="10" height="10" fill="{color}"/>')
            self._text(self.x1 + 24, y, label, anchor="start", size=10)

    def svg(self):
        body = "\n".join(self.parts)
        return (
            '<?xml version="1.0" encoding="UTF-8"?>\n'
            f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" '
            f'height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif">\n'
            f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>\n{body}\n</svg>\n'
        )


def _padded(values, default=(0.0, 1.0)):
    if not values:
        return default
    lo, hi = min(values), max(values)
    pad = max(0.02, 0.1 * (hi - lo))
    return max(0.0, lo - pad), min(1.0, hi + pad)


def tradeoff_svg(rows):
    """Accuracy vs attack AUC; one polyline per family, vertices ordered by n."""
    families = {}
    for row in rows:
        if row["auc"] == "" or row["test_acc"] == "":
            continue
        key = (row["dataset"], row["ensemble_kind"], row["fusion"], row["defense"],
               row["epochs"], row["attack"])
        families.setdefault(key, []).append(
            (int(row["n_models"]), float(row["auc"]), float(row["test_acc"])))
    aucs = [p[1] for pts in families.values() for p in pts]
    accs = [p[2] for pts in families.values() for p in pts]
    canvas = _Canvas("Accuracy vs. membership-inference AUC", "attack AUC", "test accuracy",
                     _padded(aucs), _padded(accs))
    entries = []
    for k, (key, points) in enumerate(sorted(families.items())):
        color = PALETTE[k % len(PALETTE)]
        points.sort()
        coords = " ".join(f"{canvas.sx(a):.2f},{canvas.sy(t):.2f}" for _, a, t in points)
        canvas.add(f'<polyline points="{coords}" fill="none" stroke="{color}" '
                   f'stroke-width="2" class="family"/>')
        for n, a, t in points:
            canvas.add(f'<circle cx="{canvas.sx(a):.2f}" cy="{canvas.sy(t):.2f}" r="3" '
                       f'fill="{color}"><title>n={n}</title></circle>')
        entries.append(("/".join(key[1:5]) + f" [{key[5]}]", color))
    canvas.legend(entries)
    return canvas.svg()


def histogram_svg(rows, bins=20, title="Fused max-confidence"):
    """Member and nonmember histograms of ``fused_max_conf`` side by side per bin."""
    member = np.array([float(r["fused_max_conf"]) for r in rows if r["is_member"] == "1"])
    other = np.array([float(r["fused_max_conf"]) for r in rows if r["is_member"] != "1"])
    hm, edges = np.histogram(member, bins=bins, range=(0.0, 1.0))
    hn, _ = np.histogram(other, bins=bins, range=(0.0, 1.0))
    fm = hm / max(member.size, 1)
    fn = hn / max(other.size, 1)
    top = float(max(fm.max(initial=0.0), fn.max(initial=0.0))) or 1.0
    canvas = _Canvas(title, "max confidence", "fraction of samples", (0.0, 1.0), (0.0, top))
    width = (canvas.sx(edges[1]) - canvas.sx(edges[0])) / 2
    for k in range(bins):
        for offset, frac, color in ((0, fm[k], PALETTE[0]), (width, fn[k], PALETTE[1])):
            if frac > 0:
                y = canvas.sy(frac)
                canvas.add(f'<rect x="{canvas.sx(edges[k]) + offset:.2f}" y="{y:.2f}" '
                           f'width="{width:.2f}" height="{canvas.y0 - y:.2f}" fill="{color}"/>')
    canvas.legend([("members", PALETTE[0]), ("nonmembers", PALETTE[1])])
    return canvas.svg()


def agreement_svg(rows):
    """Grouped bars: fraction of members / nonmembers at each agreement level ``c``."""
    c = np.array([int(r["agreement_c"]) for r in rows], dtype=np.int64)
    member = np.array([r["is_member"] == "1" for r in rows], dtype=bool)
    levels = int(c.max(initial=0)) + 1
    fm = np.bincount(c[member], minlength=levels) / max(member.sum(), 1)
    fn = np.bincount(c[~member], minlength=levels) / max((~member).sum(), 1)
    top = float(max(fm.max(initial=0.0), fn.max(initial=0.0))) or 1.0
    canvas = _Canvas("Correct agreement level", "c (models predicting the true label)",
                     "fraction of samples", (-0.5, levels - 0.5), (0.0, top))
    slot = (canvas.sx(1) - canvas.sx(0)) * 0.4
    for level in range(levels):
        for offset, frac, color in ((-slot, fm[level], PALETTE[0]), (0.0, fn[level], PALETTE[1])):
            y = canvas.sy(frac)
            canvas.add(f'<rect x="{canvas.sx(level) + offset:.2f}" y="{y:.2f}" '
                       f'width="{slot:.2f}" height="{canvas.y0 - y:.2f}" fill="{color}"/>')
    canvas.legend([("members", PALETTE[0]), ("nonmembers", PALETTE[1])])
    return canvas.svg()


def _write(path, text):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
    return path


def render_figures(report_path, out_dir, predictions_dir=None):
    """Write ``tradeoff.svg`` and, per prediction CSV, histogram and agreement figures.

    Returns the list of written paths.
    """
    os.makedirs(out_dir, exist_ok=True)
    rows = read_csv_checked(report_path, TRADEOFF_COLUMNS)
    written = [_write(os.path.join(out_dir, "tradeoff.svg"), tradeoff_svg(rows))]
    if predictions_dir and os.path.isdir(predictions_dir):
        for name in sorted(os.listdir(predictions_dir)):
            if not name.endswith(".csv"):
                continue
            pred_rows = read_csv_checked(os.path.join(predictions_dir, name), PREDICTION_COLUMNS)
            stem = name[:-4]
            written.append(_write(os.path.join(out_dir, f"hist_{stem}.svg"),
                                  histogram_svg(pred_rows, title=stem)))
            written.append(_write(os.path.join(out_dir, f"agreement_{stem}.svg"),
                                  agreement_svg(pred_rows)))
    return written
