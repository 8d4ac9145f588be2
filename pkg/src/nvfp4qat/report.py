"""Summary tables and hand-written SVG figures for a directory of run records.

Output depends only on the records: numbers are printed with fixed
precision and every collection is sorted before drawing, so regenerating a
report gives identical bytes.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .trainlab import BASELINE, RunRecord, aggregate, normalize_to_baseline

__all__ = ["SUMMARY_COLUMNS", "find_records", "summary_rows", "write_report", "prc_svg", "bars_svg",
           "histogram_svg", "tier_lines_svg", "svg_path_points"]

SUMMARY_COLUMNS = [
    "run", "arch", "tier", "recipe", "seed", "fold", "test_auprc", "test_auprc_per_image",
    "normalized_auprc", "best_epoch", "stopped_epoch", "best_val_loss", "spikiness",
    "attention_entropy", "conformance_passed", "seconds",
]
TIER_ORDER = {"s": 0, "micro-fragile": 0, "m": 1, "l": 2}
PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"]

W, H = 360, 280
ML, MR, MT, MB = 48, 12, 28, 40


def find_records(root) -> list[tuple[str, RunRecord]]:
    root = Path(root)
    found = sorted(p.parent for p in root.rglob("record.json"))
    return [(str(p.relative_to(root)) if p != root else p.name, RunRecord.read(p)) for p in found]


def _fmt(v, nd=6) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return "nan" if np.isnan(v) else f"{v:.{nd}f}"
    return str(v)


def summary_rows(records) -> list[dict]:
    norm = {}
    try:
        for row in normalize_to_baseline([r for _, r in records if "fold" not in r.config]):
            norm[(row["arch"], row["tier"], row["recipe"], row["seed"])] = row["normalized"]
    except ValueError:
        pass  # no baseline in this set; the column stays empty
    rows = []
    for name, r in records:
        arch, tier, recipe, seed = r.key
        rows.append({
            "run": name, "arch": arch, "tier": tier, "recipe": recipe, "seed": seed,
            "fold": r.config.get("fold"), "test_auprc": r.test_auprc,
            "test_auprc_per_image": r.test_auprc_per_image,
            "normalized_auprc": norm.get((arch, tier, recipe, seed)),
            "best_epoch": r.best_epoch, "stopped_epoch": r.stopped_epoch, "best_val_loss": r.best_val_loss,
            "spikiness": r.spikiness,
            "attention_entropy": r.mean_attention_entropy() if r.attention else None,
            "conformance_passed": r.conformance.get("passed"), "seconds": r.seconds,
        })
    return rows


# -- svg primitives --------------------------------------------------------

class _Canvas:
    def __init__(self, title, xlabel, ylabel, xlim, ylim, width=W, height=H):
        self.w, self.h = width, height
        self.xlim, self.ylim = xlim, ylim
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="10">',
            f'<rect width="{width}" height="{height}" fill="white"/>',
            f'<text x="{width / 2:.2f}" y="16" text-anchor="middle" font-size="12">{escape(title)}</text>',
            f'<text x="{width / 2:.2f}" y="{height - 6}" text-anchor="middle">{escape(xlabel)}</text>',
            f'<text x="12" y="{height / 2:.2f}" text-anchor="middle" '
            f'transform="rotate(-90 12 {height / 2:.2f})">{escape(ylabel)}</text>',
        ]
        x0, x1, y0, y1 = ML, width - MR, MT, height - MB
        self.parts.append(f'<rect x="{x0}" y="{y0}" width="{x1 - x0}" height="{y1 - y0}" '
                          f'fill="none" stroke="#444"/>')
        for t in np.linspace(ylim[0], ylim[1], 5):
            y = self.py(t)
            self.parts.append(f'<text x="{x0 - 4}" y="{y + 3:.2f}" text-anchor="end">{t:.2f}</text>')

    def px(self, x):
        a, b = self.xlim
        return ML + (x - a) / (b - a if b != a else 1) * (self.w - ML - MR)

    def py(self, y):
        a, b = self.ylim
        return self.h - MB - (y - a) / (b - a if b != a else 1) * (self.h - MT - MB)

    def xticks(self, ticks, labels=None):
        for i, t in enumerate(ticks):
            lab = labels[i] if labels else f"{t:.2f}"
            self.parts.append(f'<text x="{self.px(t):.2f}" y="{self.h - MB + 12}" '
                              f'text-anchor="middle">{escape(str(lab))}</text>')

    def path(self, pts, colour, width=1.5):
        d = " ".join(f"{'M' if i == 0 else 'L'}{self.px(x):.2f},{self.py(y):.2f}" for i, (x, y) in enumerate(pts))
        self.parts.append(f'<path d="{d}" fill="none" stroke="{colour}" stroke-width="{width}"/>')

    def rect(self, x, y, w, h, colour):
        self.parts.append(f'<rect x="{x:.2f}" y="{y:.2f}" width="{w:.2f}" height="{h:.2f}" fill="{colour}"/>')

    def dot(self, x, y, colour, r=2.0):
        self.parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="{r}" fill="{colour}" stroke="black" '
                          f'stroke-width="0.5"/>')

    def line(self, x0, y0, x1, y1, colour="black", width=1.0, dash=None):
        extra = f' stroke-dasharray="{dash}"' if dash else ""
        self.parts.append(f'<line x1="{x0:.2f}" y1="{y0:.2f}" x2="{x1:.2f}" y2="{y1:.2f}" '
                          f'stroke="{colour}" stroke-width="{width}"{extra}/>')

    def legend(self, items):
        for i, (label, colour) in enumerate(items):
            y = MT + 10 + 12 * i
            self.parts.append(f'<rect x="{self.w - MR - 110}" y="{y - 7}" width="8" height="8" fill="{colour}"/>')
            self.parts.append(f'<text x="{self.w - MR - 98}" y="{y}">{escape(label)}</text>')

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def svg_path_points(svg: str) -> list[tuple[float, float]]:
    """Pixel coordinates of the first path in an SVG produced here."""
    start = svg.index(' d="') + 4
    d = svg[start:svg.index('"', start)]
    return [tuple(float(v) for v in tok[1:].split(",")) for tok in d.split()]


def prc_svg(curves: dict, title="Precision-recall") -> str:
    """``curves`` maps a label to (recall, precision) points; drawn as steps like the metric."""
    c = _Canvas(title, "recall", "precision", (0.0, 1.0), (0.0, 1.0))
    c.xticks(np.linspace(0, 1, 5))
    items = []
    for i, label in enumerate(sorted(curves)):
        colour = PALETTE[i % len(PALETTE)]
        c.path([tuple(p) for p in curves[label]], colour)
        items.append((label, colour))
    if len(items) > 1:
        c.legend(items)
    return c.render()


def bars_svg(groups: dict, title="Normalized AUPRC (% of baseline)") -> str:
    """``groups`` maps a label to per-seed values; bars show the mean with a 95% CI and seed dots."""
    labels = sorted(groups)
    vals = [np.asarray(groups[k], dtype=float) for k in labels]
    top = max([110.0] + [float(v.max()) * 1.05 for v in vals if v.size])
    lo = min([80.0] + [float(v.min()) * 0.95 for v in vals if v.size])
    c = _Canvas(title, "recipe", "% of baseline", (0.0, float(len(labels))), (lo, top))
    c.xticks([i + 0.5 for i in range(len(labels))], labels)
    c.line(c.px(0), c.py(100.0), c.px(len(labels)), c.py(100.0), "#888", dash="4 3")
    for i, (k, v) in enumerate(zip(labels, vals)):
        agg = aggregate(v)
        colour = PALETTE[i % len(PALETTE)]
        x0, x1 = c.px(i + 0.2), c.px(i + 0.8)
        c.rect(x0, c.py(agg["mean"]), x1 - x0, c.py(lo) - c.py(agg["mean"]), colour)
        xm = c.px(i + 0.5)
        c.line(xm, c.py(agg["ci_low"]), xm, c.py(agg["ci_high"]), "black", 1.2)
        for j, s in enumerate(v):
            c.dot(c.px(i + 0.3 + 0.4 * (j + 0.5) / len(v)), c.py(s), "white")
    return c.render()


def histogram_svg(hist, title="Prediction histogram") -> str:
    h = np.asarray(hist, dtype=float)
    frac = h / h.sum() if h.sum() else h
    # log-scaled share keeps the sparse positive tail visible
    y = np.log10(np.maximum(frac, 1e-6))
    c = _Canvas(title, "predicted probability", "log10 share", (0.0, 1.0), (-6.0, 0.0))
    c.xticks(np.linspace(0, 1, 5))
    bw = 1.0 / len(h)
    for i, v in enumerate(y):
        if frac[i] > 0:
            x0 = c.px(i * bw)
            c.rect(x0, c.py(v), c.px((i + 1) * bw) - x0, c.py(-6.0) - c.py(v), PALETTE[0])
    return c.render()


def tier_lines_svg(series: dict, tiers, title="AUPRC vs model scale") -> str:
    """``series`` maps (arch, recipe) labels to {tier: [auprc per seed]}."""
    c = _Canvas(title, "tier", "test AUPRC", (-0.5, len(tiers) - 0.5), (0.0, 1.0))
    c.xticks(list(range(len(tiers))), list(tiers))
    items = []
    for i, label in enumerate(sorted(series)):
        colour = PALETTE[i % len(PALETTE)]
        pts = [(j, float(np.mean(series[label][t]))) for j, t in enumerate(tiers) if t in series[label]]
        c.path(pts, colour)
        for x, y in pts:
            c.dot(c.px(x), c.py(y), colour, 2.5)
        items.append((label, colour))
    c.legend(items)
    return c.render()


# -- report ----------------------------------------------------------------

def _safe(name: str) -> str:
    return name.replace("/", "__")


def write_report(records_dir, out_dir=None) -> dict:
    """Write summary.csv, report.json and SVG figures; returns the report dictionary."""
    records = find_records(records_dir)
    if not records:
        raise FileNotFoundError(f"no run records under {records_dir}")
    out = Path(out_dir) if out_dir is not None else Path(records_dir) / "report"
    out.mkdir(parents=True, exist_ok=True)
    rows = summary_rows(records)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[k]) for k in SUMMARY_COLUMNS])
    (out / "summary.csv").write_text(buf.getvalue())

    figures = []
    for name, r in records:
        stem = _safe(name)
        (out / f"prc_{stem}.svg").write_text(prc_svg({r.key[2]: r.prc}, f"PRC {name}"))
        (out / f"hist_{stem}.svg").write_text(histogram_svg(r.histogram, f"Predictions {name}"))
        figures += [f"prc_{stem}.svg", f"hist_{stem}.svg"]

    report: dict = {"runs": len(records), "groups": [], "flags": []}
    plain = [r for _, r in records if "fold" not in r.config]
    if any(r.key[2] == BASELINE for r in plain):
        try:
            normed = normalize_to_baseline(plain)
        except ValueError as exc:
            report["flags"].append(str(exc))
            normed = []
        by_group: dict = {}
        for row in normed:
            by_group.setdefault((row["arch"], row["tier"]), {}).setdefault(row["recipe"], []).append(
                row["normalized"])
        for (arch, tier), recipes in sorted(by_group.items()):
            for recipe, vals in sorted(recipes.items()):
                agg = aggregate(vals)
                report["groups"].append({"arch": arch, "tier": tier, "recipe": recipe,
                                         "normalized": agg, "values": vals})
                if recipe != BASELINE and agg["mean"] < 90.0:
                    report["flags"].append(f"{arch}/{tier}/{recipe}: normalized AUPRC mean "
                                           f"{agg['mean']:.1f}% is below 90% of baseline")
            fname = f"normalized_{arch}_{tier}.svg"
            (out / fname).write_text(bars_svg(recipes, f"Normalized AUPRC {arch}/{tier}"))
            figures.append(fname)

    tiers_seen = sorted({r.key[1] for _, r in records}, key=lambda t: (TIER_ORDER.get(t, 9), t))
    series: dict = {}
    for _, r in records:
        arch, tier, recipe, _ = r.key
        series.setdefault(f"{arch} {recipe}", {}).setdefault(tier, []).append(r.test_auprc)
    (out / "auprc_vs_tier.svg").write_text(tier_lines_svg(series, tiers_seen))
    figures.append("auprc_vs_tier.svg")
    report["figures"] = sorted(figures)
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    return report
