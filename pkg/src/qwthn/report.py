"""Run artifacts: loss history as CSV or JSON plus an SVG loss chart."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable
from xml.sax.saxutils import escape

from .metrics import MetricReport
from .train import RunHistory

FORMATS = ("csv", "json", "svg")

_W, _H, _PAD = 640, 360, 48


def _points(series: list[tuple[int, float]], x_max: int, y_lo: float, y_hi: float) -> str:
    span = (y_hi - y_lo) or 1.0
    xs = max(x_max - 1, 1)
    pts = []
    for step, v in series:
        px = _PAD + (step - 1) / xs * (_W - 2 * _PAD)
        py = _H - _PAD - (v - y_lo) / span * (_H - 2 * _PAD)
        pts.append(f"{px:.2f},{py:.2f}")
    return " ".join(pts)


def loss_svg(history: RunHistory, title: str = "loss") -> str:
    """Standalone SVG with one polyline for training and one for validation loss."""
    train = [(i + 1, v) for i, v in enumerate(history.train_loss)]
    val = list(history.val_loss)
    values = [v for _, v in train] + [v for _, v in val]
    lo, hi = min(values), max(values)
    n = len(train)
    return "\n".join([
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" viewBox="0 0 {_W} {_H}">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W / 2}" y="24" text-anchor="middle" font-family="sans-serif" font-size="14">{escape(title)}</text>',
        f'<line x1="{_PAD}" y1="{_H - _PAD}" x2="{_W - _PAD}" y2="{_H - _PAD}" stroke="black"/>',
        f'<line x1="{_PAD}" y1="{_PAD}" x2="{_PAD}" y2="{_H - _PAD}" stroke="black"/>',
        f'<text x="{_PAD}" y="{_H - _PAD + 16}" font-family="sans-serif" font-size="10">1</text>',
        f'<text x="{_W - _PAD}" y="{_H - _PAD + 16}" text-anchor="end" font-family="sans-serif" font-size="10">{n}</text>',
        f'<text x="{_PAD - 4}" y="{_PAD}" text-anchor="end" font-family="sans-serif" font-size="10">{hi:.3g}</text>',
        f'<text x="{_PAD - 4}" y="{_H - _PAD}" text-anchor="end" font-family="sans-serif" font-size="10">{lo:.3g}</text>',
        f'<polyline id="train" fill="none" stroke="#1f77b4" stroke-width="1.5" points="{_points(train, n, lo, hi)}"/>',
        f'<polyline id="val" fill="none" stroke="#d62728" stroke-width="2" points="{_points(val, n, lo, hi)}"/>',
        f'<text x="{_W - _PAD}" y="{_PAD}" text-anchor="end" fill="#1f77b4" font-family="sans-serif" font-size="11">train</text>',
        f'<text x="{_W - _PAD}" y="{_PAD + 14}" text-anchor="end" fill="#d62728" font-family="sans-serif" font-size="11">val</text>',
        "</svg>",
        "",
    ])


def emit_report(history: RunHistory, metrics: MetricReport | None, formats: Iterable[str], out_dir,
                stem: str = "history") -> dict[str, Path]:
    """Write the requested formats into ``out_dir`` and return their paths."""
    formats = list(formats)
    bad = [f for f in formats if f not in FORMATS]
    if bad:
        raise ValueError(f"unknown report formats {bad}; choose from {FORMATS}")
    if not history.train_loss:
        raise ValueError("cannot report an empty history")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths: dict[str, Path] = {}
    if "csv" in formats:
        paths["csv"] = history.write_csv(out / f"{stem}.csv")
    if "json" in formats:
        doc = {
            "summary": history.summary(),
            "metrics": metrics.to_dict() if metrics is not None else None,
            "params": history.params.to_dict() if history.params else None,
        }
        p = out / f"{stem}.json"
        p.write_text(json.dumps(doc, indent=2))
        paths["json"] = p
    if "svg" in formats:
        p = out / f"{stem}.svg"
        p.write_text(loss_svg(history, title=f"{history.extra.get('task', 'training')} loss"))
        paths["svg"] = p
    return paths


def write_metrics(report: MetricReport, out_dir, percent: bool = False, stem: str = "eval") -> dict[str, Path]:
    """Metric report as JSON plus a one-row CSV."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    d = report.to_dict(percent)
    j = out / f"{stem}.json"
    j.write_text(json.dumps(d, indent=2))
    c = out / f"{stem}.csv"
    with c.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(d))
        w.writeheader()
        w.writerow(d)
    return {"json": j, "csv": c}
