"""Disaggregation metrics and report emission (CSV, JSON, SVG)."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

CSV_COLUMNS = ("appliance", "mae_watts", "sae", "pred_total", "true_total", "share_pct")


class MetricError(ValueError):
    pass


def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(truth, dtype=np.float64).ravel()
    if p.size == 0 or t.size == 0:
        raise MetricError("metrics need at least one sample")
    if p.shape != t.shape:
        raise MetricError(f"length mismatch: {p.size} predictions vs {t.size} ground truth")
    return p, t


def mae(pred, truth) -> float:
    """Mean absolute error per time step, in the units of the inputs."""
    p, t = _pair(pred, truth)
    return float(np.mean(np.abs(p - t)))


def sae(pred, truth) -> float:
    """Signal aggregate error ``|r_hat - r| / r`` with ``r`` the true total."""
    p, t = _pair(pred, truth)
    r = float(np.sum(t))
    if r <= 0:
        raise MetricError(f"SAE undefined: true total energy is {r}")
    return abs(float(np.sum(p)) - r) / r


def energy_shares(totals) -> np.ndarray:
    """Percentage of the summed energy attributed to each appliance."""
    r = np.asarray(totals, dtype=np.float64)
    if np.any(r < 0):
        raise MetricError("energy totals must be non-negative")
    s = r.sum()
    if s <= 0:
        raise MetricError("all energy totals are zero")
    return 100.0 * r / s


@dataclass
class ApplianceMetrics:
    appliance: str
    mae_watts: float
    sae: float
    pred_total: float
    true_total: float
    share_pct: float
    true_share_pct: float


@dataclass
class Trace:
    timestamps: list[int]
    mains: list[float]
    truth: list[float]
    pred: list[float]


@dataclass
class EvalReport:
    appliances: list[ApplianceMetrics]
    metadata: dict = field(default_factory=dict)
    traces: dict[str, Trace] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"metadata": self.metadata,
                "appliances": [asdict(a) for a in self.appliances],
                "traces": {k: asdict(v) for k, v in self.traces.items()}}

    @classmethod
    def from_json(cls, doc: dict) -> "EvalReport":
        return cls([ApplianceMetrics(**a) for a in doc["appliances"]], doc.get("metadata", {}),
                   {k: Trace(**v) for k, v in doc.get("traces", {}).items()})


def _shares_or_nan(totals) -> np.ndarray:
    # a model predicting no energy at all still gets a report, without shares
    try:
        return energy_shares(totals)
    except MetricError:
        return np.full(len(totals), np.nan)


def build_report(predictions: dict[str, np.ndarray], truths: dict[str, np.ndarray],
                 clamp: bool = True, metadata: dict | None = None,
                 traces: dict[str, Trace] | None = None) -> EvalReport:
    """Score each appliance in Watts; negative predictions are clipped to 0 by default."""
    if not predictions:
        raise MetricError("report needs at least one appliance")
    names = list(predictions)
    rows = []
    preds = {}
    for name in names:
        p = np.asarray(predictions[name], dtype=np.float64)
        preds[name] = np.maximum(p, 0.0) if clamp else p
    pred_totals = [float(np.sum(preds[n])) for n in names]
    true_totals = [float(np.sum(truths[n])) for n in names]
    shares = _shares_or_nan(np.maximum(pred_totals, 0.0))
    true_shares = _shares_or_nan(true_totals)
    for i, name in enumerate(names):
        t = truths[name]
        try:
            s = sae(preds[name], t)
        except MetricError:
            s = float("nan")
        rows.append(ApplianceMetrics(name, mae(preds[name], t), s, pred_totals[i], true_totals[i],
                                     float(shares[i]), float(true_shares[i])))
    return EvalReport(rows, dict(metadata or {}), dict(traces or {}))


# ---------------------------------------------------------------- emission

def report_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for a in report.appliances:
        w.writerow([a.appliance] + [repr(float(getattr(a, c))) for c in CSV_COLUMNS[1:]])
    return buf.getvalue()


_COLORS = {"mains": "#9e9e9e", "truth": "#1f77b4", "pred": "#d62728"}
_PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def trace_svg(name: str, trace: Trace, width: int = 800, height: int = 300) -> str:
    """Mains, ground truth and prediction over the trace span as polylines."""
    pad = 40
    n = len(trace.timestamps)
    series = {"mains": trace.mains, "truth": trace.truth, "pred": trace.pred}
    top = max([max(v) for v in series.values() if v] + [1.0])
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{pad}" y="20" font-family="sans-serif" font-size="14">{_esc(name)}</text>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
             f'<text x="2" y="{pad + 4}" font-family="sans-serif" font-size="10">{top:.0f} W</text>']
    span_x = width - 2 * pad
    span_y = height - 2 * pad
    for key, values in series.items():
        if not values:
            continue
        pts = " ".join(f"{pad + span_x * i / max(n - 1, 1):.2f},{height - pad - span_y * v / top:.2f}"
                       for i, v in enumerate(values))
        parts.append(f'<polyline fill="none" stroke="{_COLORS[key]}" stroke-width="1" points="{pts}"/>')
    for i, key in enumerate(series):
        y = pad + 14 * i
        parts.append(f'<text x="{width - pad - 60}" y="{y}" font-family="sans-serif" font-size="11" '
                     f'fill="{_COLORS[key]}">{key}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def shares_svg(report: EvalReport, width: int = 600) -> str:
    """Predicted vs true energy shares as two stacked horizontal bars."""
    bar_h, pad = 30, 80
    height = 2 * bar_h + 60 + 16 * len(report.appliances)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>']
    span = width - pad - 20
    for row, (label, attr) in enumerate((("predicted", "share_pct"), ("truth", "true_share_pct"))):
        y = 20 + row * (bar_h + 10)
        parts.append(f'<text x="4" y="{y + bar_h * 0.65:.1f}" font-family="sans-serif" '
                     f'font-size="12">{label}</text>')
        x = float(pad)
        for i, a in enumerate(report.appliances):
            w = span * getattr(a, attr) / 100.0
            parts.append(f'<rect x="{x:.2f}" y="{y}" width="{w:.2f}" height="{bar_h}" '
                         f'fill="{_PALETTE[i % len(_PALETTE)]}"/>')
            x += w
    y0 = 20 + 2 * (bar_h + 10) + 10
    for i, a in enumerate(report.appliances):
        parts.append(f'<text x="{pad}" y="{y0 + 16 * i}" font-family="sans-serif" font-size="11" '
                     f'fill="{_PALETTE[i % len(_PALETTE)]}">{_esc(a.appliance)}: '
                     f'{a.share_pct:.1f}% predicted, {a.true_share_pct:.1f}% true</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_report(report: EvalReport, formats=("csv", "json", "svg"), prefix="report") -> list[Path]:
    """Write report files next to ``prefix``; output bytes depend only on the report."""
    if not report.appliances:
        raise MetricError("report has no appliances")
    unknown = set(formats) - {"csv", "json", "svg"}
    if unknown:
        raise MetricError(f"unknown report formats {sorted(unknown)}")
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    written = []
    if "csv" in formats:
        path = prefix.with_name(prefix.name + ".csv")
        path.write_text(report_csv(report), encoding="utf-8")
        written.append(path)
    if "json" in formats:
        path = prefix.with_name(prefix.name + ".json")
        path.write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        written.append(path)
    if "svg" in formats:
        path = prefix.with_name(prefix.name + "_shares.svg")
        path.write_text(shares_svg(report), encoding="utf-8")
        written.append(path)
        for name, trace in sorted(report.traces.items()):
            path = prefix.with_name(f"{prefix.name}_{name}_trace.svg")
            path.write_text(trace_svg(name, trace), encoding="utf-8")
            written.append(path)
    return written
