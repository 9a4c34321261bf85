"""Biomarker report serialization: CSV rows, JSON summary, and figures.

The CSV carries one row per usable annotated plane; study-level values
(stenosis grading, pulse wave velocity) live in the JSON summary.  Figures
are rendered to PNG next to the delimited output.
"""

from __future__ import annotations

import math
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .biomarkers import BiomarkerReport
from .jsonio import canonical_dump_bytes

CSV_COLUMNS = (
    "plane_id", "arc_position", "timepoint", "lumen_area",
    "equivalent_diameter", "caliper_diameter", "vwt_mean", "vwt_max",
    "flow_rate", "wss_mean", "wss_max",
)

FIGURE_DPI = 120


def _clean(x):
    if x is None:
        return None
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def _fmt(x) -> str:
    x = _clean(x)
    if x is None:
        return ""
    if isinstance(x, float):
        return f"{x:.9g}"
    return str(x)


def report_to_dict(report: BiomarkerReport) -> dict:
    rows = []
    for r in report.rows:
        rows.append({c: _clean(getattr(r, c)) for c in CSV_COLUMNS})
    pwv_val = report.pwv_m_per_s
    if pwv_val is not None and not math.isfinite(pwv_val):
        pwv_val = None  # not measurable: feet do not propagate
    return {
        "rows": rows,
        "summary": {
            "stenosis_percent": _clean(report.stenosis_percent),
            "stenosis_percent_equivalent": _clean(report.stenosis_percent_equivalent),
            "stenosis_plane_id": report.stenosis_plane_id,
            "reference_plane_id": report.reference_plane_id,
            "pwv_m_per_s": _clean(pwv_val),
            "pwv_measurable": report.pwv_measurable,
            "systole_ms": _clean(report.systole_ms),
        },
        "waveforms": [
            {
                "arc_position": float(w.arc_position),
                "times": [float(t) for t in w.times],
                "values": [float(q) for q in w.values],
            }
            for w in report.waveforms
        ],
    }


def write_report_csv(report: BiomarkerReport, path) -> None:
    lines = [",".join(CSV_COLUMNS)]
    for r in report.rows:
        lines.append(",".join(_fmt(getattr(r, c)) for c in CSV_COLUMNS))
    with open(path, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode("ascii"))


def write_report_json(report: BiomarkerReport, path) -> None:
    with open(path, "wb") as f:
        f.write(canonical_dump_bytes(report_to_dict(report)))


def _finite_series(rows, attr):
    xs, ys = [], []
    for r in rows:
        v = getattr(r, attr)
        if v is not None and math.isfinite(v):
            xs.append(r.arc_position)
            ys.append(v)
    return xs, ys


def render_report_figures(report: BiomarkerReport, out_dir,
                          prefix: str = "biomarkers") -> list:
    """Render per-arc biomarker plots; returns the written file paths."""
    os.makedirs(out_dir, exist_ok=True)
    written = []

    def save(fig, name):
        path = os.path.join(out_dir, f"{prefix}_{name}.png")
        fig.savefig(path, dpi=FIGURE_DPI, metadata={"Software": "carotidkit"})
        plt.close(fig)
        written.append(path)

    xs, means = _finite_series(report.rows, "vwt_mean")
    _, maxes = _finite_series(report.rows, "vwt_max")
    if xs:
        fig, ax = plt.subplots(figsize=(6, 3.5), constrained_layout=True)
        ax.plot(xs, means, "o-", label="mean")
        if len(maxes) == len(xs):
            ax.plot(xs, maxes, "s--", label="max")
        ax.set_xlabel("arc position (mm)")
        ax.set_ylabel("wall thickness (mm)")
        ax.legend()
        save(fig, "vwt")

    xs, areas = _finite_series(report.rows, "lumen_area")
    if xs:
        fig, axes = plt.subplots(1, 2, figsize=(9, 3.5), constrained_layout=True)
        axes[0].plot(xs, areas, "o-")
        axes[0].set_xlabel("arc position (mm)")
        axes[0].set_ylabel("lumen area (mm$^2$)")
        for attr, style, label in (("equivalent_diameter", "o-", "equivalent"),
                                   ("caliper_diameter", "s--", "min caliper")):
            dx, dy = _finite_series(report.rows, attr)
            if dx:
                axes[1].plot(dx, dy, style, label=label)
        axes[1].set_xlabel("arc position (mm)")
        axes[1].set_ylabel("diameter (mm)")
        axes[1].legend()
        if report.stenosis_percent is not None:
            axes[1].set_title(f"stenosis {report.stenosis_percent:.1f}%")
        save(fig, "lumen")

    xs, wmean = _finite_series(report.rows, "wss_mean")
    if xs:
        fig, ax = plt.subplots(figsize=(6, 3.5), constrained_layout=True)
        ax.plot(xs, wmean, "o-", label="mean")
        wx, wmax = _finite_series(report.rows, "wss_max")
        if wx:
            ax.plot(wx, wmax, "s--", label="max")
        ax.set_xlabel("arc position (mm)")
        ax.set_ylabel("wall shear stress (Pa)")
        ax.legend()
        save(fig, "wss")

    if report.waveforms:
        fig, ax = plt.subplots(figsize=(6, 3.5), constrained_layout=True)
        for w in report.waveforms:
            ax.plot(w.times, w.values, label=f"{w.arc_position:.0f} mm")
        ax.set_xlabel("time (ms)")
        ax.set_ylabel("flow rate (ml/s)")
        if len(report.waveforms) <= 8:
            ax.legend(fontsize="small")
        title = ""
        if report.pwv_m_per_s is not None and math.isfinite(report.pwv_m_per_s):
            title = f"PWV {report.pwv_m_per_s:.2f} m/s"
        if title:
            ax.set_title(title)
        save(fig, "waveforms")

    return written
