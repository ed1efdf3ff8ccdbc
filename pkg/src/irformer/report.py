"""Evaluation report files: per-threshold CSV, summary text and SVG curves."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from irformer.errors import NumericalError  # noqa: E402
from irformer.metrics import EvalReport  # noqa: E402

REPORT_HEADER = "# irformer eval report v1"
SWEEP_HEADER = "# irformer noise sweep v1"
UNDEFINED = "undefined"

# fixed salt and no date so repeated runs write byte-identical SVG
_SVG_RC = {"svg.hashsalt": "irformer", "svg.fonttype": "path"}
_SVG_META = {"Date": None, "Creator": None}


def fmt(value: Optional[float]) -> str:
    """Exact decimal text for a metric; ``undefined`` for None, error on NaN."""
    if value is None:
        return UNDEFINED
    value = float(value)
    if not math.isfinite(value):
        raise NumericalError(f"metric value {value} is not finite")
    return repr(value)


def write_report_csv(report: EvalReport, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(REPORT_HEADER + "\n")
        w = csv.writer(fh)
        w.writerow(["threshold", "pd", "fa", "f1_target", "f1_pixel",
                    "tp", "fp", "fn", "pixel_tp", "pixel_fp", "pixel_fn"])
        for p in report.roc.points:
            w.writerow([fmt(p.threshold), fmt(p.pd), fmt(p.fa), fmt(p.f1_target),
                        fmt(p.f1_pixel), p.tp, p.fp, p.fn, p.pixel_tp, p.pixel_fp, p.pixel_fn])


def write_summary(report: EvalReport, path: str | Path, extra: Optional[dict] = None) -> None:
    """``key = value`` lines; undefined metrics are written as ``undefined``."""
    items = dict(extra or {})
    items.update(report.summary())
    lines = []
    for key, value in items.items():
        if isinstance(value, (int, str)) and not isinstance(value, bool):
            lines.append(f"{key} = {value}")
        else:
            lines.append(f"{key} = {fmt(value)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_summary(path: str | Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def _save(fig, path) -> None:
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)


def plot_pd_fa(curves: dict[str, Sequence[tuple[float, float]]], path: str | Path,
               fa_max: float = 2.0) -> None:
    with plt.rc_context(_SVG_RC):
        fig, ax = plt.subplots(figsize=(5, 4))
        for label, curve in curves.items():
            fa = [c[0] for c in curve]
            pd = [c[1] for c in curve]
            ax.step(fa, pd, where="post", label=label)
        ax.set_xlim(0, fa_max)
        ax.set_ylim(0, 1.02)
        ax.set_xlabel("false alarms per image (Fa)")
        ax.set_ylabel("probability of detection (Pd)")
        ax.legend(loc="lower right")
        ax.grid(alpha=0.3)
        _save(fig, path)


def plot_f1_threshold(report: EvalReport, path: str | Path, label: str = "") -> None:
    with plt.rc_context(_SVG_RC):
        fig, ax = plt.subplots(figsize=(5, 4))
        ts = [p.threshold for p in report.roc.points]
        ax.plot(ts, [p.f1_target for p in report.roc.points], label=f"{label} F1 target".strip())
        ax.plot(ts, [p.f1_pixel for p in report.roc.points], label=f"{label} F1 pixel".strip())
        ax.set_xlabel("threshold")
        ax.set_ylabel("F1")
        ax.set_ylim(0, 1.02)
        ax.legend(loc="best")
        ax.grid(alpha=0.3)
        _save(fig, path)


def plot_noise_sweep(variances: Sequence[float], series: dict[str, Sequence[Optional[float]]],
                     path: str | Path) -> None:
    with plt.rc_context(_SVG_RC):
        fig, ax = plt.subplots(figsize=(5, 4))
        for label, values in series.items():
            pts = [(v, s) for v, s in zip(variances, values) if s is not None]
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=label)
        ax.set_xlabel("noise variance (0-255 scale)")
        ax.set_ylabel("score")
        ax.set_ylim(0, 1.02)
        ax.legend(loc="best")
        ax.grid(alpha=0.3)
        _save(fig, path)
