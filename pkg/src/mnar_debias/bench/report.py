"""Write experiment reports as JSON, per-repeat CSV and a markdown table."""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable, List

import numpy as np

from .experiment import ExperimentReport

FORMATS = ("json", "csv", "markdown")


def _default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def report_json(report: ExperimentReport, include_timing: bool = True) -> str:
    return json.dumps(report.to_dict(include_timing), indent=2, sort_keys=True, default=_default)


def read_report(path) -> ExperimentReport:
    with open(path) as fh:
        return ExperimentReport.from_dict(json.load(fh))


def markdown_table(report: ExperimentReport, digits: int = 4) -> str:
    """Rows are methods, columns are metrics, cells are ``mean ± sd``."""
    summary = report.summary()
    metrics = report.metrics()
    lines = ["| method | " + " | ".join(metrics) + " |", "|---" * (len(metrics) + 1) + "|"]
    for label in report.methods:
        cells = []
        for k in metrics:
            if k in summary[label]:
                mu, sd = summary[label][k]
                cells.append(f"{mu:.{digits}f} ± {sd:.{digits}f}")
            else:
                cells.append("N/A")
        lines.append(f"| {label} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def write_per_repeat_csv(report: ExperimentReport, path) -> None:
    metrics = report.metrics()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "repeat", *metrics])
        for label in report.methods:
            for r, rec in enumerate(report.per_repeat[label]):
                w.writerow([label, r, *(repr(rec[k]) if k in rec else "" for k in metrics)])


def emit_report(report: ExperimentReport, out_dir, formats: Iterable[str] = FORMATS) -> List[Path]:
    """Write the requested formats into ``out_dir`` and return the paths.

    ``report.json`` leaves wall times out so that identical runs give identical
    bytes; they go to ``timing.json`` instead.
    """
    formats = list(formats)
    bad = [f for f in formats if f not in FORMATS]
    if bad:
        raise ValueError(f"unknown report formats {bad}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write reports to {out}: {exc}") from exc
    written = []
    if "json" in formats:
        p = out / "report.json"
        p.write_text(report_json(report, include_timing=False))
        t = out / "timing.json"
        t.write_text(json.dumps(report.timing, indent=2))
        written += [p, t]
    if "csv" in formats:
        p = out / "per_repeat.csv"
        write_per_repeat_csv(report, p)
        written.append(p)
    if "markdown" in formats:
        p = out / "summary.md"
        p.write_text(markdown_table(report))
        written.append(p)
    return written
