"""CSV / JSON report emission for metrics, SLC sweeps and retention tables."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict
from pathlib import Path

from .errors import ConfigError, EmptyReport, IoError
from .filtering import RETENTION_COLUMNS, RetentionReport
from .metrics import METRIC_COLUMNS, MetricsReport
from .slc import SWEEP_COLUMNS, SweepTable


def _clean(v):
    if isinstance(v, float) and math.isnan(v):
        return None
    return v


def metrics_rows(report: MetricsReport) -> list[dict]:
    return [{k: _clean(v) for k, v in asdict(row).items()} for row in report.rows]


def sweep_rows(table: SweepTable) -> list[dict]:
    return [{k: _clean(v) for k, v in row.items()} for row in table.rows()]


def retention_rows(report: RetentionReport) -> list[dict]:
    return [{
        "view": row.view.value,
        "avg_total_slices": row.total_slices,
        "avg_retained_slices": row.retained_slices,
        "retention_rate": row.retention_rate,
        "reduction_pct": row.reduction_pct,
    } for row in report.rows]


def _sections(metrics, slc, retention) -> dict[str, tuple[list[str], list[dict]]]:
    sections = {}
    if metrics is not None:
        sections["metrics"] = (METRIC_COLUMNS, metrics_rows(metrics))
    if slc is not None:
        sections["slc"] = (SWEEP_COLUMNS, sweep_rows(slc))
    if retention is not None:
        sections["retention"] = (RETENTION_COLUMNS, retention_rows(retention))
    if not sections:
        raise EmptyReport("report has no sections")
    return sections


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path: str | os.PathLike, columns: list[str], rows: list[dict]) -> Path:
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(columns)
            for row in rows:
                writer.writerow([_cell(row[c]) for c in columns])
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    return path


def emit_report(out_dir: str | os.PathLike, metrics: MetricsReport | None = None,
                slc: SweepTable | None = None, retention: RetentionReport | None = None,
                fmt: str = "csv") -> list[Path]:
    """Write each present section; CSV gives one file per section, JSON one ``report.json``.

    The SLC section is long-format (one row per delta, selection, organ, view),
    ready for plotting SLC-versus-delta curves.
    """
    sections = _sections(metrics, slc, retention)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        if fmt == "json":
            path = out / "report.json"
            path.write_text(json.dumps({name: rows for name, (_, rows) in sections.items()}, indent=2))
            return [path]
        if fmt != "csv":
            raise ConfigError(f"unknown report format {fmt!r}")
        return [write_csv(out / f"{name}.csv", columns, rows) for name, (columns, rows) in sections.items()]
    except OSError as exc:
        raise IoError(f"cannot write report to {out}: {exc}") from exc
