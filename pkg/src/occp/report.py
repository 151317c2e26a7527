"""Tabular results and their CSV/JSON serialisation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class ReplicationReport:
    columns: list
    rows: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    seed: int | None = None

    def add(self, **row):
        unknown = set(row) - set(self.columns)
        if unknown:
            raise KeyError(f"unknown columns {sorted(unknown)}")
        self.rows.append({c: row.get(c) for c in self.columns})

    def select(self, **match):
        return [r for r in self.rows if all(r.get(k) == v for k, v in match.items())]

    def value(self, column, **match):
        rows = self.select(**match)
        if len(rows) != 1:
            raise KeyError(f"{len(rows)} rows match {match}")
        return rows[0][column]


def _fmt(v):
    if isinstance(v, float) or (hasattr(v, "dtype") and getattr(v.dtype, "kind", "") == "f"):
        v = float(v)
        if math.isnan(v):
            return "nan"
        return format(v, ".17g")
    if v is None:
        return ""
    return str(v)


def _jsonable(v):
    if hasattr(v, "item"):
        v = v.item()
    if isinstance(v, float) and not math.isfinite(v):
        return str(v)
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    return v


def emit_report(report: ReplicationReport, fmt: str, path) -> None:
    path = Path(path)
    if fmt == "csv":
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(report.columns)
            for r in report.rows:
                w.writerow([_fmt(r[c]) for c in report.columns])
    elif fmt == "json":
        doc = {
            "columns": list(report.columns),
            "rows": [{c: _jsonable(r[c]) for c in report.columns} for r in report.rows],
            "config": _jsonable(report.config),
            "seed": report.seed,
        }
        # floats are written with repr, which round-trips exactly
        path.write_text(json.dumps(doc, indent=1, sort_keys=False) + "\n")
    else:
        raise ValueError(f"unknown format {fmt!r}")


def load_report_json(path) -> ReplicationReport:
    doc = json.loads(Path(path).read_text())
    return ReplicationReport(doc["columns"], doc["rows"], doc["config"], doc["seed"])
