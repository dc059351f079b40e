"""Per-sample run reports written as CSV with a commented header block.

The header carries the configuration echo (``# config.<key>: <value>``) and
the aggregate block (``# aggregate.<key>: <value>``). Writing a report parses
the file back and checks that the aggregates match a recomputation from the
rows, so a report on disk is always self-consistent.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DataFormatError, EscapeError

TIMING_KEYS = ("mean_elapsed_us", "mean_elapsed_us_fast", "mean_elapsed_us_adapted", "total_elapsed_us")


class ReportMismatchError(EscapeError):
    pass


@dataclass
class SampleRow:
    id: str
    energy: float
    ood: bool
    path: str
    distal_pre: float
    distal_post: float
    mpjpe_pre: float
    mpjpe_post: float
    pa_mpjpe_pre: float
    pa_mpjpe_post: float
    l_tt_trace: list = field(default_factory=list)
    elapsed_us: float = 0.0


COLUMNS = [f.name for f in fields(SampleRow)]


def _mean(values) -> float:
    values = list(values)
    return float(np.mean(values)) if values else math.nan


def aggregate_rows(rows: list[SampleRow]) -> dict:
    agg = {
        "n": len(rows),
        "n_fast": sum(r.path == "fast" for r in rows),
        "n_adapted": sum(r.path == "adapted" for r in rows),
        "n_ood": sum(r.ood for r in rows),
    }
    for metric in ("distal", "mpjpe", "pa_mpjpe"):
        pre = _mean(getattr(r, f"{metric}_pre") for r in rows)
        post = _mean(getattr(r, f"{metric}_post") for r in rows)
        agg[f"{metric}_pre"] = pre
        agg[f"{metric}_post"] = post
        # negative delta means the arm improved on the backbone
        agg[f"{metric}_delta"] = post - pre
    for path in ("fast", "adapted"):
        agg[f"distal_post_{path}"] = _mean(r.distal_post for r in rows if r.path == path)
    agg["mean_elapsed_us"] = _mean(r.elapsed_us for r in rows)
    agg["mean_elapsed_us_fast"] = _mean(r.elapsed_us for r in rows if r.path == "fast")
    agg["mean_elapsed_us_adapted"] = _mean(r.elapsed_us for r in rows if r.path == "adapted")
    agg["total_elapsed_us"] = float(sum(r.elapsed_us for r in rows))
    return agg


@dataclass
class RunReport:
    rows: list
    config: dict
    aggregate: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.aggregate:
            self.aggregate = aggregate_rows(self.rows)

    def verify(self) -> None:
        """Raise if the aggregate block disagrees with the rows."""
        fresh = aggregate_rows(self.rows)
        if set(fresh) != set(self.aggregate):
            raise ReportMismatchError("aggregate keys differ from recomputation")
        for key, value in fresh.items():
            stored = self.aggregate[key]
            if not (value == stored or (math.isnan(value) and math.isnan(stored))):
                raise ReportMismatchError(f"aggregate {key!r}: stored {stored!r}, recomputed {value!r}")

    def without_timings(self) -> tuple:
        rows = [tuple(v for k, v in vars(r).items() if k != "elapsed_us") for r in self.rows]
        agg = {k: v for k, v in self.aggregate.items() if k not in TIMING_KEYS}
        return self.config, agg, rows


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, list):
        return ";".join(repr(float(v)) for v in value)
    return str(value)


def dumps(report: RunReport) -> str:
    buf = io.StringIO()
    for key, value in report.config.items():
        buf.write(f"# config.{key}: {value}\n")
    for key, value in report.aggregate.items():
        buf.write(f"# aggregate.{key}: {_fmt(value)}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    for row in report.rows:
        writer.writerow([_fmt(getattr(row, c)) for c in COLUMNS])
    return buf.getvalue()


def _parse_scalar(text: str):
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def loads(text: str) -> RunReport:
    config, aggregate, body = {}, {}, []
    for line in text.splitlines():
        if line.startswith("# config."):
            key, _, value = line[len("# config."):].partition(": ")
            config[key] = value
        elif line.startswith("# aggregate."):
            key, _, value = line[len("# aggregate."):].partition(": ")
            aggregate[key] = _parse_scalar(value)
        else:
            body.append(line)
    reader = csv.DictReader(body)
    if reader.fieldnames != COLUMNS:
        raise DataFormatError(f"unexpected report columns {reader.fieldnames}")
    rows = []
    for rec in reader:
        rows.append(SampleRow(
            id=rec["id"],
            energy=float(rec["energy"]),
            ood=rec["ood"] == "1",
            path=rec["path"],
            distal_pre=float(rec["distal_pre"]),
            distal_post=float(rec["distal_post"]),
            mpjpe_pre=float(rec["mpjpe_pre"]),
            mpjpe_post=float(rec["mpjpe_post"]),
            pa_mpjpe_pre=float(rec["pa_mpjpe_pre"]),
            pa_mpjpe_post=float(rec["pa_mpjpe_post"]),
            l_tt_trace=[float(v) for v in rec["l_tt_trace"].split(";")] if rec["l_tt_trace"] else [],
            elapsed_us=float(rec["elapsed_us"]),
        ))
    return RunReport(rows, config, aggregate)


def write_report(report: RunReport, path: Optional[str | Path] = None) -> str:
    """Serialize, re-parse and verify; write to ``path`` when given. Returns the text."""
    report.verify()
    text = dumps(report)
    loads(text).verify()
    if path is not None:
        Path(path).write_text(text)
    return text


def read_report(path) -> RunReport:
    report = loads(Path(path).read_text())
    report.verify()
    return report


def write_csv(path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
