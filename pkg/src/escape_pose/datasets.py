"""Line-delimited JSON dataset files.

The first line is a header naming the format, its version and the keypoint
schema. Every following line is one sample::

    {"format": "escape-pose-jsonl", "version": 1, "schema": "h36m17", "joint_count": 17}
    {"id": "test-000000", "split": "test", "pred": [[...], ...], "gt": [[...], ...]}

Floats are written with Python's shortest round-trip repr, so reading a file
back reproduces every coordinate bit for bit.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import DataFormatError, EscapeError
from .pose import KeypointSchema, SampleRecord, check_pose, get_schema

FORMAT = "escape-pose-jsonl"
VERSION = 1


def _header(schema: KeypointSchema) -> dict:
    return {"format": FORMAT, "version": VERSION, "schema": schema.name, "joint_count": schema.joint_count}


def record_to_json(record: SampleRecord) -> str:
    row = {"id": record.id, "split": record.split.value, "pred": record.predicted.tolist()}
    if record.ground_truth is not None:
        row["gt"] = record.ground_truth.tolist()
    regime = record.meta.get("regime")
    if regime is not None:
        row["regime"] = regime
    return json.dumps(row, allow_nan=False)


def dumps(records: Iterable[SampleRecord], schema: KeypointSchema) -> str:
    lines = [json.dumps(_header(schema))]
    lines.extend(record_to_json(r) for r in records)
    return "\n".join(lines) + "\n"


def write_dataset(path, records: Iterable[SampleRecord], schema: KeypointSchema) -> None:
    Path(path).write_text(dumps(records, schema))


def _parse_pose(value, schema, where, field):
    try:
        pose = np.asarray(value, dtype=np.float64)
        return check_pose(pose, schema)
    except (TypeError, ValueError, EscapeError) as exc:
        raise DataFormatError(f"{where}: bad {field!r}: {exc}") from None


def loads(text: str, expected_schema: KeypointSchema | None = None) -> tuple[KeypointSchema, list[SampleRecord]]:
    lines = text.splitlines()
    if not lines:
        raise DataFormatError("empty dataset file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"line 1: header is not JSON: {exc}") from None
    if not isinstance(header, dict) or header.get("format") != FORMAT:
        raise DataFormatError(f"line 1: not a {FORMAT} file")
    if header.get("version") != VERSION:
        raise DataFormatError(f"unsupported dataset version {header.get('version')!r}")
    try:
        schema = get_schema(header.get("schema"))
    except EscapeError as exc:
        raise DataFormatError(str(exc)) from None
    if header.get("joint_count") != schema.joint_count:
        raise DataFormatError("header joint_count does not match its schema")
    if expected_schema is not None and expected_schema.name != schema.name:
        raise DataFormatError(f"dataset schema {schema.name!r} differs from requested {expected_schema.name!r}")

    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        where = f"line {lineno}"
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{where}: {exc}") from None
        if not isinstance(row, dict) or not isinstance(row.get("id"), str) or "pred" not in row:
            raise DataFormatError(f"{where}: record needs a string 'id' and a 'pred'")
        pred = _parse_pose(row["pred"], schema, where, "pred")
        gt = _parse_pose(row["gt"], schema, where, "gt") if row.get("gt") is not None else None
        try:
            rec = SampleRecord(row["id"], pred, gt, row.get("split", "test"))
        except ValueError:
            raise DataFormatError(f"{where}: unknown split {row.get('split')!r}") from None
        if "regime" in row:
            rec.meta["regime"] = row["regime"]
        records.append(rec)
    return schema, records


def read_dataset(path, expected_schema: KeypointSchema | None = None) -> tuple[KeypointSchema, list[SampleRecord]]:
    return loads(Path(path).read_text(), expected_schema)
