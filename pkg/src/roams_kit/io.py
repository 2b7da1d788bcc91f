"""CSV and JSON files: observation series, tables and fit reports.

Series files have a header ``t,y1,...,yp``; an empty field marks a missing
value.  Floats are written with ``repr`` so that parse/emit round-trips are
byte-stable.  Every writer goes through a temp file and an atomic rename.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .errors import InputError
from .report import SCHEMA_VERSION, FitReport
from .ssm import ObservationSeries


def atomic_write(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def fmt(x) -> str:
    """Cell text: '' for NaN/None, integers without a decimal point, repr for floats."""
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, str):
        return x
    x = float(x)
    if math.isnan(x):
        return ""
    return repr(x)


def _fmt_time(t) -> str:
    t = float(t)
    return str(int(t)) if t.is_integer() else repr(t)


def table_text(columns, rows) -> str:
    """CSV text (LF line endings) for an iterable of row sequences."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([fmt(x) for x in r])
    return buf.getvalue()


def write_table(path, columns, rows):
    atomic_write(path, table_text(columns, rows))


def write_dict_table(path, columns, dict_rows):
    write_table(path, columns, ([d.get(c) for c in columns] for d in dict_rows))


def series_text(obs: ObservationSeries) -> str:
    cols = ["t"] + [f"y{j + 1}" for j in range(obs.p)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for t, row in zip(obs.times, obs.values):
        w.writerow([_fmt_time(t)] + [fmt(v) for v in row])
    return buf.getvalue()


def write_series(path, obs: ObservationSeries):
    atomic_write(path, series_text(obs))


def parse_series(text: str, source="<data>") -> ObservationSeries:
    """Parse ``t,y1,...`` CSV text; raises InputError with the offending line."""
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise InputError(f"{source}: empty file") from None
    header = [h.strip() for h in header]
    p = len(header) - 1
    if p < 1 or header[0] != "t" or header[1:] != [f"y{j + 1}" for j in range(p)]:
        raise InputError(f"{source}:1: header must be t,y1,...,yp; got {','.join(header)}")
    times, values = [], []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != p + 1:
            raise InputError(f"{source}:{lineno}: expected {p + 1} fields, got {len(row)}")
        try:
            t = float(row[0])
            vals = [float(c) if c.strip() else math.nan for c in row[1:]]
        except ValueError as exc:
            raise InputError(f"{source}:{lineno}: {exc}") from None
        if not math.isfinite(t) or any(math.isinf(v) for v in vals):
            raise InputError(f"{source}:{lineno}: non-finite value")
        times.append(t)
        values.append(vals)
    if not values:
        raise InputError(f"{source}: no data rows")
    times = np.array(times)
    if np.any(np.diff(times) <= 0):
        raise InputError(f"{source}: times must be strictly increasing")
    return ObservationSeries(np.array(values, dtype=float), times)


def read_series(path) -> ObservationSeries:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    return parse_series(text, str(path))


def file_digest(path) -> str:
    return "sha256:" + hashlib.sha256(Path(path).read_bytes()).hexdigest()


def read_json(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None


def _finite(obj):
    # JSON has no inf/nan; encode them as strings like the report fields do
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def json_text(obj) -> str:
    return json.dumps(_finite(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_json(path, obj):
    atomic_write(path, json_text(obj))


def report_document(report: FitReport, *, input_digest=None, wall_clock=None) -> dict:
    """Report JSON plus provenance fields (tool version, input digest, run time)."""
    doc = report.to_json()
    doc["tool_version"] = __version__
    doc["input_digest"] = input_digest
    doc["wall_clock_seconds"] = wall_clock
    return doc


def load_report(path) -> FitReport:
    doc = read_json(path)
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise InputError(f"{path}: unsupported schema_version {doc.get('schema_version')!r}")
    try:
        return FitReport.from_json(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{path}: malformed report ({exc})") from None
