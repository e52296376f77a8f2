"""Deterministic CSV and JSON writers."""

from __future__ import annotations

import csv
import io as _io
import json
import math
from pathlib import Path

import numpy as np


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        return repr(v)
    return str(v)


def csv_text(columns, rows, tag: str, units: dict | None = None) -> str:
    """CSV with a comment line carrying the quantity tag and the column units.

    ``columns`` are plain names; ``units`` maps names to unit strings (absent
    names are dimensionless).
    """
    units = units or {}
    buf = _io.StringIO()
    unit_list = ", ".join(f"{c} [{units.get(c, '1')}]" for c in columns)
    buf.write(f"# {tag}; units: {unit_list}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def write_csv(path, columns, rows, tag: str, units: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(csv_text(columns, rows, tag, units))
    return path


def read_csv(path):
    """Return (tag line, columns, rows as lists of strings)."""
    lines = Path(path).read_text().splitlines()
    tag = lines[0]
    reader = csv.reader(lines[1:])
    columns = next(reader)
    return tag, columns, list(reader)


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    return obj


def json_text(obj) -> str:
    return json.dumps(to_jsonable(obj), indent=2, sort_keys=True) + "\n"


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json_text(obj))
    return path
