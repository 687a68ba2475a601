"""CSV export with self-describing metadata headers.

Every report starts with `#`-prefixed metadata lines (`# key: value`, JSON
for structured values) followed by a plain CSV header row and data rows.
Floats are written with repr (shortest round-trip form), so identical runs
produce byte-identical bodies; no timestamps appear inside report files.
"""

from __future__ import annotations

import json
import math

import numpy as np

__all__ = ["write_report", "read_report", "fmt"]


def fmt(v) -> str:
    """Round-trip text form for one CSV cell."""
    if v is None:
        return ""
    if isinstance(v, (np.floating, float)):
        f = float(v)
        if math.isnan(f):
            return "nan"
        return repr(f)
    if isinstance(v, (np.integer, int)):
        return str(int(v))
    return str(v)


def write_report(path, columns, rows, metadata: dict) -> None:
    """Write one report file: metadata header, column row, data rows."""
    lines = []
    for key, value in metadata.items():
        if isinstance(value, str):
            text = value
        else:
            text = json.dumps(value, sort_keys=True)
        if "\n" in text:
            raise ValueError(f"metadata value for {key!r} must be single-line")
        lines.append(f"# {key}: {text}")
    lines.append(",".join(columns))
    for row in rows:
        lines.append(",".join(fmt(v) for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _parse_cell(text: str):
    if text == "":
        return None
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def read_report(path):
    """Read a report file back as (metadata, columns, rows)."""
    metadata = {}
    columns = None
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                key, _, value = body.partition(":")
                value = value.strip()
                try:
                    metadata[key.strip()] = json.loads(value)
                except (json.JSONDecodeError, ValueError):
                    metadata[key.strip()] = value
                continue
            if columns is None:
                columns = line.split(",")
                continue
            rows.append(tuple(_parse_cell(c) for c in line.split(",")))
    if columns is None:
        raise ValueError(f"report {path} has no column header")
    return metadata, columns, rows
