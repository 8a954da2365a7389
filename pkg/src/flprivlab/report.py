"""CSV reporting with one row schema across every command.

RFC 4180: CRLF line endings, minimal quoting via the csv module. The schema
version is stamped as the first header column and the first field of every
row, so a reader can reject files written under a different layout. Numeric
cells must be finite; anything not applicable stays explicitly empty. Output
depends only on the row content, never on time or environment, so reruns of
a deterministic experiment are byte-identical.
"""

from __future__ import annotations

import csv
import math
import numbers
from pathlib import Path

__all__ = ["SCHEMA_VERSION", "COLUMNS", "format_cell", "write_report", "read_report"]

SCHEMA_VERSION = "1"

COLUMNS = (
    "schema_version",
    "experiment",
    "round",
    "protocol",
    "n_users",
    "batch_size",
    "local_epochs",
    "d",
    "d_star",
    "mi_bits",
    "mi_normalized",
    "ci_low_bits",
    "ci_high_bits",
    "bound_case1_bits",
    "bound_case2_bits",
    "accuracy",
    "psnr_mean_db",
    "epsilon",
    "sigma_dp",
    "seed",
)


def format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    if isinstance(value, bool):
        raise ValueError("booleans do not belong in report cells")
    if isinstance(value, numbers.Integral):
        return str(int(value))
    if isinstance(value, numbers.Real):
        value = float(value)
        if not math.isfinite(value):
            raise ValueError(f"non-finite value {value!r} in a report cell")
        return format(value, ".12g")
    raise ValueError(f"cannot format {type(value).__name__} in a report cell")


def write_report(path, rows) -> None:
    """Write dict rows against COLUMNS; missing keys become empty cells."""
    rows = list(rows)
    for i, row in enumerate(rows):
        unknown = set(row) - set(COLUMNS)
        if unknown:
            raise ValueError(f"row {i} has unknown columns {sorted(unknown)}")
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(COLUMNS)
        for row in rows:
            full = dict(row)
            full["schema_version"] = SCHEMA_VERSION
            writer.writerow([format_cell(full.get(col)) for col in COLUMNS])


def read_report(path) -> list[dict[str, str]]:
    """Read a report back as string cells; validates the schema stamp."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != COLUMNS:
            raise ValueError(f"unexpected report header {header}")
        out = []
        for row in reader:
            if len(row) != len(COLUMNS):
                raise ValueError(f"row width {len(row)}, expected {len(COLUMNS)}")
            record = dict(zip(COLUMNS, row))
            if record["schema_version"] != SCHEMA_VERSION:
                raise ValueError(f"schema version {record['schema_version']!r}, "
                                 f"expected {SCHEMA_VERSION!r}")
            out.append(record)
        return out
