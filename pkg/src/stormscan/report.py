"""CSV/JSON emission of pipeline reports."""

from __future__ import annotations

import csv
import io
import json
import sys
from pathlib import Path

CSV_COLUMNS = (
    "frames",
    "ratio_percent",
    "overall_ns",
    "llm_ns",
    "projector_ns",
    "vision_ns",
    "compression_ns",
    "tokens_in",
    "tokens_out",
    "llm_share",
)
_INT_COLUMNS = {"frames", "overall_ns", "llm_ns", "projector_ns", "vision_ns", "compression_ns", "tokens_in", "tokens_out"}


def report_row(report) -> dict:
    return {col: getattr(report, col) for col in CSV_COLUMNS}


def render(reports, fmt: str = "csv") -> str:
    rows = [report_row(r) for r in reports]
    if fmt == "json":
        return json.dumps(rows, indent=2) + "\n"
    if fmt != "csv":
        raise ValueError(f"unknown format {fmt!r}")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow([repr(float(row[c])) if c not in _INT_COLUMNS else int(row[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def emit_report(reports, fmt: str = "csv", path="-") -> None:
    """Write reports as UTF-8 CSV or JSON; ``path='-'`` means stdout."""
    text = render(reports, fmt)
    if str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def parse_csv(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    return [{c: int(r[c]) if c in _INT_COLUMNS else float(r[c]) for c in CSV_COLUMNS} for r in rows]


def parse_json(text: str) -> list[dict]:
    return json.loads(text)
