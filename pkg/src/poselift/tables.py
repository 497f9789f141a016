"""CSV and text-table writers with config-echo comment headers."""

from __future__ import annotations

import csv
from datetime import datetime, timezone
from pathlib import Path


def meta_lines(meta: dict | None, timestamp: bool = True) -> list[str]:
    """Comment lines for file headers; the timestamp stays in comments
    only, so outputs are byte-identical across runs except for it."""
    lines = []
    if timestamp:
        stamp = datetime.now(timezone.utc).isoformat(timespec="seconds")
        lines.append(f"# generated_at = {stamp}")
    for key, value in (meta or {}).items():
        lines.append(f"# {key} = {value}")
    return lines


def write_csv(path, fieldnames, rows, meta: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for line in meta_lines(meta):
            fh.write(line + "\n")
        writer = csv.writer(fh)
        writer.writerow(fieldnames)
        writer.writerows(rows)


def format_table(headers, rows) -> str:
    cells = [[str(h) for h in headers]] + [[str(c) for c in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = []
    for i, row in enumerate(cells):
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)
