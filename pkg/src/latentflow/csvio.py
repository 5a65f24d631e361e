from __future__ import annotations

import csv
from typing import Iterable


def write_csv(path, header: list[str], rows: Iterable, comment: str | None = None) -> None:
    """Write a header-row CSV, optionally preceded by one ``# ...`` provenance line."""
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    """Header and rows, skipping leading ``#`` comment lines."""
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    return rows[0], rows[1:]


def fmt(v) -> str:
    return repr(float(v))
