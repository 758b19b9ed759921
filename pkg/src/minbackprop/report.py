"""Tabular run reports with exact CSV round-tripping."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field


def _format_cell(value) -> str:
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        text = format(value, ".17g")
        # Keep a float marker so parsing restores the exact type.
        if not any(c in text for c in ".eE") and text not in ("nan", "inf", "-inf"):
            text += ".0"
        return text
    return str(value)


def _parse_cell(text: str):
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


@dataclass
class RunReport:
    """Rows of per-iteration / per-trial values plus a summary dict.

    ``rows`` hold ints, floats, and strings; floats are written with 17
    significant digits so a written report re-parses to the exact same
    values. ``meta`` is the summary surface (not part of the CSV; use
    ``write_json``).
    """

    columns: list[str]
    rows: list[list] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def append(self, *values) -> None:
        if len(values) != len(self.columns):
            raise ValueError(f"expected {len(self.columns)} values, got {len(values)}")
        self.rows.append(list(values))

    def column(self, name: str) -> list:
        idx = self.columns.index(name)
        return [row[idx] for row in self.rows]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.columns)
            for row in self.rows:
                writer.writerow([_format_cell(v) for v in row])

    @classmethod
    def read_csv(cls, path) -> "RunReport":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            columns = next(reader)
            rows = [[_parse_cell(c) for c in row] for row in reader]
        return cls(columns=columns, rows=rows)

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"columns": self.columns, "summary": self.meta}, fh, indent=2)
            fh.write("\n")
