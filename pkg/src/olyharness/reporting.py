"""Tabular outputs: CSV plus aligned plain text, and experiment-record readers."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .grading import GradeReport
from .problem_model import TypologyAnnotation, annotation_from_dict
from .stats import GroupKey, score_distribution

ABSENT = "---"


@dataclass
class Table:
    columns: tuple[str, ...]
    rows: list[tuple[str, ...]] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns)
        writer.writerows(self.rows)
        return buf.getvalue()

    def to_text(self) -> str:
        widths = [max([len(c)] + [len(r[i]) for r in self.rows]) for i, c in enumerate(self.columns)]
        lines = ["  ".join(c.ljust(w) for c, w in zip(self.columns, widths)).rstrip()]
        lines.append("  ".join("-" * w for w in widths))
        lines.extend("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip() for r in self.rows)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_dicts(cls, columns: Sequence[str], records: Iterable[Mapping[str, Any]]) -> Table:
        return cls(tuple(columns), [tuple(str(r[c]) for c in columns) for r in records])


def write_table(out_dir: str | Path, stem: str, table: Table) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, txt_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.txt"
    csv_path.write_text(table.to_csv(), encoding="utf-8")
    txt_path.write_text(table.to_text(), encoding="utf-8")
    return [csv_path, txt_path]


SUMMARY_COLUMNS = ("setting", "avg_score", "B1", "B2", "B3", "B4", "total")
DISTRIBUTION_COLUMNS = ("key", "group", "n", "mean", "median", "std", "B1", "B2", "B3", "B4")


def load_record(path: str | Path) -> dict[str, Any]:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def graded_pairs(record: Mapping[str, Any]) -> list[tuple[GradeReport, TypologyAnnotation]]:
    pairs = []
    for result in record.get("results", []):
        if result.get("status") != "graded" or not result.get("report"):
            continue
        pairs.append((GradeReport.from_dict(result["report"]), annotation_from_dict(result["annotation"])))
    return pairs


def distribution_tables(pairs: Sequence[tuple[GradeReport, TypologyAnnotation]]) -> dict[str, Table]:
    tables = {}
    for key in GroupKey:
        summaries = score_distribution(pairs, key) if pairs else []
        tables[key.value] = Table.from_dicts(DISTRIBUTION_COLUMNS, (s.to_row() for s in summaries))
    return tables


def summary_table(records: Iterable[Mapping[str, Any]]) -> Table:
    return Table.from_dicts(SUMMARY_COLUMNS, (r["summary"] for r in records))
