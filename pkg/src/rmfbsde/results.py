"""Versioned CSV result tables with run metadata.

Numeric content under a fixed config and seed is deterministic; the only
lines allowed to differ between identical runs are the volatile metadata
comments (wall time), so CSVs diff clean modulo timestamps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

SCHEMA_VERSION = 1

# metadata keys expected to differ between identical runs
VOLATILE_KEYS = ("wall_time_s",)


def _format_cell(value) -> str:
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class ResultTable:
    """One named table of typed rows plus the run's reproducibility stamp."""

    name: str
    columns: tuple
    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def add_row(self, *values) -> None:
        if len(values) != len(self.columns):
            raise ValueError(f"row has {len(values)} cells, table has {len(self.columns)} columns")
        self.rows.append(tuple(values))

    @classmethod
    def from_records(cls, name: str, records: list, metadata: dict | None = None) -> "ResultTable":
        """Build from homogeneous dicts; column order follows the first record."""
        if not records:
            raise ValueError("no records")
        columns = tuple(records[0].keys())
        table = cls(name=name, columns=columns, metadata=dict(metadata or {}))
        for rec in records:
            if tuple(rec.keys()) != columns:
                raise ValueError(f"record keys {tuple(rec.keys())} != columns {columns}")
            table.add_row(*rec.values())
        return table

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(f"# schema={SCHEMA_VERSION}\n")
            for key in sorted(self.metadata):
                fh.write(f"# {key}={self.metadata[key]}\n")
            fh.write(",".join(self.columns) + "\n")
            for row in self.rows:
                fh.write(",".join(_format_cell(v) for v in row) + "\n")

    def __str__(self) -> str:
        cells = [[str(c) for c in self.columns]]
        for row in self.rows:
            cells.append([_format_cell(v) for v in row])
        widths = [max(len(r[j]) for r in cells) for j in range(len(self.columns))]
        lines = [f"[{self.name}]"]
        for r in cells:
            lines.append("  " + "  ".join(c.rjust(w) for c, w in zip(r, widths)))
        return "\n".join(lines)
