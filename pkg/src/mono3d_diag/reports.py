"""Deterministic CSV / JSON / plot-data emission."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Iterable, Sequence

FLOAT_DIGITS = 6


def _clean(value):
    if isinstance(value, float):
        return round(value, FLOAT_DIGITS)
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    return value


def to_csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: ("" if row.get(k) is None else _clean(row.get(k))) for k in columns})
    return buf.getvalue()


def to_json(payload: dict) -> str:
    return json.dumps(_clean(payload), indent=2, sort_keys=True) + "\n"


def write_report(out_dir: Path, name: str, rows: Sequence[dict], columns: Sequence[str],
                 fmt: str = "both", metadata: dict | None = None) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if fmt in ("csv", "both"):
        path = out_dir / f"{name}.csv"
        path.write_text(to_csv(rows, columns), encoding="utf-8")
        written.append(path)
    if fmt in ("json", "both"):
        path = out_dir / f"{name}.json"
        path.write_text(to_json({"rows": list(rows), "metadata": metadata or {}}), encoding="utf-8")
        written.append(path)
    return written


def write_series(path: Path, series: Iterable[tuple[str, Sequence[tuple[float, float | None]]]]) -> Path:
    """Whitespace-separated ``x y`` blocks, one per named series, for external plotting."""
    lines = []
    for name, points in series:
        lines.append(f"# {name}")
        for x, y in points:
            lines.append(f"{x:.6g} {'nan' if y is None else f'{y:.6g}'}")
        lines.append("")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines), encoding="utf-8")
    return path


def format_table(rows: Sequence[Sequence], header: Sequence[str]) -> str:
    cells = [[str(h) for h in header]] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells)
