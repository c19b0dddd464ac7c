"""Metrics records and their CSV / JSON-lines serialization."""
from __future__ import annotations

import csv
import json
from dataclasses import astuple, dataclass, fields
from pathlib import Path
from typing import Iterable, TextIO


@dataclass(frozen=True)
class MetricsRecord:
    step: int
    train_success_rate: float
    eval_success_rate: float
    entropy: float
    mean_length: float
    unrecoverable_pivots: int
    tokens_main: int
    tokens_aux: int
    estimator_w: float
    estimator_b: float
    wall_ms: float


COLUMNS = tuple(f.name for f in fields(MetricsRecord))
_TYPES = {f.name: f.type for f in fields(MetricsRecord)}


def _parse(name: str, text: str):
    return int(text) if _TYPES[name] == "int" else float(text)


def write_records(records: Iterable[MetricsRecord], fh: TextIO, fmt: str = "csv") -> None:
    """Write records in fixed column order; floats use ``repr`` so reads are exact."""
    if fmt == "csv":
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(COLUMNS)
        for rec in records:
            writer.writerow([repr(v) for v in astuple(rec)])
    elif fmt == "jsonl":
        for rec in records:
            fh.write(json.dumps(dict(zip(COLUMNS, astuple(rec)))) + "\n")
    else:
        raise ValueError(f"unknown metrics format {fmt!r}")


def export_metrics(records: Iterable[MetricsRecord], path: str | Path, fmt: str = "csv") -> Path:
    if fmt not in ("csv", "jsonl"):
        raise ValueError(f"unknown metrics format {fmt!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        write_records(records, fh, fmt)
    return path


def read_metrics(path: str | Path, fmt: str = "csv") -> list[MetricsRecord]:
    path = Path(path)
    if fmt == "csv":
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        if tuple(header) != COLUMNS:
            raise ValueError(f"unexpected header {header}")
        return [MetricsRecord(**{k: _parse(k, v) for k, v in zip(header, row)}) for row in body]
    if fmt == "jsonl":
        out = []
        for line in path.read_text().splitlines():
            if line.strip():
                doc = json.loads(line)
                out.append(MetricsRecord(**{k: _parse(k, repr(doc[k])) for k in COLUMNS}))
        return out
    raise ValueError(f"unknown metrics format {fmt!r}")
