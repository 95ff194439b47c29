"""Column-oriented tables and CSV ingestion."""

from __future__ import annotations

import csv
import io
import math
import os
import tempfile
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np


class DataError(ValueError):
    pass


@dataclass
class ColumnTable(Mapping):
    """Named equal-length columns: float arrays, or object arrays of strings."""

    columns: dict[str, np.ndarray]
    dropped: int = 0
    level_maps: dict[str, dict[str, int]] = field(default_factory=dict)

    def __post_init__(self):
        self.columns = {k: np.asarray(v) for k, v in self.columns.items()}
        lengths = {len(v) for v in self.columns.values()}
        if len(lengths) > 1:
            raise DataError(f"columns have unequal lengths {sorted(lengths)}")

    def __getitem__(self, key):
        return self.columns[key]

    def __iter__(self):
        return iter(self.columns)

    def __len__(self):
        return len(self.columns)

    @property
    def n_rows(self) -> int:
        return len(next(iter(self.columns.values()))) if self.columns else 0

    @property
    def names(self) -> list[str]:
        return list(self.columns)

    def take(self, rows) -> "ColumnTable":
        rows = np.asarray(rows)
        return ColumnTable({k: v[rows] for k, v in self.columns.items()})

    def with_column(self, name: str, values) -> "ColumnTable":
        cols = dict(self.columns)
        cols[name] = np.asarray(values)
        return ColumnTable(cols)

    def code(self, name: str) -> np.ndarray:
        """Integer-code a column by first occurrence, recording the level map."""
        from .formula import level_label

        index = self.level_maps.setdefault(name, {})
        out = np.empty(self.n_rows, dtype=np.int64)
        for i, v in enumerate(self.columns[name]):
            lab = level_label(v)
            out[i] = index.setdefault(lab, len(index))
        return out

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.names)
        cols = [self.columns[k] for k in self.names]
        for i in range(self.n_rows):
            w.writerow([_format(c[i]) for c in cols])
        text = buf.getvalue()
        if path is not None:
            atomic_write(path, text)
        return text


def _format(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        if math.isnan(v):
            return ""
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def atomic_write(path, text: str | bytes) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    mode = "wb" if isinstance(text, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"newline": ""})) as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _parse_column(values: list[str | None], kind: str | None):
    if kind == "categorical":
        return np.array(values, dtype=object)
    out = np.empty(len(values))
    for i, v in enumerate(values):
        if v is None:
            out[i] = np.nan
            continue
        try:
            out[i] = float(v)
        except ValueError:
            if kind == "continuous":
                raise DataError(f"non-numeric value {v!r} in numeric column") from None
            return np.array(values, dtype=object)
    return out


def load_csv(path, schema: Mapping[str, str] | None = None, targets: Sequence[str] = (),
             features: Iterable[str] | None = None, impute_mean: bool = False) -> ColumnTable:
    """Read an RFC-4180 CSV with a header row.

    Empty cells are missing. Rows missing any ``targets`` value are dropped
    (count in ``table.dropped``). Missing values in ``features`` (all other
    columns by default) raise unless ``impute_mean`` fills numeric ones.
    """
    schema = dict(schema or {})
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if len(set(header)) != len(header):
            raise DataError(f"{path}: duplicate column names in header")
        rows = []
        for row in reader:
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: line {reader.line_num} has {len(row)} fields, expected {len(header)}")
            rows.append(row)
    raw = {h: [r[j] if r[j] != "" else None for r in rows] for j, h in enumerate(header)}
    for t in targets:
        if t not in raw:
            raise DataError(f"{path}: target column {t!r} not found")
    keep = [i for i in range(len(rows)) if all(raw[t][i] is not None for t in targets)]
    dropped = len(rows) - len(keep)
    if dropped:
        raw = {h: [col[i] for i in keep] for h, col in raw.items()}
    columns = {}
    for h, vals in raw.items():
        try:
            columns[h] = _parse_column(vals, schema.get(h))
        except DataError as e:
            raise DataError(f"{path}: column {h!r}: {e}") from None
    feats = list(features) if features is not None else [h for h in header if h not in targets]
    for h in feats:
        if h not in columns:
            continue
        col = columns[h]
        missing = np.isnan(col) if col.dtype.kind == "f" else np.array([v is None for v in col])
        if not missing.any():
            continue
        if impute_mean and col.dtype.kind == "f":
            col[missing] = np.nanmean(col) if (~missing).any() else 0.0
        else:
            first = int(np.flatnonzero(missing)[0])
            raise DataError(f"{path}: missing value in feature column {h!r} (data row {first + 1}); "
                            "use --impute-mean to fill numeric columns")
    table = ColumnTable(columns)
    table.dropped = dropped
    return table


def from_mapping(data: Mapping) -> ColumnTable:
    return data if isinstance(data, ColumnTable) else ColumnTable(dict(data))
