"""Core survival data types, CSV serialization and dataset splitting."""

from __future__ import annotations

import csv
import io
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class DataError(ValueError):
    """Raised for malformed, out-of-range or inconsistent survival data."""


@dataclass(frozen=True)
class TimeGrid:
    """Integer time grid ``{0, 1, ..., t_max}`` with unit spacing."""

    t_max: int

    def __post_init__(self):
        if int(self.t_max) != self.t_max or self.t_max < 1:
            raise DataError(f"t_max must be an integer >= 1, got {self.t_max!r}")

    @property
    def length(self) -> int:
        return self.t_max + 1

    @property
    def points(self) -> np.ndarray:
        return np.arange(self.length)

    def check(self, t: int) -> int:
        if not 0 <= t <= self.t_max:
            raise DataError(f"time {t} outside grid [0, {self.t_max}]")
        return int(t)


@dataclass(frozen=True, eq=False)
class SurvivalRecord:
    """One subject.

    ``x_dynamic`` is a ``(t_max + 1, dynamic_dim)`` array where NaN marks a
    missing observation, or None for static-only data.
    """

    id: str
    x_static: np.ndarray
    label_time: int
    event: bool
    x_dynamic: np.ndarray | None = None

    def __eq__(self, other):
        if not isinstance(other, SurvivalRecord):
            return NotImplemented
        if (self.id, self.label_time, self.event) != (other.id, other.label_time, other.event):
            return False
        if not np.array_equal(self.x_static, other.x_static):
            return False
        if (self.x_dynamic is None) != (other.x_dynamic is None):
            return False
        return self.x_dynamic is None or np.array_equal(self.x_dynamic, other.x_dynamic, equal_nan=True)

    __hash__ = None


@dataclass(frozen=True)
class Dataset:
    grid: TimeGrid
    records: tuple[SurvivalRecord, ...]
    static_dim: int
    dynamic_dim: int = 0
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            seen = set()
            dup = next(i for i in ids if i in seen or seen.add(i))
            raise DataError(f"duplicate id {dup!r}")
        for r in self.records:
            if r.x_static.shape != (self.static_dim,):
                raise DataError(f"record {r.id!r}: static vector has shape {r.x_static.shape}, expected ({self.static_dim},)")
            self.grid.check(r.label_time)
            if self.dynamic_dim:
                if r.x_dynamic is None or r.x_dynamic.shape != (self.grid.length, self.dynamic_dim):
                    shape = None if r.x_dynamic is None else r.x_dynamic.shape
                    raise DataError(
                        f"record {r.id!r}: dynamic matrix has shape {shape}, "
                        f"expected ({self.grid.length}, {self.dynamic_dim})"
                    )
            elif r.x_dynamic is not None:
                raise DataError(f"record {r.id!r} has dynamic data but dynamic_dim is 0")
        object.__setattr__(self, "_index", {r.id: i for i, r in enumerate(self.records)})

    def __len__(self):
        return len(self.records)

    def __getitem__(self, key: str) -> SurvivalRecord:
        return self.records[self._index[key]]

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    def times(self) -> np.ndarray:
        return np.array([r.label_time for r in self.records], dtype=np.int64)

    def events(self) -> np.ndarray:
        return np.array([r.event for r in self.records], dtype=bool)

    def static_matrix(self) -> np.ndarray:
        if not self.records:
            return np.zeros((0, self.static_dim))
        return np.stack([r.x_static for r in self.records])

    def dynamic_tensor(self) -> np.ndarray:
        """Stacked ``(n, t_max + 1, dynamic_dim)`` array, NaN where missing."""
        if not self.dynamic_dim:
            raise DataError("dataset has no dynamic covariates")
        return np.stack([r.x_dynamic for r in self.records])

    def subset(self, ids: Iterable[str]) -> "Dataset":
        recs = sorted((self[i] for i in ids), key=lambda r: r.id)
        return Dataset(self.grid, tuple(recs), self.static_dim, self.dynamic_dim)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.grid == other.grid
            and self.static_dim == other.static_dim
            and self.dynamic_dim == other.dynamic_dim
            and len(self.records) == len(other.records)
            and all(a == b for a, b in zip(self.records, other.records))
        )


def _parse_float(cell: str, path, lineno: int) -> float:
    if cell.strip() == "":
        return math.nan
    try:
        return float(cell)
    except ValueError:
        raise DataError(f"{path}:{lineno}: cannot parse {cell!r} as a number") from None


def _parse_int(cell: str, path, lineno: int, name: str) -> int:
    try:
        value = float(cell)
    except ValueError:
        raise DataError(f"{path}:{lineno}: cannot parse {name}={cell!r}") from None
    if not value.is_integer():
        raise DataError(f"{path}:{lineno}: {name}={cell!r} is not on the integer grid")
    return int(value)


def load_dataset(static_path, dynamic_path=None, grid: TimeGrid | None = None) -> Dataset:
    """Read the static CSV (and optional long-form dynamic CSV) into a Dataset.

    Records are sorted by id. Dynamic cells that are empty or absent stay NaN;
    imputation is a separate step.
    """
    static_path = Path(static_path)
    rows = []
    with open(static_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:3] != ["id", "time", "event"]:
            raise DataError(f"{static_path}:1: header must start with id,time,event")
        p = len(header) - 3
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{static_path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            t = _parse_int(row[1], static_path, lineno, "time")
            if row[2] not in ("0", "1"):
                raise DataError(f"{static_path}:{lineno}: event must be 0 or 1, got {row[2]!r}")
            x = np.array([_parse_float(c, static_path, lineno) for c in row[3:]], dtype=np.float64)
            if np.isnan(x).any():
                raise DataError(f"{static_path}:{lineno}: static covariates may not be missing")
            if grid is not None and not 0 <= t <= grid.t_max:
                raise DataError(f"{static_path}:{lineno}: time {t} outside grid [0, {grid.t_max}]")
            rows.append((row[0], t, row[2] == "1", x, lineno))

    if grid is None:
        grid = TimeGrid(max([r[1] for r in rows] + [1]))
    seen = {}
    for rid, *_, lineno in rows:
        if rid in seen:
            raise DataError(f"{static_path}:{lineno}: duplicate id {rid!r} (first on line {seen[rid]})")
        seen[rid] = lineno

    dynamic = {}
    q = 0
    if dynamic_path is not None:
        dynamic_path = Path(dynamic_path)
        with open(dynamic_path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or header[:2] != ["id", "t"] or len(header) < 3:
                raise DataError(f"{dynamic_path}:1: header must be id,t,v0,...")
            q = len(header) - 2
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != len(header):
                    raise DataError(f"{dynamic_path}:{lineno}: expected {len(header)} fields, got {len(row)}")
                rid = row[0]
                if rid not in seen:
                    raise DataError(f"{dynamic_path}:{lineno}: id {rid!r} not present in static file")
                t = _parse_int(row[1], dynamic_path, lineno, "t")
                if not 0 <= t <= grid.t_max:
                    raise DataError(f"{dynamic_path}:{lineno}: t={t} outside grid [0, {grid.t_max}]")
                mat = dynamic.get(rid)
                if mat is None:
                    mat = dynamic[rid] = np.full((grid.length, q), np.nan)
                mat[t] = [_parse_float(c, dynamic_path, lineno) for c in row[2:]]

    records = []
    for rid, t, ev, x, _ in sorted(rows, key=lambda r: r[0]):
        xd = None
        if q:
            xd = dynamic.get(rid)
            if xd is None:
                xd = np.full((grid.length, q), np.nan)
        records.append(SurvivalRecord(rid, x, t, ev, xd))
    return Dataset(grid, tuple(records), p, q)


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def _fmt(x: float) -> str:
    return "" if math.isnan(x) else repr(float(x))


def save_dataset(ds: Dataset, static_path, dynamic_path=None) -> None:
    """Write ``ds`` in the CSV layout read by :func:`load_dataset`.

    Floats are written with ``repr`` so a reload is bit-identical. Dynamic rows
    with every cell missing are omitted.
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "time", "event"] + [f"x{j}" for j in range(ds.static_dim)])
    for r in ds.records:
        w.writerow([r.id, r.label_time, int(r.event)] + [_fmt(v) for v in r.x_static])
    atomic_write_text(static_path, buf.getvalue())

    if ds.dynamic_dim:
        if dynamic_path is None:
            raise DataError("dataset has dynamic covariates; dynamic_path is required")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "t"] + [f"v{j}" for j in range(ds.dynamic_dim)])
        for r in ds.records:
            for t in np.flatnonzero(~np.isnan(r.x_dynamic).all(axis=1)):
                w.writerow([r.id, int(t)] + [_fmt(v) for v in r.x_dynamic[t]])
        atomic_write_text(dynamic_path, buf.getvalue())


def split_sizes(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    """Train and validation get the floor of their share, test the remainder."""
    n_train = math.floor(n * ratios[0] + 1e-9)
    n_val = math.floor(n * ratios[1] + 1e-9)
    return n_train, n_val, n - n_train - n_val


def split_dataset(ds: Dataset, ratios=(0.7, 0.1, 0.2), seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"ratios must be three positive numbers summing to 1, got {ratios!r}")
    if len(ds) < 3:
        raise DataError(f"cannot split a dataset of {len(ds)} records into three parts")
    n_train, n_val, _ = split_sizes(len(ds), ratios)
    order = np.random.default_rng(seed).permutation(len(ds))
    ids = np.array(ds.ids, dtype=object)
    parts = (order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :])
    return tuple(ds.subset(ids[p]) for p in parts)
