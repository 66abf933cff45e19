"""Missing-data imputation for longitudinal covariates and the reaction tensor."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .data import DataError, Dataset, TimeGrid

OBSERVED, LOCF, FALLBACK = 0, 1, 2
PROVENANCE_NAMES = ("observed", "locf", "fallback")


@dataclass(frozen=True, eq=False)
class ImputedSeries:
    values: np.ndarray  # (t_max + 1, dynamic_dim), no NaN
    provenance: np.ndarray  # same shape, OBSERVED / LOCF / FALLBACK


@dataclass(frozen=True)
class FeatureStats:
    """Population mean/mode per dynamic feature, used for leading gaps."""

    fill: np.ndarray
    kinds: tuple[str, ...]


def _mode(values: np.ndarray) -> float:
    # ties resolve to the smallest value
    uniq, counts = np.unique(values, return_counts=True)
    return float(uniq[np.argmax(counts)])


def _check_kinds(kinds, q: int) -> tuple[str, ...]:
    if kinds is None:
        return ("continuous",) * q
    kinds = tuple(kinds)
    if len(kinds) != q or any(k not in ("continuous", "binary") for k in kinds):
        raise DataError(f"kinds must list 'continuous'/'binary' for each of {q} features")
    return kinds


def feature_stats(ds: Dataset, kinds: Sequence[str] | None = None) -> FeatureStats:
    """Mean (continuous) or mode (binary) of every observed value per feature."""
    kinds = _check_kinds(kinds, ds.dynamic_dim)
    flat = ds.dynamic_tensor().reshape(-1, ds.dynamic_dim)
    fill = np.empty(ds.dynamic_dim)
    for j, kind in enumerate(kinds):
        col = flat[:, j]
        col = col[~np.isnan(col)]
        if col.size == 0:
            raise DataError(f"dynamic feature {j} has no observations in the dataset")
        fill[j] = col.mean() if kind == "continuous" else _mode(col)
    return FeatureStats(fill, kinds)


def impute_matrix(x: np.ndarray, carry_limit: int, kinds: Sequence[str], fill: np.ndarray) -> ImputedSeries:
    """LOCF-with-limit imputation of a ``(time, feature)`` matrix.

    A gap cell up to ``carry_limit`` steps after an observation copies it;
    later cells take the mean (continuous) or mode (binary) of every earlier
    observation of that feature; cells before the first observation take
    ``fill``. Each feature is handled independently.
    """
    x = np.asarray(x, dtype=np.float64)
    values = x.copy()
    prov = np.full(x.shape, OBSERVED, dtype=np.int8)
    missing = np.isnan(x)
    if not missing.any():
        return ImputedSeries(values, prov)
    for j in np.flatnonzero(missing.any(axis=0)):
        col = x[:, j]
        obs = np.flatnonzero(~missing[:, j])
        for t in np.flatnonzero(missing[:, j]):
            k = np.searchsorted(obs, t) - 1  # last observation before t
            prov[t, j] = FALLBACK
            if k < 0:
                values[t, j] = fill[j]
            elif t - obs[k] <= carry_limit:
                values[t, j] = col[obs[k]]
                prov[t, j] = LOCF
            elif kinds[j] == "continuous":
                values[t, j] = col[obs[: k + 1]].mean()
            else:
                values[t, j] = _mode(col[obs[: k + 1]])
    return ImputedSeries(values, prov)


def impute_locf(record, grid: TimeGrid, carry_limit: int = 3, kinds=None, stats: FeatureStats | None = None) -> ImputedSeries:
    if record.x_dynamic is None or record.x_dynamic.shape[1] < 1:
        raise DataError(f"record {record.id!r} has no dynamic covariates")
    x = record.x_dynamic
    if x.shape[0] != grid.length:
        raise DataError(f"record {record.id!r}: dynamic matrix has {x.shape[0]} rows, grid has {grid.length}")
    q = x.shape[1]
    if stats is None:
        kinds = _check_kinds(kinds, q)
        fill = np.full(q, np.nan)
        for j in range(q):
            col = x[:, j][~np.isnan(x[:, j])]
            if col.size == 0:
                raise DataError(f"record {record.id!r}: feature {j} never observed and no population stats given")
            fill[j] = col.mean() if kinds[j] == "continuous" else _mode(col)
    else:
        kinds, fill = stats.kinds, stats.fill
    return impute_matrix(x, carry_limit, kinds, fill)


def impute_dataset(ds: Dataset, stats: FeatureStats, carry_limit: int = 3) -> Dataset:
    """Return a copy of ``ds`` with every dynamic matrix imputed."""
    if not ds.dynamic_dim:
        return ds
    recs = tuple(
        replace(r, x_dynamic=impute_matrix(r.x_dynamic, carry_limit, stats.kinds, stats.fill).values)
        for r in ds.records
    )
    return Dataset(ds.grid, recs, ds.static_dim, ds.dynamic_dim)


@dataclass(frozen=True, eq=False)
class ReactionTensor:
    data: np.ndarray  # (tasks, months, responses), values in [0, 1]
    window: int

    def blocks(self) -> np.ndarray:
        """Month axis cut into consecutive windows: ``(n_blocks, tasks, window, responses)``."""
        c, m, r = self.data.shape
        return self.data.reshape(c, m // self.window, self.window, r).transpose(1, 0, 2, 3)


def percentile_thresholds(values, lo_pct: float = 0.02, hi_pct: float = 0.98) -> tuple[float, float]:
    """Clip thresholds by linear interpolation between order statistics."""
    v = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = np.quantile(v, [lo_pct, hi_pct], method="linear")
    return float(lo), float(hi)


def clip_scale(values, lo: float, hi: float) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if hi <= lo:
        return np.full(v.shape, 0.5)
    return (np.clip(v, lo, hi) - lo) / (hi - lo)


def build_reaction_tensor(
    tests: Mapping[int, np.ndarray],
    grid: TimeGrid,
    window: int,
    lo_pct: float = 0.02,
    hi_pct: float = 0.98,
    carry_limit: int = 3,
    fill: np.ndarray | None = None,
) -> ReactionTensor:
    """Normalise one subject's monthly reaction tests into a dense tensor.

    ``tests`` maps month -> ``(tasks, responses)`` raw reaction times. Each task
    is clipped to its own percentile thresholds over all of this subject's
    tests, then min-max scaled. Untested months are imputed cell-wise with the
    LOCF rule; months before the first test use ``fill`` (a
    ``(tasks, responses)`` array) or, if omitted, the first test itself.
    """
    if window < 1 or grid.length % window:
        raise DataError(f"window {window} must divide t_max + 1 = {grid.length}")
    if not tests:
        raise DataError("no reaction tests given")
    months = sorted(tests)
    raw = np.stack([np.asarray(tests[m], dtype=np.float64) for m in months])  # (k, tasks, resp)
    if raw.ndim != 3:
        raise DataError(f"each test must be a (tasks, responses) array, got shape {raw.shape[1:]}")
    for m in months:
        grid.check(m)
    n_tasks, n_resp = raw.shape[1:]
    scaled = np.empty_like(raw)
    for c in range(n_tasks):
        lo, hi = percentile_thresholds(raw[:, c, :], lo_pct, hi_pct)
        scaled[:, c, :] = clip_scale(raw[:, c, :], lo, hi)

    dense = np.full((grid.length, n_tasks * n_resp), np.nan)
    dense[months] = scaled.reshape(len(months), -1)
    fill = scaled[0].ravel() if fill is None else np.asarray(fill, dtype=np.float64).ravel()
    imputed = impute_matrix(dense, carry_limit, ("continuous",) * dense.shape[1], fill).values
    data = imputed.reshape(grid.length, n_tasks, n_resp).transpose(1, 0, 2)
    return ReactionTensor(np.ascontiguousarray(data), window)


def load_reaction_csv(path) -> dict[str, dict[int, np.ndarray]]:
    """Read ``id,month,task,r0..r29`` rows into ``{id: {month: (3, 30) array}}``."""
    out: dict[str, dict[int, np.ndarray]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:3] != ["id", "month", "task"]:
            raise DataError(f"{path}:1: header must start with id,month,task")
        n_resp = len(header) - 3
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                month, task = int(row[1]), int(row[2])
                resp = [float(v) for v in row[3:]]
            except ValueError:
                raise DataError(f"{path}:{lineno}: malformed reaction row") from None
            if task not in (0, 1, 2):
                raise DataError(f"{path}:{lineno}: task must be 0, 1 or 2")
            test = out.setdefault(row[0], {}).setdefault(month, np.full((3, n_resp), np.nan))
            test[task] = resp
    return out
