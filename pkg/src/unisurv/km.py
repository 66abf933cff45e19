"""Kaplan-Meier population curve, margin event times and censor weights."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DegenerateTailError(ValueError):
    """The KM curve is zero at the censor time, so the margin time is 0/0."""


@dataclass(frozen=True, eq=False)
class KmCurve:
    """``values[j]`` estimates P(T > j) on the grid ``0..t_max``."""

    values: np.ndarray

    @property
    def t_max(self) -> int:
        return self.values.size - 1

    def to_csv(self) -> str:
        lines = ["t,s_km"] + [f"{t},{v!r}" for t, v in enumerate(self.values.tolist())]
        return "\n".join(lines) + "\n"


def km_fit(times, events, t_max: int) -> KmCurve:
    """Product-limit estimate on the full grid.

    A subject censored at ``t`` is still at risk at ``t``; events at ``t`` are
    processed before censorings at ``t``.
    """
    times = np.asarray(times, dtype=np.int64)
    events = np.asarray(events, dtype=bool)
    if times.size == 0:
        raise ValueError("km_fit needs at least one subject")
    d = np.bincount(times[events], minlength=t_max + 1)[: t_max + 1]
    removed = np.bincount(times, minlength=t_max + 1)[: t_max + 1]
    at_risk = times.size - np.concatenate(([0], np.cumsum(removed)[:-1]))
    factor = np.ones(t_max + 1)
    nz = at_risk > 0
    factor[nz] = 1.0 - d[nz] / at_risk[nz]
    return KmCurve(np.cumprod(factor))


def km_fit_dataset(ds) -> KmCurve:
    return km_fit(ds.times(), ds.events(), ds.grid.t_max)


def censoring_km(times, events, t_max: int) -> KmCurve:
    """KM estimate of the censoring distribution (indicators reversed)."""
    return km_fit(times, ~np.asarray(events, dtype=bool), t_max)


def margin_time(km: KmCurve, censor_time: int) -> float:
    """Best-guess event time for a subject censored at ``censor_time``.

    Left-endpoint sum of the KM step function from the censor time up to
    ``t_max``, normalised by the curve at the censor time, clamped to
    ``[censor_time, t_max]``.
    """
    s = km.values
    T = int(censor_time)
    if not 0 <= T <= km.t_max:
        raise ValueError(f"censor time {T} outside grid [0, {km.t_max}]")
    if s[T] <= 0:
        raise DegenerateTailError(f"KM curve is 0 at censor time {T}")
    e = T + s[T : km.t_max].sum() / s[T]
    return float(min(max(e, T), km.t_max))


def censor_weight(km: KmCurve, censor_time: int) -> float:
    return float(1.0 - km.values[int(censor_time)])


def margin_labels(km: KmCurve, times, events) -> tuple[np.ndarray, np.ndarray]:
    """Margin times and weights for a batch; NaN for uncensored subjects.

    A censored subject beyond the end of the KM curve gets its own censor time
    as margin time.
    """
    times = np.asarray(times, dtype=np.int64)
    events = np.asarray(events, dtype=bool)
    e_m = np.full(times.shape, np.nan)
    omega = np.full(times.shape, np.nan)
    for i in np.flatnonzero(~events):
        T = int(times[i])
        try:
            e_m[i] = margin_time(km, T)
        except DegenerateTailError:
            e_m[i] = float(T)
        omega[i] = censor_weight(km, T)
    return e_m, omega
