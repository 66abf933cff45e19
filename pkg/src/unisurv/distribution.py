"""Discrete event-time distributions on the integer grid ``{0..t_max}``.

All functions accept a :class:`DiscreteDistribution` or a plain array of
probabilities; arrays may be batched, with time on the last axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DistributionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DiscreteDistribution:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or p.size < 2:
            raise DistributionError("probs must be a 1-D vector with at least two grid points")
        if (p < 0).any() or abs(p.sum() - 1.0) > 1e-6:
            raise DistributionError(f"probs must be nonnegative and sum to 1 (sum={p.sum():.8g})")
        object.__setattr__(self, "probs", p)

    @property
    def t_max(self) -> int:
        return self.probs.size - 1

    def survival(self) -> "SurvivalCurve":
        return survival(self)

    def mean(self) -> float:
        return float(mean_lifetime(self))

    def variance(self) -> float:
        return float(variance(self))


@dataclass(frozen=True, eq=False)
class SurvivalCurve:
    """``values[j]`` is the probability that the event time is at least ``j``."""

    values: np.ndarray


def _probs(d) -> np.ndarray:
    if isinstance(d, DiscreteDistribution):
        return d.probs
    return np.asarray(d, dtype=np.float64)


def cdf(d, j: int):
    """Probability mass on ``{0..j}``."""
    p = _probs(d)
    if not 0 <= j < p.shape[-1]:
        raise DistributionError(f"grid index {j} outside [0, {p.shape[-1] - 1}]")
    return p[..., : j + 1].sum(axis=-1)


def survival_values(d) -> np.ndarray:
    p = _probs(d)
    # reverse cumulative sum: S[j] = sum_{t >= j} p[t]
    return np.cumsum(p[..., ::-1], axis=-1)[..., ::-1]


def survival(d) -> SurvivalCurve:
    return SurvivalCurve(survival_values(d))


def mean_lifetime(d):
    p = _probs(d)
    return p @ np.arange(p.shape[-1], dtype=np.float64)


def variance(d):
    p = _probs(d)
    t = np.arange(p.shape[-1], dtype=np.float64)
    mu = mean_lifetime(p)
    return (p * (t - np.expand_dims(mu, -1)) ** 2).sum(axis=-1)
