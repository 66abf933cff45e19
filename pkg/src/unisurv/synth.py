"""Synthetic long-tailed survival datasets (static SYNTH-s and dynamic SYNTH-d).

Event times follow ``T = round(|lp| * u)`` with ``u ~ Exponential(1)``, clamped
to the grid, where ``lp`` is the linear predictor of the generating process.
Higher-dimensional variants (``k > 0``) append distractor features drawn from
their own stream, so labels do not change with ``k`` or with the noise level.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .data import Dataset, SurvivalRecord, TimeGrid

# fixed child indices of the master SeedSequence
_STREAMS = ("static", "dynamic", "partition", "event", "censor", "noise", "extra", "observe")


class SynthConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    n_records: int = 15100
    base_static_dim: int = 4
    base_dynamic_dim: int = 0
    k: int = 0
    gamma_n: float = 10.0
    gamma_v: float = 5.0
    weibull_shape: float = 2.0
    weibull_scale: float = 0.1
    noise_eps: float = 0.0
    censor_fraction: float = 0.5
    t_max: int | None = None
    observe_prob: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_records < 1 or self.base_static_dim < 1:
            raise SynthConfigError("n_records and base_static_dim must be positive")
        if self.base_dynamic_dim < 0 or self.k < 0:
            raise SynthConfigError("base_dynamic_dim and k must be >= 0")
        if not 0 <= self.censor_fraction <= 1:
            raise SynthConfigError("censor_fraction must lie in [0, 1]")
        if self.noise_eps < 0:
            raise SynthConfigError("noise_eps must be >= 0")
        if not 0 < self.observe_prob <= 1:
            raise SynthConfigError("observe_prob must lie in (0, 1]")
        if self.weibull_shape <= 0 or self.weibull_scale <= 0:
            raise SynthConfigError("Weibull shape and scale must be positive")

    @property
    def static_dim(self) -> int:
        return self.base_static_dim * 5**self.k

    @property
    def dynamic_dim(self) -> int:
        return self.base_dynamic_dim * 5**self.k

    @property
    def grid(self) -> TimeGrid:
        if self.t_max is not None:
            return TimeGrid(self.t_max)
        return TimeGrid(199 if self.base_dynamic_dim else 200)


def synth_s_config(**kw) -> SynthConfig:
    return SynthConfig(**{"base_dynamic_dim": 0, **kw})


def synth_d_config(**kw) -> SynthConfig:
    return SynthConfig(**{"base_dynamic_dim": 20, **kw})


def _streams(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(_STREAMS))
    return {name: np.random.default_rng(s) for name, s in zip(_STREAMS, children)}


def event_times(scale: np.ndarray, rng: np.random.Generator, t_max: int) -> np.ndarray:
    u = rng.exponential(1.0, size=scale.shape)
    return np.clip(np.rint(np.abs(scale) * u), 0, t_max).astype(np.int64)


def censor(times: np.ndarray, fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Censor exactly ``floor(n * fraction)`` subjects, each at a time uniform on ``{0..T}``."""
    n = times.size
    chosen = rng.permutation(n)[: math.floor(n * fraction)]
    labels = times.copy()
    labels[chosen] = rng.integers(0, times[chosen] + 1)
    events = np.ones(n, dtype=bool)
    events[chosen] = False
    return labels, events


def dynamic_partition(q: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Random disjoint split of feature indices into (max-group, min-group)."""
    if q < 2:
        raise SynthConfigError(f"dynamic_dim must be >= 2 to split into two groups, got {q}")
    perm = rng.permutation(q)
    return np.sort(perm[: q // 2]), np.sort(perm[q // 2 :])


def _assemble(cfg: SynthConfig, xs, xd, labels, events) -> Dataset:
    grid = cfg.grid
    width = len(str(cfg.n_records - 1))
    recs = tuple(
        SurvivalRecord(
            f"{i:0{width}d}",
            xs[i],
            int(labels[i]),
            bool(events[i]),
            None if xd is None else xd[i],
        )
        for i in range(cfg.n_records)
    )
    return Dataset(grid, recs, xs.shape[1], 0 if xd is None else xd.shape[2])


def generate_synth_s(cfg: SynthConfig) -> Dataset:
    if cfg.base_dynamic_dim:
        raise SynthConfigError("SYNTH-s has no dynamic features; use generate_synth_d")
    rs = _streams(cfg.seed)
    n, p = cfg.n_records, cfg.base_static_dim
    xs = rs["static"].standard_normal((n, p))
    times = event_times(xs @ np.full(p, cfg.gamma_n), rs["event"], cfg.grid.t_max)
    labels, events = censor(times, cfg.censor_fraction, rs["censor"])
    xs = _inflate_static(cfg, xs, rs)
    if cfg.noise_eps:
        xs = xs + cfg.noise_eps * rs["noise"].standard_normal(xs.shape)
    return _assemble(cfg, xs, None, labels, events)


def weibull_draws(rng: np.random.Generator, shape, a: float, beta: float) -> np.ndarray:
    return beta * rng.weibull(a, size=shape)


def generate_synth_d(cfg: SynthConfig) -> Dataset:
    """Static normals plus trajectories of per-cell Weibull draws and N(0, 1) noise.

    The event scale combines the temporal max of one feature group, the
    temporal min of the other, and the static predictor.
    """
    q = cfg.base_dynamic_dim
    if q < 2:
        raise SynthConfigError(f"SYNTH-d needs at least 2 dynamic features, got {q}")
    rs = _streams(cfg.seed)
    n, p, L = cfg.n_records, cfg.base_static_dim, cfg.grid.length
    xs = rs["static"].standard_normal((n, p))
    # (n, L, q): independent Weibull draw plus N(0, 1) in every cell
    xd = weibull_draws(rs["dynamic"], (n, L, q), cfg.weibull_shape, cfg.weibull_scale)
    xd += rs["dynamic"].standard_normal((n, L, q))
    v1, v2 = dynamic_partition(q, rs["partition"])
    lp = (
        cfg.gamma_v * xd[:, :, v1].max(axis=1).sum(axis=1)
        + cfg.gamma_v * xd[:, :, v2].min(axis=1).sum(axis=1)
        + cfg.gamma_n * xs.sum(axis=1)
    )
    times = event_times(lp, rs["event"], cfg.grid.t_max)
    labels, events = censor(times, cfg.censor_fraction, rs["censor"])

    xs = _inflate_static(cfg, xs, rs)
    if cfg.k:
        extra = weibull_draws(rs["extra"], (n, L, cfg.dynamic_dim - q), cfg.weibull_shape, cfg.weibull_scale)
        extra += rs["extra"].standard_normal(extra.shape)
        xd = np.concatenate([xd, extra], axis=2)
    if cfg.noise_eps:
        xs = xs + cfg.noise_eps * rs["noise"].standard_normal(xs.shape)
        xd = xd + cfg.noise_eps * rs["noise"].standard_normal(xd.shape)
    if cfg.observe_prob < 1:
        seen = rs["observe"].random((n, L)) < cfg.observe_prob
        seen[:, 0] = True
        xd[~seen] = np.nan
    return _assemble(cfg, xs, xd, labels, events)


def _inflate_static(cfg, xs, rs):
    if not cfg.k:
        return xs
    extra = rs["extra"].standard_normal((xs.shape[0], cfg.static_dim - xs.shape[1]))
    return np.concatenate([xs, extra], axis=1)


def generate(cfg: SynthConfig) -> Dataset:
    return generate_synth_d(cfg) if cfg.base_dynamic_dim else generate_synth_s(cfg)


def apply_noise_and_scale(cfg: SynthConfig, k: int | None = None, noise_eps: float | None = None) -> Dataset:
    """Regenerate with inflated dimensions and/or covariate noise; labels are
    those of the base configuration."""
    changes = {}
    if k is not None:
        changes["k"] = k
    if noise_eps is not None:
        changes["noise_eps"] = noise_eps
    return generate(SynthConfig(**{**asdict(cfg), **changes}))


def dataset_stats(ds: Dataset) -> dict:
    """Event/censor counts and time summaries in the layout of a descriptive table."""
    times, events = ds.times(), ds.events()

    def summary(t):
        if t.size == 0:
            return {"min": None, "max": None, "mean": None}
        return {"min": int(t.min()), "max": int(t.max()), "mean": float(t.mean())}

    return {
        "n_records": len(ds),
        "uncensored": int(events.sum()),
        "censored": int((~events).sum()),
        "static_dim": ds.static_dim,
        "dynamic_dim": ds.dynamic_dim,
        "t_max": ds.grid.t_max,
        "event_time": summary(times[events]),
        "censoring_time": summary(times[~events]),
    }


def stats_json(ds: Dataset) -> str:
    return json.dumps(dataset_stats(ds), indent=2, sort_keys=True) + "\n"
