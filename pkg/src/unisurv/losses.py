"""Training losses over batches of predicted PDFs.

Every loss takes probabilities as a ``(B, t_max + 1)`` tensor (numpy arrays are
converted) and returns a differentiable scalar. Losses are batch sums.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

PROB_FLOOR = 1e-12


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_m: float = 1.0
    lambda_v: float = 0.01
    lambda_d: float = 1.0

    def __post_init__(self):
        for name in ("lambda_m", "lambda_v", "lambda_d"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise LossError(f"{name} must be finite and >= 0, got {v}")


@dataclass(frozen=True, eq=False)
class BatchLabels:
    """Per-subject labels. ``margin`` and ``weight`` are NaN for events."""

    time: np.ndarray
    event: np.ndarray
    margin: np.ndarray
    weight: np.ndarray

    @classmethod
    def build(cls, time, event, margin=None, weight=None) -> "BatchLabels":
        time = np.asarray(time, dtype=np.int64)
        event = np.asarray(event, dtype=bool)
        margin = np.full(time.shape, np.nan) if margin is None else np.asarray(margin, dtype=np.float64)
        weight = np.full(time.shape, np.nan) if weight is None else np.asarray(weight, dtype=np.float64)
        return cls(time, event, margin, weight)

    def __len__(self):
        return self.time.size

    def __getitem__(self, idx) -> "BatchLabels":
        return BatchLabels(self.time[idx], self.event[idx], self.margin[idx], self.weight[idx])

    def validate(self):
        cens = ~self.event
        if np.isnan(self.margin[cens]).any() or np.isnan(self.weight[cens]).any():
            raise LossError("censored subjects need a margin time and a censor weight")
        if (self.margin[cens] < self.time[cens]).any():
            raise LossError("margin time must not precede the censor time")
        if ((self.weight[cens] < 0) | (self.weight[cens] > 1)).any():
            raise LossError("censor weights must lie in [0, 1]")


def _as_probs(preds) -> torch.Tensor:
    if isinstance(preds, torch.Tensor):
        return preds
    return torch.as_tensor(np.asarray(preds, dtype=np.float64))


def mean_lifetime(probs: torch.Tensor) -> torch.Tensor:
    t = torch.arange(probs.shape[-1], dtype=probs.dtype)
    return probs @ t


def variance(probs: torch.Tensor) -> torch.Tensor:
    t = torch.arange(probs.shape[-1], dtype=probs.dtype)
    mu = probs @ t
    return (probs * (t - mu.unsqueeze(-1)) ** 2).sum(-1)


def loss_margin_mean(preds, labels: BatchLabels) -> torch.Tensor:
    """Half the squared error of the mean lifetime against the event time, or
    the censor-weighted squared error against the margin time."""
    labels.validate()
    mu = mean_lifetime(_as_probs(preds))
    target = torch.as_tensor(np.where(labels.event, labels.time, labels.margin), dtype=mu.dtype)
    w = torch.as_tensor(np.where(labels.event, 1.0, labels.weight), dtype=mu.dtype)
    return 0.5 * (w * (mu - target) ** 2).sum()


def loss_variance(preds) -> torch.Tensor:
    return variance(_as_probs(preds)).sum()


def softmax_targets(labels: BatchLabels, t_max: int) -> np.ndarray:
    """Event time for events, rounded margin time for censored subjects."""
    margin = np.where(np.isnan(labels.margin), labels.time, labels.margin)
    tgt = np.where(labels.event, labels.time, np.rint(margin))
    return np.clip(tgt, 0, t_max).astype(np.int64)


def loss_softmax(preds, labels: BatchLabels) -> torch.Tensor:
    p = _as_probs(preds)
    idx = torch.as_tensor(softmax_targets(labels, p.shape[-1] - 1))
    picked = p.gather(-1, idx.unsqueeze(-1)).squeeze(-1)
    return -torch.log(picked.clamp_min(PROB_FLOOR)).sum()


def sample_partners(times, events, rng: np.random.Generator) -> np.ndarray:
    """One partner index per event subject, uniform over ``T_k > T_i``.

    Returns -1 where a subject is censored or has no admissible partner.
    Partners may themselves be censored.
    """
    times = np.asarray(times)
    events = np.asarray(events, dtype=bool)
    order = np.argsort(times, kind="stable")
    sorted_t = times[order]
    first_later = np.searchsorted(sorted_t, times, side="right")
    n_later = times.size - first_later
    partner = np.full(times.size, -1, dtype=np.int64)
    for i in np.flatnonzero(events & (n_later > 0)):
        partner[i] = order[first_later[i] + rng.integers(n_later[i])]
    return partner


def loss_discordant(mean_lifetimes, labels: BatchLabels, rng: np.random.Generator | None = None, partners=None) -> torch.Tensor:
    """Hinge on sampled pairs: the predicted gap should not fall short of the
    observed gap ``T_k - T_i``."""
    mu = mean_lifetimes if isinstance(mean_lifetimes, torch.Tensor) else torch.as_tensor(np.asarray(mean_lifetimes, dtype=np.float64))
    if partners is None:
        if rng is None:
            raise LossError("loss_discordant needs an rng or explicit partners")
        partners = sample_partners(labels.time, labels.event, rng)
    partners = np.asarray(partners)
    i = np.flatnonzero(partners >= 0)
    if i.size == 0:
        return mu.sum() * 0.0
    k = partners[i]
    gap = torch.as_tensor((labels.time[k] - labels.time[i]).astype(np.float64), dtype=mu.dtype)
    ii, kk = torch.as_tensor(i), torch.as_tensor(k)
    return torch.relu(gap - (mu[kk] - mu[ii])).sum()


def loss_total(components, w: LossWeights):
    """``L_s + lambda_m L_mm + lambda_v L_v + lambda_d L_d``.

    ``components`` is ``(L_s, L_mm, L_v, L_d)`` or a mapping with keys
    ``softmax``, ``margin_mean``, ``variance``, ``discordant``.
    """
    if isinstance(components, dict):
        components = (components["softmax"], components["margin_mean"], components["variance"], components["discordant"])
    ls, lmm, lv, ld = components
    return ls + w.lambda_m * lmm + w.lambda_v * lv + w.lambda_d * ld


def compute_losses(probs: torch.Tensor, labels: BatchLabels, w: LossWeights, rng=None, partners=None, use_softmax: bool = True) -> dict:
    """All four components plus ``total``.

    ``use_softmax=False`` drops the cross-entropy term from the total (for
    ablation).
    """
    parts = {
        "softmax": loss_softmax(probs, labels),
        "margin_mean": loss_margin_mean(probs, labels),
        "variance": loss_variance(probs),
        "discordant": loss_discordant(mean_lifetime(probs), labels, rng=rng, partners=partners),
    }
    ls = parts["softmax"] if use_softmax else torch.zeros((), dtype=probs.dtype)
    parts["total"] = loss_total((ls, parts["margin_mean"], parts["variance"], parts["discordant"]), w)
    return parts
