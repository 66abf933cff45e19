"""Evaluation metrics for discrete survival predictions."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .km import KmCurve


class UndefinedMetricError(ValueError):
    pass


@dataclass
class MetricsReport:
    c_index: float
    mae_u: float
    mae_h: float
    mauc: float
    td_auc: list = field(default_factory=list)  # [(t, auc), ...]
    n_eval_pairs: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["td_auc"] = [[int(t), float(a)] for t, a in self.td_auc]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def td_auc_csv(self) -> str:
        return "t,auc\n" + "".join(f"{int(t)},{float(a)!r}\n" for t, a in self.td_auc)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        d["td_auc"] = [tuple(x) for x in d.get("td_auc", [])]
        return cls(**d)


def _arrays(mu, times, events):
    mu = np.asarray(mu, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=bool)
    if not mu.shape == times.shape == events.shape:
        raise ValueError("predictions and labels must have the same length")
    return mu, times, events


def comparable_pairs(times, events) -> int:
    times = np.asarray(times)
    events = np.asarray(events, dtype=bool)
    st = np.sort(times)
    return int((times.size - np.searchsorted(st, times[events], side="right")).sum())


def c_index(mu, times, events, block: int = 2048) -> float:
    """Concordance of predicted mean lifetimes with observed times.

    A pair ``(i, k)`` is comparable when ``i`` has an event and ``T_i < T_k``;
    it is concordant when ``mu_i < mu_k``. Prediction ties score one half.
    """
    mu, times, events = _arrays(mu, times, events)
    anchors = np.flatnonzero(events)
    num = 0.0
    den = 0
    for s in range(0, anchors.size, block):
        a = anchors[s : s + block]
        comp = times[a, None] < times[None, :]
        num += (comp * ((mu[a, None] < mu[None, :]) + 0.5 * (mu[a, None] == mu[None, :]))).sum()
        den += int(comp.sum())
    if den == 0:
        raise UndefinedMetricError("no comparable pairs")
    return float(num / den)


def mae_u(mu, times, events) -> float:
    mu, times, events = _arrays(mu, times, events)
    if not events.any():
        raise UndefinedMetricError("MAE-U needs at least one uncensored subject")
    return float(np.abs(times[events] - mu[events]).mean())


def mae_h(mu, times, events) -> float:
    mu, times, events = _arrays(mu, times, events)
    cens = ~events
    if not cens.any():
        raise UndefinedMetricError("MAE-H needs at least one censored subject")
    return float(np.maximum(times[cens] - mu[cens], 0.0).mean())


def ipcw_weights(times, events, km_censor: KmCurve | None) -> np.ndarray:
    """``1 / G(T_i - 1)`` for events, 0 for censored subjects.

    ``G(t)`` is the censoring survival P(C > t), so ``G(T_i - 1)`` is the
    probability of still being uncensored at ``T_i``. Without a censoring curve
    every event gets weight 1.
    """
    times = np.asarray(times, dtype=np.int64)
    events = np.asarray(events, dtype=bool)
    w = np.zeros(times.size)
    if km_censor is None:
        w[events] = 1.0
        return w
    g = np.concatenate(([1.0], km_censor.values))  # g[t] = G(t - 1)
    idx = np.clip(times[events], 0, km_censor.t_max + 1)
    gv = g[idx]
    w[events] = np.where(gv > 0, 1.0 / np.where(gv > 0, gv, 1.0), 0.0)
    return w


def _weighted_auc(risk, case_mask, ctrl_mask, w) -> float:
    ctrl = np.sort(risk[ctrl_mask])
    rc = risk[case_mask]
    below = np.searchsorted(ctrl, rc, side="left")
    ties = np.searchsorted(ctrl, rc, side="right") - below
    wc = w[case_mask]
    return float((wc * (below + 0.5 * ties)).sum() / (wc.sum() * ctrl.size))


def td_auc(preds, times, events, km_censor: KmCurve | None = None, eval_times=None) -> list[tuple[int, float]]:
    """Cumulative/dynamic AUC at each evaluation time.

    Cases are events with ``T <= t`` (inverse-probability-of-censoring
    weighted), controls are subjects with ``T > t``. Times without cases,
    controls or positive case weight are dropped.
    """
    times = np.asarray(times, dtype=np.int64)
    events = np.asarray(events, dtype=bool)
    preds = np.asarray(preds, dtype=np.float64)
    t_max = preds.shape[1] - 1 if preds.ndim == 2 else int(times.max())
    if eval_times is None:
        eval_times = range(1, t_max)
    w = ipcw_weights(times, events, km_censor)
    out = []
    cum = np.cumsum(preds, axis=1) if preds.ndim == 2 else None
    for t in eval_times:
        t = int(t)
        case = events & (times <= t)
        ctrl = times > t
        if not case.any() or not ctrl.any() or w[case].sum() <= 0:
            continue
        risk = -preds if cum is None else cum[:, min(t, t_max)]
        out.append((t, _weighted_auc(risk, case, ctrl, w)))
    if not out:
        raise UndefinedMetricError("no evaluation time has both cases and controls")
    return out


def mauc(td) -> float:
    """Trapezoidal average of a TD-AUC series over its time span."""
    if not len(td):
        raise UndefinedMetricError("empty TD-AUC series")
    t = np.array([x[0] for x in td], dtype=np.float64)
    a = np.array([x[1] for x in td], dtype=np.float64)
    if t.size == 1:
        return float(a[0])
    return float(np.trapezoid(a, t) / (t[-1] - t[0]))


def evaluate_predictions(probs, times, events, km_censor: KmCurve | None = None, eval_times=None) -> MetricsReport:
    """All metrics from a ``(n, t_max + 1)`` probability matrix.

    A metric that is undefined on this sample (for example MAE-H without
    censored subjects) is reported as NaN.
    """
    probs = np.asarray(probs, dtype=np.float64)
    mu = probs @ np.arange(probs.shape[1])

    def safe(fn, *args):
        try:
            return fn(*args)
        except UndefinedMetricError:
            return float("nan")

    td = safe(td_auc, probs, times, events, km_censor, eval_times)
    td = [] if isinstance(td, float) else td
    return MetricsReport(
        c_index=safe(c_index, mu, times, events),
        mae_u=safe(mae_u, mu, times, events),
        mae_h=safe(mae_h, mu, times, events),
        mauc=safe(mauc, td) if td else float("nan"),
        td_auc=td,
        n_eval_pairs=comparable_pairs(times, events),
    )

