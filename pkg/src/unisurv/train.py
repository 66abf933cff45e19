"""Training loop with early stopping, cross-validation and grid search."""

from __future__ import annotations

import copy
import itertools
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
import torch

from .data import Dataset, split_dataset
from .km import KmCurve, censoring_km, km_fit_dataset, margin_labels
from .losses import BatchLabels, LossWeights, compute_losses
from .metrics import MetricsReport, UndefinedMetricError, c_index, evaluate_predictions
from .network import ConfigError, ModelConfig, ModelInputs, NumericError, UniSurvNet, load_checkpoint, predict_probs, save_checkpoint
from .preprocess import FeatureStats, feature_stats, impute_dataset

log = logging.getLogger(__name__)

METRIC_NAMES = ("c_index", "mae_u", "mae_h", "mauc")


class TrainingAborted(RuntimeError):
    """Loss became non-finite; ``fitted`` holds the last finite snapshot."""

    def __init__(self, message, fitted=None, log=None):
        super().__init__(message)
        self.fitted = fitted
        self.log = log


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    learning_rate: float = 1e-4
    weights: LossWeights = field(default_factory=LossWeights)
    patience: int = 20
    seed: int = 0
    n_folds: int = 5
    grad_clip: float | None = 5.0
    carry_limit: int = 3
    use_softmax_loss: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.patience < 0 or self.n_folds < 1:
            raise ConfigError("patience must be >= 0 and n_folds >= 1")


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_c_index: float = float("-inf")
    stopped_early: bool = False
    test: MetricsReport | None = None

    def deterministic_records(self) -> list[dict]:
        """Per-epoch records without wall-clock fields."""
        return [{k: v for k, v in e.items() if k != "wall_time"} for e in self.epochs]

    def to_jsonl(self) -> str:
        lines = [json.dumps(r, sort_keys=True) for r in self.deterministic_records()]
        return "\n".join(lines) + "\n"


def model_inputs(ds: Dataset, mc: ModelConfig, stats: FeatureStats | None, carry_limit: int = 3) -> ModelInputs:
    if ds.static_dim != mc.static_dim:
        raise ConfigError(f"data has {ds.static_dim} static features, model expects {mc.static_dim}")
    if ds.grid.t_max != mc.t_max:
        raise ConfigError(f"data grid t_max={ds.grid.t_max}, model expects {mc.t_max}")
    dt = mc.torch_dtype
    xs = torch.as_tensor(ds.static_matrix(), dtype=dt)
    if mc.dynamic_mode == "none":
        return ModelInputs(xs)
    if ds.dynamic_dim != mc.dynamic_dim:
        raise ConfigError(f"data has {ds.dynamic_dim} dynamic features, model expects {mc.dynamic_dim}")
    xd = impute_dataset(ds, stats, carry_limit).dynamic_tensor()
    if mc.dynamic_mode == "tabular":
        return ModelInputs(xs, x_dynamic=torch.as_tensor(xd, dtype=dt))
    return ModelInputs(xs, x_tensor=torch.as_tensor(xd.reshape(len(ds), mc.length, *mc.tensor_shape), dtype=dt))


def batch_labels(ds: Dataset, km: KmCurve) -> BatchLabels:
    times, events = ds.times(), ds.events()
    e_m, omega = margin_labels(km, times, events)
    return BatchLabels(times, events, e_m, omega)


@dataclass
class FittedModel:
    """A trained network with everything needed to score new data."""

    model: UniSurvNet
    train_config: TrainConfig
    stats: FeatureStats | None
    km_train: KmCurve
    km_censor: KmCurve

    @property
    def config(self) -> ModelConfig:
        return self.model.cfg

    def inputs(self, ds: Dataset) -> ModelInputs:
        return model_inputs(ds, self.config, self.stats, self.train_config.carry_limit)

    def predict(self, ds: Dataset) -> np.ndarray:
        return predict_probs(self.model, self.inputs(ds))

    def evaluate(self, ds: Dataset) -> MetricsReport:
        return evaluate_predictions(self.predict(ds), ds.times(), ds.events(), self.km_censor)

    def save(self, path) -> None:
        tc = asdict(self.train_config)
        extra = {
            "train_config": tc,
            "stats": None if self.stats is None else {"fill": self.stats.fill.tolist(), "kinds": list(self.stats.kinds)},
            "km_train": self.km_train.values.tolist(),
            "km_censor": self.km_censor.values.tolist(),
        }
        save_checkpoint(path, self.model, extra)

    @classmethod
    def load(cls, path) -> "FittedModel":
        model, extra = load_checkpoint(path)
        tc = dict(extra["train_config"])
        tc["weights"] = LossWeights(**tc["weights"])
        st = extra["stats"]
        stats = None if st is None else FeatureStats(np.array(st["fill"]), tuple(st["kinds"]))
        return cls(
            model,
            TrainConfig(**tc),
            stats,
            KmCurve(np.array(extra["km_train"])),
            KmCurve(np.array(extra["km_censor"])),
        )


def _safe_c_index(mu, times, events) -> float:
    try:
        return c_index(mu, times, events)
    except UndefinedMetricError:
        return float("nan")


def _restore(model, state):
    if state is not None:
        model.load_state_dict(state)
    model.eval()


def train_model(train: Dataset, val: Dataset, mc: ModelConfig, tc: TrainConfig) -> tuple[FittedModel, TrainLog]:
    """Mini-batch training on the combined loss, keeping the parameters with
    the best validation C-index.

    Margin times, censor weights and imputation statistics come from ``train``
    only.
    """
    torch.manual_seed(tc.seed)
    partner_rng = np.random.default_rng([tc.seed, 1])
    order_rng = np.random.default_rng([tc.seed, 2])

    km = km_fit_dataset(train)
    stats = feature_stats(train) if train.dynamic_dim else None
    fitted = FittedModel(UniSurvNet(mc), tc, stats, km, censoring_km(train.times(), train.events(), train.grid.t_max))
    model = fitted.model
    model.reseed_dropout(tc.seed)
    tr_inputs = fitted.inputs(train)
    tr_labels = batch_labels(train, km)
    va_inputs = fitted.inputs(val)
    va_t, va_e = val.times(), val.events()

    opt = torch.optim.Adam(model.parameters(), lr=tc.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    tlog = TrainLog()
    best_state = None
    bad_epochs = 0
    n = len(train)
    for epoch in range(tc.epochs):
        start = time.perf_counter()
        model.train()
        sums = dict.fromkeys(("softmax", "margin_mean", "variance", "discordant", "total"), 0.0)
        order = order_rng.permutation(n)
        for b, lo in enumerate(range(0, n, tc.batch_size)):
            idx = order[lo : lo + tc.batch_size]
            try:
                probs = model(tr_inputs.index(torch.as_tensor(idx)))
            except NumericError as exc:
                _restore(model, best_state)
                raise TrainingAborted(f"epoch {epoch}, batch {b}: {exc}", fitted, tlog) from exc
            parts = compute_losses(
                probs, tr_labels[idx], tc.weights, rng=partner_rng, use_softmax=tc.use_softmax_loss
            )
            loss = parts["total"]
            if not torch.isfinite(loss):
                _restore(model, best_state)
                raise TrainingAborted(f"non-finite loss at epoch {epoch}, batch {b}", fitted, tlog)
            opt.zero_grad()
            loss.backward()
            if tc.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), tc.grad_clip)
            opt.step()
            for k, v in parts.items():
                sums[k] += v.item()

        probs_val = predict_probs(model, va_inputs)
        val_c = _safe_c_index(probs_val @ np.arange(mc.length), va_t, va_e)
        record = {"epoch": epoch, **{f"loss_{k}": v for k, v in sums.items()}, "val_c_index": val_c}
        record["wall_time"] = time.perf_counter() - start
        tlog.epochs.append(record)
        log.info("epoch %d loss %.4g val C-index %.4f", epoch, sums["total"], val_c)

        if best_state is None or val_c > tlog.best_val_c_index:
            tlog.best_epoch, tlog.best_val_c_index = epoch, val_c
            best_state = copy.deepcopy(model.state_dict())
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs > tc.patience:
                tlog.stopped_early = True
                break
    model.load_state_dict(best_state)
    model.eval()
    return fitted, tlog


def fit_and_evaluate(ds: Dataset, mc: ModelConfig, tc: TrainConfig, split_seed: int) -> tuple[FittedModel, TrainLog, tuple]:
    train, val, test = split_dataset(ds, (0.7, 0.1, 0.2), seed=split_seed)
    fitted, tlog = train_model(train, val, mc, tc)
    tlog.test = fitted.evaluate(test)
    return fitted, tlog, (train, val, test)


def summarize(reports: list[MetricsReport]) -> dict:
    """Mean and sample standard deviation per metric (std 0 for one report)."""
    out = {}
    for name in METRIC_NAMES:
        vals = np.array([getattr(r, name) for r in reports], dtype=np.float64)
        out[name] = {
            "mean": float(vals.mean()) if vals.size else float("nan"),
            "std": float(vals.std(ddof=1)) if vals.size > 1 else 0.0,
        }
    return out


@dataclass
class CVResult:
    reports: list
    logs: list
    summary: dict
    failures: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "folds": [r.to_dict() for r in self.reports],
            "best_epochs": [lg.best_epoch for lg in self.logs],
            "summary": self.summary,
            "failures": self.failures,
        }


def cross_validate(ds: Dataset, mc: ModelConfig, tc: TrainConfig, on_fold=None) -> CVResult:
    """``n_folds`` independent 7:1:2 resplits with split seeds ``seed + fold``."""
    if len(ds) < 3 * tc.n_folds:
        raise ConfigError(f"need at least {3 * tc.n_folds} records for {tc.n_folds} folds")
    reports, logs, failures = [], [], []
    for fold in range(tc.n_folds):
        try:
            fitted, tlog, _ = fit_and_evaluate(ds, mc, replace(tc, seed=tc.seed + fold), split_seed=tc.seed + fold)
        except (TrainingAborted, FloatingPointError) as exc:
            failures.append({"fold": fold, "error": str(exc)})
            log.warning("fold %d failed: %s", fold, exc)
            continue
        reports.append(tlog.test)
        logs.append(tlog)
        if on_fold is not None:
            on_fold(fold, fitted, tlog)
    return CVResult(reports, logs, summarize(reports), failures)


MODEL_KEYS = {f.name for f in fields(ModelConfig)}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"weights"}
WEIGHT_KEYS = {"lambda_m", "lambda_v", "lambda_d"}


def apply_overrides(mc: ModelConfig, tc: TrainConfig, params: dict) -> tuple[ModelConfig, TrainConfig]:
    m, t, w = {}, {}, {}
    for key, value in params.items():
        if key in WEIGHT_KEYS:
            w[key] = value
        elif key in MODEL_KEYS:
            m[key] = value
        elif key in TRAIN_KEYS:
            t[key] = value
        else:
            raise ConfigError(f"unknown hyperparameter {key!r}")
    if w:
        t["weights"] = replace(tc.weights, **w)
    return replace(mc, **m), replace(tc, **t)


DEFAULT_SPACE = {
    "lambda_m": [0.01, 0.1, 1, 10],
    "lambda_v": [0.001, 0.01, 0.1, 1],
    "lambda_d": [0, 1],
    "batch_size": [4, 8, 16, 32],
    "dropout": [0.0, 0.1, 0.3],
    "n_heads": [1, 2, 4, 8],
    "d_model": [256, 512],
    "n_layers": [1, 2, 3, 4],
    "learning_rate": [1e-4, 1e-3],
}


def grid_search(
    train: Dataset,
    val: Dataset,
    space: dict,
    mc: ModelConfig,
    tc: TrainConfig,
    max_trials: int | None = None,
) -> tuple[ModelConfig, TrainConfig, list[dict]]:
    """Cartesian sweep ranked by best validation C-index.

    With ``max_trials`` a seeded random subset of the grid is tried instead.
    """
    if not space:
        raise ConfigError("empty search space")
    for key, cands in space.items():
        if not len(cands):
            raise ConfigError(f"no candidates for {key!r}")
    keys = list(space)
    combos = list(itertools.product(*(space[k] for k in keys)))
    if max_trials is not None and max_trials < len(combos):
        pick = np.random.default_rng(tc.seed).choice(len(combos), size=max_trials, replace=False)
        combos = [combos[i] for i in sorted(pick)]
    trials = []
    best = None
    for i, combo in enumerate(combos):
        params = dict(zip(keys, combo))
        m, t = apply_overrides(mc, tc, params)
        _, tlog = train_model(train, val, m, t)
        trials.append({"trial": i, **params, "val_c_index": tlog.best_val_c_index, "best_epoch": tlog.best_epoch})
        score = tlog.best_val_c_index
        if best is None or (not math.isnan(score) and score > best[0]):
            best = (score, m, t)
    return best[1], best[2], trials
