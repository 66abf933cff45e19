"""Command-line entry point: ``unisurv {synth,train,predict,eval,km}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .data import DataError, TimeGrid, atomic_write_text, load_dataset, save_dataset, split_dataset
from .distribution import survival_values
from .km import km_fit_dataset
from .losses import LossError
from .network import ConfigError, ModelConfig
from .synth import SynthConfig, SynthConfigError, generate, stats_json
from .train import (
    MODEL_KEYS,
    TRAIN_KEYS,
    WEIGHT_KEYS,
    FittedModel,
    TrainConfig,
    TrainingAborted,
    apply_overrides,
    cross_validate,
    fit_and_evaluate,
    grid_search,
)

log = logging.getLogger("unisurv")

THREADS_ENV = "UNISURV_NUM_THREADS"


class UsageError(Exception):
    pass


USAGE_ERRORS = (UsageError, ConfigError, DataError, SynthConfigError, LossError)


def _parse_value(raw: str):
    raw = raw.strip()
    low = raw.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null"):
        return None
    if "," in raw:
        return tuple(_parse_value(v) for v in raw.split(","))
    for conv in (int, float):
        try:
            return conv(raw)
        except ValueError:
            pass
    return raw


def read_keyvalue(path, allowed: set | None = None) -> dict:
    """``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if allowed is not None and key not in allowed:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = _parse_value(value)
    return out


def read_grid(path) -> dict:
    space = {}
    for key, value in read_keyvalue(path, MODEL_KEYS | TRAIN_KEYS | WEIGHT_KEYS).items():
        space[key] = list(value) if isinstance(value, tuple) else [value]
    return space


def _load_data(data_dir, t_max: int | None = None):
    data_dir = Path(data_dir)
    static = data_dir / "static.csv" if data_dir.is_dir() else data_dir
    if not static.exists():
        raise UsageError(f"no static data at {static}")
    dynamic = static.with_name("dynamic.csv")
    stats = static.with_name("stats.json")
    if t_max is None and stats.exists():
        # synth output records its grid; label times alone may stop short of it
        t_max = json.loads(stats.read_text(encoding="utf-8")).get("t_max")
    grid = None if t_max is None else TimeGrid(int(t_max))
    return load_dataset(static, dynamic if dynamic.exists() else None, grid)


def _write_manifest(path, args, config: dict, inputs, outputs, started: float):
    manifest = {
        "command": args.command,
        "argv": args.argv,
        "config": config,
        "seed": getattr(args, "seed", None),
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "version": __version__,
        "wall_time": time.time() - started,
    }
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def cmd_synth(args) -> int:
    started = time.time()
    kw = dict(
        n_records=args.n,
        k=args.k,
        noise_eps=args.eps0,
        seed=args.seed,
        base_dynamic_dim=20 if args.kind == "d" else 0,
        censor_fraction=args.censor_fraction,
        t_max=args.t_max,
        observe_prob=args.observe_prob,
    )
    if args.weibull_shape is not None:
        kw["weibull_shape"] = args.weibull_shape
    if args.weibull_scale is not None:
        kw["weibull_scale"] = args.weibull_scale
    cfg = SynthConfig(**kw)
    ds = generate(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = [out / "static.csv", out / "stats.json"]
    save_dataset(ds, out / "static.csv", out / "dynamic.csv" if ds.dynamic_dim else None)
    if ds.dynamic_dim:
        outputs.append(out / "dynamic.csv")
    atomic_write_text(out / "stats.json", stats_json(ds))
    _write_manifest(out / "manifest.json", args, asdict(cfg), [], outputs, started)
    return 0


def _configs(ds, cfg: dict, seed: int | None) -> tuple[ModelConfig, TrainConfig]:
    model_kw = {k: v for k, v in cfg.items() if k in MODEL_KEYS}
    model_kw.setdefault("t_max", ds.grid.t_max)
    model_kw.setdefault("static_dim", ds.static_dim)
    model_kw.setdefault("dynamic_dim", ds.dynamic_dim)
    if ds.dynamic_dim:
        model_kw.setdefault("dynamic_mode", "tabular")
    for key in ("static_dim", "dynamic_dim"):
        if model_kw[key] != getattr(ds, key):
            raise UsageError(f"config {key}={model_kw[key]} but data has {getattr(ds, key)}")
    if seed is not None:
        model_kw["seed"] = seed
    mc = ModelConfig(**model_kw)
    tc = TrainConfig()
    rest = {k: v for k, v in cfg.items() if k in TRAIN_KEYS or k in WEIGHT_KEYS}
    if seed is not None:
        rest["seed"] = seed
    return apply_overrides(mc, tc, rest)


def _write_fit(out: Path, fitted: FittedModel, tlog) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    fitted.save(out / "checkpoint.pt")
    atomic_write_text(out / "trainlog.jsonl", tlog.to_jsonl())
    atomic_write_text(out / "metrics.json", tlog.test.to_json())
    atomic_write_text(out / "td_auc.csv", tlog.test.td_auc_csv())
    return [out / n for n in ("checkpoint.pt", "trainlog.jsonl", "metrics.json", "td_auc.csv")]


def _summary_line(m: dict) -> str:
    return f"c-index={m['c_index']:.4f} mae_u={m['mae_u']:.4f} mae_h={m['mae_h']:.4f} mauc={m['mauc']:.4f}"


def cmd_train(args) -> int:
    started = time.time()
    cfg = read_keyvalue(args.config, MODEL_KEYS | TRAIN_KEYS | WEIGHT_KEYS)
    ds = _load_data(args.data, cfg.get("t_max"))
    mc, tc = _configs(ds, cfg, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []

    if args.grid:
        space = read_grid(args.grid)
        train, val, _ = split_dataset(ds, seed=tc.seed)
        mc, tc, trials = grid_search(train, val, space, mc, tc, max_trials=args.max_trials)
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(trials[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(trials)
        atomic_write_text(out / "grid_trials.csv", buf.getvalue())
        outputs.append(out / "grid_trials.csv")

    folds = args.folds if args.folds is not None else 1
    if folds > 1:
        tc = apply_overrides(mc, tc, {"n_folds": folds})[1]
        fold_outputs = []
        res = cross_validate(
            ds, mc, tc, on_fold=lambda i, f, lg: fold_outputs.extend(_write_fit(out / f"fold{i}", f, lg))
        )
        outputs += fold_outputs
        atomic_write_text(out / "cv_summary.json", json.dumps(res.to_dict(), indent=2, sort_keys=True) + "\n")
        outputs.append(out / "cv_summary.json")
        if not res.reports:
            raise TrainingAborted("every fold failed: " + "; ".join(f["error"] for f in res.failures))
        means = {k: v["mean"] for k, v in res.summary.items()}
    else:
        try:
            fitted, tlog, _ = fit_and_evaluate(ds, mc, tc, split_seed=tc.seed)
        except TrainingAborted as exc:
            if exc.fitted is None:
                raise
            out.mkdir(parents=True, exist_ok=True)
            exc.fitted.save(out / "checkpoint.pt")
            atomic_write_text(out / "trainlog.jsonl", exc.log.to_jsonl())
            raise TrainingAborted(f"{exc}; last finite snapshot saved to {out / 'checkpoint.pt'}") from exc
        outputs += _write_fit(out, fitted, tlog)
        means = tlog.test.to_dict()
    print(_summary_line(means))
    config = {"model": asdict(mc), "train": asdict(tc)}
    _write_manifest(out / "manifest.json", args, config, [args.data, args.config], outputs, started)
    return 0


def _load_for_model(args):
    try:
        fitted = FittedModel.load(args.checkpoint)
    except (OSError, KeyError, RuntimeError) as exc:
        raise UsageError(f"cannot load checkpoint {args.checkpoint}: {exc}") from None
    ds = _load_data(args.data, fitted.config.t_max)
    return fitted, ds


def cmd_predict(args) -> int:
    started = time.time()
    fitted, ds = _load_for_model(args)
    probs = fitted.predict(ds)
    surv = survival_values(probs)
    t = np.arange(probs.shape[1])
    mu = probs @ t
    var = (probs * (t - mu[:, None]) ** 2).sum(axis=1)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "t", "p", "survival", "mean_lifetime", "variance"])
    for i, rid in enumerate(ds.ids):
        m, v = repr(float(mu[i])), repr(float(var[i]))
        for j in t:
            w.writerow([rid, int(j), repr(float(probs[i, j])), repr(float(surv[i, j])), m, v])
    out = Path(args.out)
    atomic_write_text(out, buf.getvalue())
    _write_manifest(out.with_name(out.name + ".manifest.json"), args, asdict(fitted.config), [args.checkpoint, args.data], [out], started)
    return 0


def cmd_eval(args) -> int:
    started = time.time()
    fitted, ds = _load_for_model(args)
    report = fitted.evaluate(ds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "metrics.json", report.to_json())
    atomic_write_text(out / "td_auc.csv", report.td_auc_csv())
    print(_summary_line(report.to_dict()))
    outputs = [out / "metrics.json", out / "td_auc.csv"]
    _write_manifest(out / "manifest.json", args, asdict(fitted.config), [args.checkpoint, args.data], outputs, started)
    return 0


def cmd_km(args) -> int:
    started = time.time()
    ds = _load_data(args.data, args.t_max)
    out = Path(args.out)
    atomic_write_text(out, km_fit_dataset(ds).to_csv())
    _write_manifest(out.with_name(out.name + ".manifest.json"), args, {"t_max": ds.grid.t_max}, [args.data], [out], started)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="unisurv", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--kind", choices=("s", "d"), required=True)
    s.add_argument("--n", type=int, required=True, help="number of records")
    s.add_argument("--k", type=int, default=0, help="dimension inflation exponent")
    s.add_argument("--eps0", type=float, default=0.0, help="covariate noise level")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--t-max", type=int, default=None)
    s.add_argument("--censor-fraction", type=float, default=0.5)
    s.add_argument("--weibull-shape", type=float, default=None)
    s.add_argument("--weibull-scale", type=float, default=None)
    s.add_argument("--observe-prob", type=float, default=1.0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train and evaluate a model")
    t.add_argument("--data", required=True, help="directory with static.csv [and dynamic.csv]")
    t.add_argument("--config", required=True, help="key = value configuration file")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--folds", type=int, default=None)
    t.add_argument("--grid", default=None, help="key = v1, v2, ... search space file")
    t.add_argument("--max-trials", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="per-subject PDFs and survival curves")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--out", required=True, help="output CSV")
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("eval", help="metrics of a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True, help="output directory")
    e.set_defaults(func=cmd_eval)

    k = sub.add_parser("km", help="Kaplan-Meier curve of a dataset as CSV")
    k.add_argument("--data", required=True)
    k.add_argument("--out", required=True)
    k.add_argument("--t-max", type=int, default=None)
    k.set_defaults(func=cmd_km)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    threads = os.environ.get(THREADS_ENV)
    if threads:
        torch.set_num_threads(int(threads))
    try:
        return args.func(args)
    except USAGE_ERRORS as exc:
        print(f"unisurv {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (TrainingAborted, FloatingPointError) as exc:
        print(f"unisurv {args.command}: training aborted: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
