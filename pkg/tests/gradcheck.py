"""Finite-difference gradient checking shared by the network and acceptance tests."""

from __future__ import annotations

import numpy as np
import torch

from oracles import central_differences
from unisurv.km import km_fit, margin_labels
from unisurv.losses import BatchLabels, LossWeights, compute_losses, sample_partners
from unisurv.network import ModelConfig, ModelInputs, UniSurvNet, forward

# |a - n| / max(|a|, |n|, FLOOR) <= tol is allclose(rtol=tol, atol=tol * FLOOR):
# relative for sizeable gradients, absolute (1e-8) where FD round-off dominates
FLOOR = 1e-4
COMPONENTS = ("softmax", "margin_mean", "variance", "discordant", "total")
WEIGHTS = LossWeights(1.0, 0.01, 1.0)


def rel_error(a: np.ndarray, n: np.ndarray) -> np.ndarray:
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), FLOOR)


def small_problem(seed=0, dynamic=True, batch=4):
    """A d_m=8, 1-layer, t_max=10 float64 model with a mixed batch.

    ReLU and hinge kinks make central differences meaningless within eps of a
    boundary; the default seed gives a point with no boundary that close.
    """
    cfg = ModelConfig(
        t_max=10,
        static_dim=3,
        dynamic_dim=2 if dynamic else 0,
        dynamic_mode="tabular" if dynamic else "none",
        d_model=8,
        n_heads=2,
        n_layers=1,
        dropout=0.0,
        static_latent=6,
        dynamic_latent=4,
        seed=seed,
        dtype="float64",
    )
    model = UniSurvNet(cfg).eval()
    rng = np.random.default_rng(seed)
    inputs = ModelInputs.from_arrays(
        rng.normal(size=(batch, 3)),
        rng.normal(size=(batch, cfg.length, 2)) if dynamic else None,
        dtype=torch.float64,
    )
    times = rng.integers(0, 11, batch)
    events = np.arange(batch) % 2 == 0
    km = km_fit(times, events, 10)
    e_m, w = margin_labels(km, times, events)
    labels = BatchLabels.build(times, events, e_m, w)
    partners = sample_partners(times, events, np.random.default_rng(seed + 1))
    return model, inputs, labels, partners


def loss_fn(model, inputs, labels, partners, name):
    probs = model(inputs)
    return compute_losses(probs, labels, WEIGHTS, partners=partners)[name]


def max_rel_error(model, inputs, labels, partners, name, eps=1e-5) -> tuple[float, str]:
    """Worst relative error over every parameter entry for one loss component."""
    probs, tape = forward(model, inputs)
    loss = compute_losses(probs, labels, WEIGHTS, partners=partners)[name]
    analytic = tape.backward(loss)
    worst, where = 0.0, ""
    with torch.no_grad():
        def f():
            return float(loss_fn(model, inputs, labels, partners, name))

        for pname, p in model.named_parameters():
            x = p.data.numpy()  # shares memory with the parameter
            numeric = central_differences(f, x, eps)
            err = rel_error(analytic[pname], numeric).max()
            if err > worst:
                worst, where = float(err), pname
    return worst, where
