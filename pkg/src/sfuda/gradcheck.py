"""Finite-difference verification of every loss gradient.

Each suite draws random small instances (at most 50 differentiable inputs or
parameters), compares the analytic gradient against central differences and
reports the worst relative error.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import losses
from .model import ModelConfig, backward, forward_batch, init_model
from .numerics import check_gradient, l2_normalize, l2_normalize_backward

TOLERANCE = 1e-4
STEP = 1e-5


@dataclass
class SuiteResult:
    name: str
    trials: int
    max_relative_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_relative_error < TOLERANCE


def _classification_trial(rng: np.random.Generator, mode: str) -> float:
    b = int(rng.integers(1, 9))
    c = int(rng.integers(2, 7))
    logits = rng.normal(scale=2.0, size=(b, c))
    labels = rng.integers(c, size=b)
    comp = losses.draw_complementary(labels, c, rng)
    w = rng.uniform(0.0, 1.0, size=b)

    def fn(v):
        return losses.classification_loss(v.reshape(b, c), labels, w, mode, complementary=comp).value

    grad = losses.classification_loss(logits, labels, w, mode, complementary=comp).grads["logits"]
    return check_gradient(fn, grad, logits, STEP).max_relative_error


def _contrastive_trial(rng: np.random.Generator) -> float:
    p = int(rng.integers(2, 9))
    raw_q = rng.normal(size=p)
    k_pos = l2_normalize(rng.normal(size=p))
    n = int(rng.integers(0, 9))
    keys = l2_normalize(rng.normal(size=(n, p))) if n else np.zeros((0, p))
    mask = rng.random(n) < 0.6
    tau = float(rng.uniform(0.07, 1.0))

    # probe through the normalisation so every evaluation sees a unit query
    def fn(v):
        return losses.contrastive_loss(l2_normalize(v), k_pos, keys, mask, tau).value

    lv = losses.contrastive_loss(l2_normalize(raw_q), k_pos, keys, mask, tau)
    grad = l2_normalize_backward(raw_q, lv.grads["query"])
    return check_gradient(fn, grad, raw_q, STEP).max_relative_error


def _diversity_trial(rng: np.random.Generator) -> float:
    b = int(rng.integers(1, 9))
    c = int(rng.integers(2, 7))
    logits = rng.normal(scale=2.0, size=(b, c))

    def fn(v):
        return losses.diversity_loss(v.reshape(b, c)).value

    return check_gradient(fn, losses.diversity_loss(logits).grads["logits"], logits, STEP).max_relative_error


_TINY = ModelConfig(input_dim=2, hidden=(3,), bottleneck=3, n_classes=2)  # 35 parameters


def _model_trial(rng: np.random.Generator) -> float:
    """Parameters of a tiny network through the combined adaptation loss."""
    b = 3
    while True:
        # nonzero biases; redraw if every hidden unit is off for some input
        params = init_model(_TINY, rng)
        params = params.with_flat(params.flatten() + rng.normal(scale=0.2, size=params.flatten().shape))
        xs = rng.normal(size=(b, 2))
        if np.linalg.norm(forward_batch(params, xs)[0], axis=1).min() > 1e-3:
            break
    labels = rng.integers(2, size=b)
    comp = losses.draw_complementary(labels, 2, rng)
    w = rng.uniform(0.3, 1.0, size=b)
    k_pos = l2_normalize(rng.normal(size=(b, 3)))
    keys = l2_normalize(rng.normal(size=(4, 3)))
    masks = rng.random((b, 4)) < 0.6

    def evaluate(p, want_grad):
        z, logits, _, cache = forward_batch(p, xs, keep_cache=True)
        cls = losses.classification_loss(logits, labels, w, "negative", complementary=comp)
        div = losses.diversity_loss(logits)
        ctr = losses.contrastive_loss_batch(l2_normalize(z), k_pos, keys, masks, 0.5)
        ctr = losses.LossValue(ctr.value, {"z": l2_normalize_backward(z, ctr.grads["query"])})
        tot = losses.total_loss(cls, ctr, div)
        if not want_grad:
            return tot.value
        return backward(p, cache, grad_logits=tot.grads["logits"], grad_z=tot.grads["z"]).flatten()

    flat = params.flatten()
    analytic = evaluate(params, True)
    return check_gradient(lambda v: evaluate(params.with_flat(v), False), analytic, flat, STEP).max_relative_error


def suites() -> dict:
    return {
        "classification_negative": lambda rng: _classification_trial(rng, "negative"),
        "classification_positive": lambda rng: _classification_trial(rng, "positive"),
        "classification_positive_plus_negative": lambda rng: _classification_trial(rng, "positive_plus_negative"),
        "contrastive": _contrastive_trial,
        "diversity": _diversity_trial,
        "model_through_total_loss": _model_trial,
    }


def run_suites(trials: int = 100, seed: int = 0, names: list[str] | None = None) -> list[SuiteResult]:
    results = []
    for name, trial in suites().items():
        if names is not None and name not in names:
            continue
        rng = np.random.default_rng([seed, len(results)])
        start = time.perf_counter()
        worst = max(trial(rng) for _ in range(trials)) if trials > 0 else 0.0
        results.append(SuiteResult(name, trials, float(worst), time.perf_counter() - start))
    return results
