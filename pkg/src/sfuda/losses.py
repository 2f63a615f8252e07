"""Adaptation objectives with closed-form gradients.

Each loss returns a :class:`LossValue` whose ``grads`` map an input name
(``"logits"`` or ``"query"``) to d(loss)/d(input), shaped like that input.
Batch losses are means over the batch.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import softmax

CLASSIFICATION_MODES = ("negative", "positive", "positive_plus_negative")
UNIT_TOL = 1e-6


@dataclass
class LossValue:
    value: float
    grads: dict[str, np.ndarray] = field(default_factory=dict)

    def scaled(self, coef: float) -> LossValue:
        return LossValue(coef * self.value, {k: coef * g for k, g in self.grads.items()})


def _logsumexp(z: np.ndarray) -> np.ndarray:
    m = np.max(z, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return (m + np.log(np.sum(np.exp(z - m), axis=-1, keepdims=True)))[..., 0]


def draw_complementary(labels, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    """One label per sample, uniform over every class except the given one."""
    if n_classes < 2:
        raise ValueError("no complementary label exists with fewer than two classes")
    labels = np.asarray(labels, dtype=np.int64)
    offset = rng.integers(1, n_classes, size=labels.shape)
    return (labels + offset) % n_classes


def classification_loss(
    logits,
    labels,
    weights,
    mode: str = "negative",
    rng: np.random.Generator | None = None,
    complementary=None,
) -> LossValue:
    """Weighted classification loss on the strongly augmented view.

    negative: ``-w * ln(1 - p[comp])`` with ``comp`` a random class other than
    the pseudo-label; positive: ``-w * ln p[label]``; positive_plus_negative:
    their sum. Either `rng` or precomputed `complementary` labels must be
    supplied for the negative term.
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2 or len(z) == 0:
        raise ValueError("classification_loss needs a nonempty (B, C) batch of logits")
    b, c = z.shape
    labels = np.asarray(labels, dtype=np.int64)
    w = np.asarray(weights, dtype=np.float64).reshape(b)
    if mode not in CLASSIFICATION_MODES:
        raise ValueError(f"unknown classification mode {mode!r}")

    lse = _logsumexp(z)
    probs = softmax(z)
    per_sample = np.zeros(b)
    grad = np.zeros_like(z)
    rows = np.arange(b)

    if mode in ("negative", "positive_plus_negative"):
        if c < 2:
            raise ValueError("no complementary label exists with fewer than two classes")
        if complementary is None:
            if rng is None:
                raise ValueError("negative learning needs an rng or explicit complementary labels")
            complementary = draw_complementary(labels, c, rng)
        comp = np.asarray(complementary, dtype=np.int64)
        others = z.copy()
        others[rows, comp] = -np.inf
        # ln(1 - p_comp) = lse(z without comp) - lse(z)
        per_sample += w * (lse - _logsumexp(others))
        rest = softmax(others)
        grad += w[:, None] * (probs - rest)

    if mode in ("positive", "positive_plus_negative"):
        per_sample += w * (lse - z[rows, labels])
        onehot = np.zeros_like(z)
        onehot[rows, labels] = 1.0
        grad += w[:, None] * (probs - onehot)

    return LossValue(float(per_sample.sum() / b), {"logits": grad / b})


def _check_unit(v: np.ndarray, name: str) -> None:
    norms = np.linalg.norm(np.atleast_2d(v), axis=-1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise ValueError(f"{name} must be unit-norm")


def contrastive_loss(q, k_pos, queue_keys, mask, temperature: float = 0.07) -> LossValue:
    """InfoNCE for one query against its positive key and the kept negatives.

    The positive logit is part of the denominator. Only ``q`` is differentiated;
    keys come from the momentum encoder. Masked-out keys are dropped before any
    arithmetic, so they cannot influence the result even by rounding.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    q = np.asarray(q, dtype=np.float64)
    k_pos = np.asarray(k_pos, dtype=np.float64)
    keys = np.asarray(queue_keys, dtype=np.float64).reshape(-1, q.shape[0])
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if len(mask) != len(keys):
        raise ValueError("mask length must equal queue length")
    _check_unit(q, "query")
    _check_unit(k_pos, "positive key")

    kept = keys[mask]
    if len(kept):
        _check_unit(kept, "queue key")
    cand = np.vstack([k_pos[None, :], kept])
    s = cand @ q / temperature
    weights = softmax(s)
    value = float(_logsumexp(s) - s[0])
    grad = (weights @ cand - k_pos) / temperature
    return LossValue(value, {"query": grad})


def contrastive_loss_batch(queries, pos_keys, queue_keys, masks, temperature: float = 0.07) -> LossValue:
    queries = np.asarray(queries, dtype=np.float64)
    b = len(queries)
    if b == 0:
        raise ValueError("empty batch")
    total = 0.0
    grad = np.zeros_like(queries)
    for i in range(b):
        lv = contrastive_loss(queries[i], pos_keys[i], queue_keys, masks[i], temperature)
        total += lv.value
        grad[i] = lv.grads["query"]
    return LossValue(total / b, {"query": grad / b})


def diversity_loss(logits) -> LossValue:
    """Negative entropy (natural log) of the batch-mean prediction."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2 or len(z) == 0:
        raise ValueError("diversity_loss needs a nonempty (B, C) batch of logits")
    b = len(z)
    p = softmax(z)
    pbar = p.mean(axis=0)
    pos = pbar > 0
    log_pbar = np.where(pos, np.log(np.where(pos, pbar, 1.0)), 0.0)
    value = float(np.sum(pbar * log_pbar))
    g = np.where(pos, log_pbar + 1.0, 0.0)
    grad = p * (g[None, :] - (p * g[None, :]).sum(axis=1, keepdims=True)) / b
    return LossValue(value, {"logits": grad})


def total_loss(cls: LossValue, ctr: LossValue, div: LossValue,
               gamma1: float = 1.0, gamma2: float = 1.0, gamma3: float = 1.0) -> LossValue:
    value = 0.0
    grads: dict[str, np.ndarray] = {}
    for part, coef in ((cls, gamma1), (ctr, gamma2), (div, gamma3)):
        if coef == 0:
            continue
        if not np.isfinite(part.value):
            raise ValueError("non-finite loss component")
        value += coef * part.value
        for k, g in part.grads.items():
            grads[k] = grads[k] + coef * g if k in grads else coef * g
    return LossValue(float(value), grads)
