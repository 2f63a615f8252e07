"""Neighbour soft voting and entropy-based pseudo-label weighting."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

WEIGHTING_MODES = ("exponential", "linear", "hard")
_ATOL = 1e-9


@dataclass(frozen=True)
class RefinedLabel:
    label: int
    scores: np.ndarray
    weight: float


def _validate_probs(p: np.ndarray) -> None:
    if p.shape[-1] < 1 or np.any(~np.isfinite(p)) or np.any(p < -_ATOL) or np.any(p > 1 + _ATOL) \
            or np.any(np.abs(p.sum(axis=-1) - 1.0) > _ATOL):
        raise ValueError("invalid probability vector")


def soft_vote(neighbor_preds) -> np.ndarray:
    """Class-wise mean of neighbour probabilities.

    Accepts ``(K, C)`` for one sample or ``(B, K, C)`` for a batch.
    """
    p = np.asarray(neighbor_preds, dtype=np.float64)
    if p.ndim < 2 or p.shape[-2] == 0:
        raise ValueError("soft_vote needs at least one neighbour prediction")
    _validate_probs(p)
    return p.mean(axis=-2)


def refine_label(scores) -> np.ndarray | int:
    """Argmax with ties going to the lowest class index."""
    s = np.asarray(scores, dtype=np.float64)
    out = np.argmax(s, axis=-1)
    return int(out) if s.ndim == 1 else out


def normalized_entropy(p) -> np.ndarray | float:
    """Base-2 Shannon entropy divided by ``log2(C)``; lies in [0, 1]."""
    p = np.asarray(p, dtype=np.float64)
    c = p.shape[-1]
    if c < 2:
        raise ValueError("normalised entropy needs at least two classes")
    _validate_probs(p)
    safe = np.where(p > 0, p, 1.0)
    h = -np.sum(np.where(p > 0, p * np.log2(safe), 0.0), axis=-1) / np.log2(c)
    h = np.clip(h, 0.0, 1.0)
    return float(h) if h.ndim == 0 else h


def uncertainty_weight(p, mode: str = "exponential", threshold: float = 0.75):
    """Loss weight from the normalised entropy of averaged neighbour scores.

    exponential: ``exp(-H)``; linear: ``1 - H``; hard: 1 where ``H <= threshold``
    and 0 elsewhere.
    """
    h = np.asarray(normalized_entropy(p))
    if mode == "exponential":
        w = np.exp(-h)
    elif mode == "linear":
        w = 1.0 - h
    elif mode == "hard":
        w = (h <= threshold).astype(np.float64)
    else:
        raise ValueError(f"unknown weighting mode {mode!r}")
    return float(w) if w.ndim == 0 else w


def refine(neighbor_preds, mode: str = "exponential", threshold: float = 0.75) -> RefinedLabel:
    scores = soft_vote(neighbor_preds)
    return RefinedLabel(refine_label(scores), scores, uncertainty_weight(scores, mode, threshold))
