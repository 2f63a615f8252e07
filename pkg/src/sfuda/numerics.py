"""Small float64 numeric substrate: activations, normalisation, similarity,
finite-difference checks and the SGD update used everywhere else.

Everything here is a pure function over numpy arrays.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

DEGENERATE_NORM = 1e-12


def _as_vector(v) -> np.ndarray:
    return np.asarray(v, dtype=np.float64)


def softmax(logits) -> np.ndarray:
    """Numerically stable softmax along the last axis."""
    z = _as_vector(logits)
    if z.size == 0 or z.shape[-1] == 0:
        raise ValueError("empty logits")
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    z = _as_vector(logits)
    if z.size == 0 or z.shape[-1] == 0:
        raise ValueError("empty logits")
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def l2_normalize(v) -> np.ndarray:
    """Scale `v` (or each row of a matrix) to unit Euclidean norm."""
    x = _as_vector(v)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms <= DEGENERATE_NORM):
        raise ValueError("degenerate feature")
    return x / norms


def l2_normalize_backward(z: np.ndarray, grad_unit: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. ``z / ||z||`` back to ``z`` (row-wise)."""
    z = _as_vector(z)
    norms = np.linalg.norm(z, axis=-1, keepdims=True)
    u = z / norms
    radial = np.sum(grad_unit * u, axis=-1, keepdims=True)
    return (grad_unit - radial * u) / norms


def cosine_distance(a, b) -> float:
    a = _as_vector(a)
    b = _as_vector(b)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na <= DEGENERATE_NORM or nb <= DEGENERATE_NORM:
        raise ValueError("degenerate feature")
    cos = float(a @ b) / (na * nb)
    # rounding can push |cos| a hair past 1
    return float(1.0 - min(1.0, max(-1.0, cos)))


def finite_diff_grad(fn: Callable[[np.ndarray], float], point, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    if not 0.0 < step <= 1e-2:
        raise ValueError(f"step must lie in (0, 1e-2], got {step}")
    x = np.array(point, dtype=np.float64).reshape(-1)
    grad = np.empty_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + step
        f_plus = fn(x.copy())
        x[i] = orig - step
        f_minus = fn(x.copy())
        x[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise ValueError(f"non-finite function value at coordinate {i}")
        grad[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


@dataclass(frozen=True)
class GradientCheckReport:
    max_relative_error: float
    parameter_count: int

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.max_relative_error < tolerance


def relative_error(analytic, numeric) -> np.ndarray:
    a = _as_vector(analytic)
    n = _as_vector(numeric)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
    return np.abs(a - n) / denom


def check_gradient(
    fn: Callable[[np.ndarray], float],
    analytic_grad,
    point,
    step: float = 1e-5,
) -> GradientCheckReport:
    """Compare an analytic gradient at `point` against central differences."""
    analytic = _as_vector(analytic_grad).reshape(-1)
    numeric = finite_diff_grad(fn, point, step)
    if analytic.shape != numeric.shape:
        raise ValueError(f"gradient shape {analytic.shape} does not match point {numeric.shape}")
    err = relative_error(analytic, numeric)
    return GradientCheckReport(float(err.max()) if err.size else 0.0, int(numeric.size))


def sgd_step(params, grads, learning_rate: float, momentum_buffer, momentum: float):
    """Heavy-ball SGD: ``buf = momentum*buf + g``; ``params -= lr*buf``.

    Returns new ``(params, momentum_buffer)`` arrays; inputs are not modified.
    """
    p = _as_vector(params)
    g = _as_vector(grads)
    buf = _as_vector(momentum_buffer)
    if not (p.shape == g.shape == buf.shape):
        raise ValueError(f"shape mismatch: params {p.shape}, grads {g.shape}, buffer {buf.shape}")
    if learning_rate <= 0:
        raise ValueError("learning_rate must be positive")
    if not 0.0 <= momentum < 1.0:
        raise ValueError("momentum must lie in [0, 1)")
    new_buf = momentum * buf + g
    return p - learning_rate * new_buf, new_buf
