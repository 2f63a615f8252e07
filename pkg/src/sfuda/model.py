"""MLP feature extractor + linear classifier, with a hand-written backward pass.

The encoder is ``input -> hidden (ReLU) ... -> bottleneck`` (the bottleneck is
linear and its output is the feature vector ``z``); the classifier maps ``z`` to
``C`` logits. Weight matrices are stored as ``(fan_out, fan_in)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import relu, softmax


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 2
    hidden: tuple[int, ...] = (32, 32)
    bottleneck: int = 16
    n_classes: int = 2

    def validate(self) -> None:
        widths = (self.input_dim, *self.hidden, self.bottleneck)
        if any(int(w) < 1 for w in widths):
            raise ValueError(f"zero-width layer in {widths}")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.bottleneck)


@dataclass
class ModelParams:
    encoder: list[tuple[np.ndarray, np.ndarray]]
    classifier: tuple[np.ndarray, np.ndarray]
    seed: int | None = field(default=None, compare=False)

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in self.encoder:
            out += [w, b]
        out += list(self.classifier)
        return out

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.encoder[0][0].shape[1], *(w.shape[0] for w, _ in self.encoder))

    @property
    def n_classes(self) -> int:
        return self.classifier[0].shape[0]

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for a in self.arrays()])

    def with_flat(self, flat: np.ndarray) -> ModelParams:
        """New params with the same shapes, filled from a flat vector."""
        flat = np.asarray(flat, dtype=np.float64)
        arrays, pos = [], 0
        for a in self.arrays():
            arrays.append(flat[pos:pos + a.size].reshape(a.shape).copy())
            pos += a.size
        if pos != flat.size:
            raise ValueError(f"flat vector has {flat.size} entries, expected {pos}")
        return _from_arrays(arrays, self.seed)

    def copy(self) -> ModelParams:
        return _from_arrays([a.copy() for a in self.arrays()], self.seed)

    def same_shape(self, other: ModelParams) -> bool:
        return [a.shape for a in self.arrays()] == [a.shape for a in other.arrays()]


def _from_arrays(arrays: list[np.ndarray], seed: int | None) -> ModelParams:
    pairs = [(arrays[i], arrays[i + 1]) for i in range(0, len(arrays), 2)]
    return ModelParams(encoder=pairs[:-1], classifier=pairs[-1], seed=seed)


def _glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_out, fan_in))


def init_model(config: ModelConfig, rng: np.random.Generator, seed: int | None = None) -> ModelParams:
    config.validate()
    widths = config.widths
    encoder = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        encoder.append((_glorot(rng, fan_out, fan_in), np.zeros(fan_out)))
    classifier = (_glorot(rng, config.n_classes, config.bottleneck), np.zeros(config.n_classes))
    return ModelParams(encoder=encoder, classifier=classifier, seed=seed)


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]  # input to each encoder layer
    pre: list[np.ndarray]  # pre-activation of each hidden layer
    z: np.ndarray


def forward_batch(params: ModelParams, xs: np.ndarray, keep_cache: bool = False):
    """Run the network on a ``(B, input_dim)`` batch.

    Returns ``(z, logits, probs)`` and, when ``keep_cache``, the cache needed by
    :func:`backward`.
    """
    h = np.asarray(xs, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != params.widths[0]:
        raise ValueError(f"expected inputs of shape (B, {params.widths[0]}), got {h.shape}")
    inputs, pre = [], []
    last = len(params.encoder) - 1
    for i, (w, b) in enumerate(params.encoder):
        inputs.append(h)
        a = h @ w.T + b
        if i < last:
            pre.append(a)
            h = relu(a)
        else:
            h = a
    z = h
    w_c, b_c = params.classifier
    logits = z @ w_c.T + b_c
    probs = softmax(logits)
    if keep_cache:
        return z, logits, probs, ForwardCache(inputs, pre, z)
    return z, logits, probs


def forward(params: ModelParams, x):
    """Single-sample forward: ``(z, logits, probs)`` as 1-D arrays."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("forward expects a single input vector")
    z, logits, probs = forward_batch(params, x[None, :])
    return z[0], logits[0], probs[0]


def predict_batch(params: ModelParams, xs) -> tuple[np.ndarray, np.ndarray]:
    """Features and probabilities for a nonempty batch, order preserved."""
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 2 or xs.shape[0] == 0:
        raise ValueError("empty batch")
    z, _, probs = forward_batch(params, xs)
    return z, probs


def backward(
    params: ModelParams,
    cache: ForwardCache,
    grad_logits: np.ndarray | None = None,
    grad_z: np.ndarray | None = None,
) -> ModelParams:
    """Gradients of a scalar loss w.r.t. every parameter.

    `grad_logits` and `grad_z` are the loss's partial derivatives w.r.t. the
    logits and the bottleneck features of the cached forward pass.
    """
    w_c, _ = params.classifier
    gz = np.zeros_like(cache.z) if grad_z is None else np.array(grad_z, dtype=np.float64)
    if grad_logits is not None:
        gw_c = grad_logits.T @ cache.z
        gb_c = grad_logits.sum(axis=0)
        gz = gz + grad_logits @ w_c
    else:
        gw_c = np.zeros_like(w_c)
        gb_c = np.zeros(w_c.shape[0])

    grads: list[tuple[np.ndarray, np.ndarray]] = []
    g = gz
    for i in range(len(params.encoder) - 1, -1, -1):
        w, _ = params.encoder[i]
        grads.append((g.T @ cache.inputs[i], g.sum(axis=0)))
        if i > 0:
            g = (g @ w) * (cache.pre[i - 1] > 0)
    grads.reverse()
    return ModelParams(encoder=grads, classifier=(gw_c, gb_c), seed=params.seed)


def ema_update(momentum_params: ModelParams, online_params: ModelParams, m: float) -> ModelParams:
    """``theta' <- m*theta' + (1-m)*theta`` for every parameter."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum coefficient must lie in [0, 1], got {m}")
    if not momentum_params.same_shape(online_params):
        raise ValueError("momentum and online parameter shapes differ")
    out = []
    for old, new in zip(momentum_params.arrays(), online_params.arrays()):
        mixed = m * old + (1.0 - m) * new
        # keep the result inside [old, new] despite rounding
        out.append(np.clip(mixed, np.minimum(old, new), np.maximum(old, new)))
    return _from_arrays(out, momentum_params.seed)


CHECKPOINT_FORMAT = "sfuda-checkpoint v1"


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    header = {
        "format": CHECKPOINT_FORMAT,
        "widths": list(params.widths),
        "bottleneck": params.widths[-1],
        "n_classes": params.n_classes,
        "seed": params.seed,
    }
    arrays = {f"p{i:02d}": a for i, a in enumerate(params.arrays())}
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header, sort_keys=True)), **arrays)


def load_checkpoint(path: str | Path) -> ModelParams:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unrecognised checkpoint format {header.get('format')!r}")
        keys = sorted(k for k in data.files if k.startswith("p"))
        arrays = [np.array(data[k], dtype=np.float64) for k in keys]
    params = _from_arrays(arrays, header.get("seed"))
    if list(params.widths) != header["widths"] or params.n_classes != header["n_classes"]:
        raise ValueError("checkpoint header does not match stored arrays")
    return params
