"""Synthetic source/target domain pairs and the weak/strong augmentations."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.datasets import make_moons

# centre of the noiseless two-moons shape produced by sklearn
_MOONS_CENTRE = np.array([0.5, 0.25])


@dataclass(frozen=True)
class DataConfig:
    n_classes: int = 2
    n_source: int = 600
    n_target: int = 600
    rotation: float = math.pi / 4
    translation: tuple[float, float] = (0.0, 0.0)
    target_noise: float = 0.0
    base_noise: float = 0.1
    blob_radius: float = 3.0
    blob_std: float = 0.5
    sigma_weak: float = 0.02
    # scaling and coordinate drop stay available but default off: in 2-D they move points across the
    # class boundary and adaptation degrades
    sigma_strong: float = 0.1
    scale_low: float = 1.0
    scale_high: float = 1.0
    drop_prob: float = 0.0

    def validate(self) -> None:
        c = self.n_classes
        if not 2 <= c <= 8:
            raise ValueError(f"n_classes must lie in [2, 8], got {c}")
        if self.n_source < 10 * c or self.n_target < 10 * c:
            raise ValueError(f"need at least {10 * c} source and target samples")
        if not 0.0 <= self.rotation < math.pi:
            raise ValueError("rotation must lie in [0, pi)")
        if len(self.translation) != 2:
            raise ValueError("translation must have two components")
        if min(self.target_noise, self.base_noise, self.sigma_weak, self.sigma_strong) < 0:
            raise ValueError("noise scales must be nonnegative")
        if self.sigma_strong <= self.sigma_weak and self.sigma_strong > 0:
            raise ValueError("strong augmentation noise must exceed weak augmentation noise")
        if not 0 < self.scale_low <= self.scale_high:
            raise ValueError("scale range must satisfy 0 < low <= high")
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ValueError("drop_prob must lie in [0, 1]")


@dataclass(frozen=True)
class Sample:
    x: np.ndarray
    true_label: int
    sample_id: int


@dataclass
class Domain:
    """A labelled sample set stored column-wise."""
    x: np.ndarray
    labels: np.ndarray
    ids: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.x[i].copy(), int(self.labels[i]), int(self.ids[i]))


@dataclass
class DomainPair:
    source: Domain
    target: Domain
    rotation: float
    translation: tuple[float, float]
    noise: float


def _class_counts(n: int, c: int) -> list[int]:
    base, extra = divmod(n, c)
    return [base + (1 if k < extra else 0) for k in range(c)]


def _base_samples(config: DataConfig, n: int, rng: np.random.Generator):
    counts = _class_counts(n, config.n_classes)
    if config.n_classes == 2:
        x, y = make_moons(
            n_samples=tuple(counts),
            noise=config.base_noise,
            shuffle=False,
            random_state=int(rng.integers(2**31 - 1)),
        )
        x = x - _MOONS_CENTRE
    else:
        angles = 2 * math.pi * np.arange(config.n_classes) / config.n_classes
        centres = config.blob_radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        y = np.repeat(np.arange(config.n_classes), counts)
        x = centres[y] + config.blob_std * rng.standard_normal((n, 2))
    order = rng.permutation(n)
    return x[order].astype(np.float64), y[order].astype(np.int64)


def rotation_matrix(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def generate_domain_pair(config: DataConfig, rng: np.random.Generator) -> DomainPair:
    """Source from the base generator; target = rotated, shifted, noisy draws.

    Source ids are ``0..n_source-1`` and target ids follow on, so ids are unique
    across the pair.
    """
    config.validate()
    xs, ys = _base_samples(config, config.n_source, rng)
    xt, yt = _base_samples(config, config.n_target, rng)
    xt = xt @ rotation_matrix(config.rotation).T + np.asarray(config.translation, dtype=np.float64)
    if config.target_noise > 0:
        xt = xt + config.target_noise * rng.standard_normal(xt.shape)
    source = Domain(xs, ys, np.arange(config.n_source))
    target = Domain(xt, yt, np.arange(config.n_source, config.n_source + config.n_target))
    return DomainPair(source, target, config.rotation, tuple(config.translation), config.target_noise)


def weak_augment(x, rng: np.random.Generator, sigma: float = 0.02) -> np.ndarray:
    """Additive isotropic Gaussian jitter; works on a vector or a batch."""
    x = np.asarray(x, dtype=np.float64)
    if sigma == 0:
        return x.copy()
    return x + sigma * rng.standard_normal(x.shape)


def strong_augment(
    x,
    rng: np.random.Generator,
    sigma: float = 0.15,
    scale_range: tuple[float, float] = (0.7, 1.3),
    drop_prob: float = 0.2,
) -> np.ndarray:
    """Random global rescale, Gaussian noise, then maybe zero one coordinate.

    Accepts a single vector or a ``(B, D)`` batch (independent draws per row).
    """
    x = np.asarray(x, dtype=np.float64)
    batch = np.atleast_2d(x)
    n, d = batch.shape
    scale = rng.uniform(scale_range[0], scale_range[1], size=(n, 1))
    out = batch * scale
    if sigma > 0:
        out = out + sigma * rng.standard_normal(out.shape)
    if drop_prob > 0:
        drop = rng.random(n) < drop_prob
        coord = rng.integers(d, size=n)
        out[drop, coord[drop]] = 0.0
    return out.reshape(x.shape)


def augment_weak(config: DataConfig, x, rng: np.random.Generator) -> np.ndarray:
    return weak_augment(x, rng, config.sigma_weak)


def augment_strong(config: DataConfig, x, rng: np.random.Generator) -> np.ndarray:
    return strong_augment(x, rng, config.sigma_strong, (config.scale_low, config.scale_high), config.drop_prob)


CSV_HEADER = "# sfuda-dataset v1"


def write_dataset_csv(pair: DomainPair, path: str | Path) -> int:
    rows = 0
    with open(path, "w", newline="") as fh:
        fh.write(CSV_HEADER + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id", "x0", "x1", "true_label", "split"])
        for split, dom in (("source", pair.source), ("target", pair.target)):
            for i in range(len(dom)):
                writer.writerow([int(dom.ids[i]), repr(float(dom.x[i, 0])), repr(float(dom.x[i, 1])),
                                 int(dom.labels[i]), split])
                rows += 1
    return rows
