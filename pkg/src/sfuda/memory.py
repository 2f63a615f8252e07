"""Feature/prediction bank for neighbour search and the temporal key queue.

Label histories are kept right-aligned (newest last) in fixed-width integer
rows padded with ``-1`` so that masks over a whole batch vectorise.
"""
from __future__ import annotations

from collections.abc import Iterable, Sequence

import numpy as np

from .numerics import l2_normalize

PAD = -1
SIMPLEX_ATOL = 1e-9


def _check_prob(p: np.ndarray) -> None:
    if p.ndim != 1 or np.any(~np.isfinite(p)) or np.any(p < -SIMPLEX_ATOL) or np.any(p > 1 + SIMPLEX_ATOL) \
            or abs(p.sum() - 1.0) > SIMPLEX_ATOL:
        raise ValueError("invalid probability vector")


class FeatureBank:
    """Per-sample store of unit-norm features and class probabilities.

    Capacity is fixed; when full, inserting an unseen id evicts the smallest id
    that has not been written during the current epoch (or the smallest id
    overall if every slot was refreshed this epoch).
    """

    def __init__(self, capacity: int, feature_dim: int, n_classes: int):
        if capacity < 1:
            raise ValueError("bank capacity must be positive")
        self.capacity = capacity
        self.feats = np.zeros((capacity, feature_dim))
        self.probs = np.zeros((capacity, n_classes))
        self.ids = np.full(capacity, -1, dtype=np.int64)
        self._slot: dict[int, int] = {}
        self._seen: set[int] = set()

    def __len__(self) -> int:
        return len(self._slot)

    def __contains__(self, sample_id: int) -> bool:
        return int(sample_id) in self._slot

    def new_epoch(self) -> None:
        self._seen.clear()

    def get(self, sample_id: int) -> tuple[np.ndarray, np.ndarray]:
        row = self._slot[int(sample_id)]
        return self.feats[row].copy(), self.probs[row].copy()

    def update(self, sample_id: int, z, p) -> None:
        sample_id = int(sample_id)
        p = np.asarray(p, dtype=np.float64)
        _check_prob(p)
        z = l2_normalize(z)
        row = self._slot.get(sample_id)
        if row is None:
            if len(self._slot) < self.capacity:
                row = len(self._slot)
            else:
                row = self._evict()
            self._slot[sample_id] = row
            self.ids[row] = sample_id
        self.feats[row] = z
        self.probs[row] = p
        self._seen.add(sample_id)

    def update_many(self, sample_ids: Iterable[int], zs, ps) -> None:
        for sid, z, p in zip(sample_ids, np.asarray(zs), np.asarray(ps)):
            self.update(sid, z, p)

    def _evict(self) -> int:
        unseen = [sid for sid in self._slot if sid not in self._seen]
        victim = min(unseen) if unseen else min(self._slot)
        row = self._slot.pop(victim)
        self.ids[row] = -1
        return row

    def knn_query(self, z, k: int, exclude_id: int | None = None) -> list[tuple[int, np.ndarray]]:
        """The `k` nearest stored entries by cosine distance, nearest first."""
        ids, probs = self.knn_query_batch(np.asarray(z, dtype=np.float64)[None, :], k,
                                          None if exclude_id is None else [exclude_id])
        return [(int(i), p) for i, p in zip(ids[0], probs[0])]

    def knn_query_batch(self, zs, k: int, exclude_ids: Sequence[int] | None = None):
        """Batched neighbour search.

        Returns ``(neighbour_ids (B, k), neighbour_probs (B, k, C))``. Ties in
        distance are broken by ascending sample id; each row's `exclude_ids`
        entry is never returned.
        """
        n = len(self._slot)
        zs = l2_normalize(np.atleast_2d(np.asarray(zs, dtype=np.float64)))
        feats, probs, ids = self.feats[:n], self.probs[:n], self.ids[:n]
        # elementwise product + row sum: identical stored features must tie exactly, which a BLAS matmul
        # does not guarantee
        cos = np.einsum("bp,mp->bmp", zs, feats).sum(axis=-1)
        dist = 1.0 - np.clip(cos, -1.0, 1.0)
        if exclude_ids is not None:
            excl = np.asarray(exclude_ids, dtype=np.int64)[:, None] == ids[None, :]
            available = n - excl.sum(axis=1)
            dist = np.where(excl, np.inf, dist)
        else:
            available = np.full(len(zs), n)
        if k < 1 or np.any(available < k):
            raise ValueError("bank underfilled")
        order = np.lexsort((np.broadcast_to(ids, dist.shape), dist), axis=-1)[:, :k]
        return ids[order], probs[order]


class LabelHistoryStore:
    """Ring buffer of the last `T` refined pseudo-labels per sample."""

    def __init__(self, sample_ids: Iterable[int], T: int, n_classes: int):
        if T < 1:
            raise ValueError("history length T must be >= 1")
        self.T = T
        self.n_classes = n_classes
        self._row = {int(s): i for i, s in enumerate(sample_ids)}
        self.hist = np.full((len(self._row), T), PAD, dtype=np.int64)

    def _check(self, labels: np.ndarray) -> None:
        if np.any((labels < 0) | (labels >= self.n_classes)):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")

    def append(self, sample_id: int, label: int) -> None:
        self.append_many([sample_id], [label])

    def append_many(self, sample_ids: Iterable[int], labels) -> None:
        labels = np.asarray(labels, dtype=np.int64)
        self._check(labels)
        rows = np.array([self._row[int(s)] for s in sample_ids], dtype=np.int64)
        self.hist[rows, :-1] = self.hist[rows, 1:]
        self.hist[rows, -1] = labels

    def get(self, sample_id: int) -> list[int]:
        row = self.hist[self._row[int(sample_id)]]
        return [int(v) for v in row if v != PAD]

    def matrix(self, sample_ids: Iterable[int]) -> np.ndarray:
        """Right-aligned, ``-1``-padded histories for a batch, shape ``(B, T)``."""
        rows = np.array([self._row[int(s)] for s in sample_ids], dtype=np.int64)
        return self.hist[rows].copy()

    def lengths(self) -> np.ndarray:
        return (self.hist != PAD).sum(axis=1)

    def latest(self, sample_ids: Iterable[int]) -> np.ndarray:
        return self.matrix(sample_ids)[:, -1]


def pad_history(history: Sequence[int], width: int) -> np.ndarray:
    history = list(history)[-width:] if width > 0 else []
    out = np.full(width, PAD, dtype=np.int64)
    if history:
        out[width - len(history):] = history
    return out


class TemporalQueue:
    """FIFO of unit-norm contrastive keys, each with a frozen label history."""

    def __init__(self, capacity: int, T: int, feature_dim: int):
        if capacity < 1:
            raise ValueError("queue capacity must be positive")
        if T < 1:
            raise ValueError("history length T must be >= 1")
        self.capacity = capacity
        self.T = T
        self.keys = np.zeros((0, feature_dim))
        self.snapshots = np.zeros((0, T), dtype=np.int64)
        self.pushed = 0
        self.evicted = 0

    def __len__(self) -> int:
        return len(self.keys)

    def push(self, keys, snapshots) -> None:
        """Append keys with their histories, dropping the oldest beyond capacity.

        `snapshots` is either a list of label lists (newest last) or an already
        padded ``(n, T)`` array; both are copied.
        """
        keys = np.asarray(keys, dtype=np.float64)
        if keys.size == 0:
            if len(snapshots):
                raise ValueError("keys and snapshots differ in length")
            return
        keys = np.atleast_2d(keys)
        if isinstance(snapshots, np.ndarray) and snapshots.ndim == 2:
            snaps = snapshots[:, -self.T:].astype(np.int64, copy=True)
            if snaps.shape[1] < self.T:
                snaps = np.hstack([np.full((len(snaps), self.T - snaps.shape[1]), PAD, dtype=np.int64), snaps])
        else:
            snaps = np.stack([pad_history(s, self.T) for s in snapshots]) if len(snapshots) else \
                np.zeros((0, self.T), dtype=np.int64)
        if len(keys) != len(snaps):
            raise ValueError("keys and snapshots differ in length")
        self.keys = np.vstack([self.keys, l2_normalize(keys)])
        self.snapshots = np.vstack([self.snapshots, snaps])
        self.pushed += len(keys)
        overflow = len(self.keys) - self.capacity
        if overflow > 0:
            self.keys = self.keys[overflow:]
            self.snapshots = self.snapshots[overflow:]
            self.evicted += overflow

    def history(self, j: int) -> list[int]:
        return [int(v) for v in self.snapshots[j] if v != PAD]


def exclusion_masks(query_histories: np.ndarray, snapshots: np.ndarray, rule: str = "aligned") -> np.ndarray:
    """Keep-mask ``(B, N)``: True where queue entry j stays a negative for query b.

    Both inputs are right-aligned padded history matrices of equal width.
    ``aligned``: drop j if the two histories agree at any epoch offset present
    in both. ``any``: drop j if the two label sets intersect at all.
    """
    q = np.asarray(query_histories, dtype=np.int64)
    s = np.asarray(snapshots, dtype=np.int64)
    if q.shape[1] != s.shape[1]:
        width = max(q.shape[1], s.shape[1])
        q = np.hstack([np.full((len(q), width - q.shape[1]), PAD, dtype=np.int64), q])
        s = np.hstack([np.full((len(s), width - s.shape[1]), PAD, dtype=np.int64), s])
    if rule == "aligned":
        qe, se = q[:, None, :], s[None, :, :]
        shared = (qe == se) & (qe != PAD) & (se != PAD)
        return ~shared.any(axis=2)
    if rule == "any":
        qe, se = q[:, None, :, None], s[None, :, None, :]
        shared = (qe == se) & (qe != PAD) & (se != PAD)
        return ~shared.any(axis=(2, 3))
    raise ValueError(f"unknown exclusion rule {rule!r}")


def exclusion_mask(query_history: Sequence[int], queue: TemporalQueue, rule: str = "aligned") -> np.ndarray:
    """Keep-mask over the queue for one query's label history (newest last)."""
    width = max(queue.T, len(query_history))
    q = pad_history(query_history, width)[None, :]
    return exclusion_masks(q, queue.snapshots, rule)[0]
