"""Slow, obviously-correct reference implementations used by the tests."""
import numpy as np

from sfuda.numerics import cosine_distance


def brute_force_knn(entries: dict, z, k: int, exclude=None) -> list[int]:
    scored = [(cosine_distance(z, f), sid) for sid, f in entries.items() if sid != exclude]
    scored.sort()
    return [sid for _, sid in scored[:k]]


def brute_force_keep(query: list[int], snapshot: list[int]) -> bool:
    """True unless the two histories agree at some epoch, counting back from the newest."""
    for back in range(1, min(len(query), len(snapshot)) + 1):
        if query[-back] == snapshot[-back]:
            return False
    return True


def mean_vote(preds) -> list[float]:
    preds = [list(map(float, p)) for p in preds]
    return [sum(col) / len(preds) for col in zip(*preds)]


def infonce(q, k_pos, negatives, tau) -> float:
    pos = np.exp(np.dot(q, k_pos) / tau)
    neg = sum(np.exp(np.dot(q, k) / tau) for k in negatives)
    return float(-np.log(pos / (pos + neg)))
