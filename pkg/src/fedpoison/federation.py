"""Server-side aggregation rules and client-side DP noising.

Every aggregator first orders updates by ascending ``client_id`` so results
do not depend on arrival order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    params: np.ndarray
    n_samples: int = 1

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")


def _stack(updates) -> tuple[list[ClientUpdate], np.ndarray]:
    updates = sorted(updates, key=lambda u: u.client_id)
    if not updates:
        raise ValueError("no updates to aggregate")
    ids = [u.client_id for u in updates]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate client ids in {ids}")
    lengths = {np.asarray(u.params).size for u in updates}
    if len(lengths) != 1:
        raise ValueError(f"updates have mismatched lengths {sorted(lengths)}")
    stack = np.stack([np.asarray(u.params, dtype=np.float64).ravel() for u in updates])
    if not np.all(np.isfinite(stack)):
        raise ValueError("non-finite values in client updates")
    return updates, stack


def fedavg(updates) -> np.ndarray:
    """Sample-count weighted mean.

    Accumulated as offsets from the lowest-id update, so identical inputs
    come back bit-exact.
    """
    updates, stack = _stack(updates)
    weights = np.array([u.n_samples for u in updates], dtype=np.float64)
    weights /= weights.sum()
    ref = stack[0]
    acc = np.zeros_like(ref)
    for w, row in zip(weights, stack):
        acc += w * (row - ref)
    return ref + acc


def coordinate_median(updates) -> np.ndarray:
    _, stack = _stack(updates)
    return np.median(stack, axis=0)


def trimmed_mean(updates, k: int) -> np.ndarray:
    """Per coordinate, drop the ``k`` smallest and largest values and average the rest."""
    _, stack = _stack(updates)
    n = stack.shape[0]
    if k < 0:
        raise ValueError("k must be >= 0")
    if n <= 2 * k:
        raise ValueError(f"trimmed mean with k={k} needs more than {2 * k} updates, got {n}")
    ordered = np.sort(stack, axis=0)
    return ordered[k : n - k].mean(axis=0)


def krum_scores(stack: np.ndarray, f: int) -> np.ndarray:
    n = stack.shape[0]
    sq = np.empty((n, n))
    for i in range(n):
        sq[i] = np.sum((stack - stack[i]) ** 2, axis=1)
    m = n - f - 2
    scores = np.empty(n)
    for i in range(n):
        others = np.delete(sq[i], i)
        scores[i] = np.sort(others)[:m].sum()
    return scores


def krum(updates, f: int) -> tuple[np.ndarray, dict[int, float]]:
    """Pick the update closest (summed squared distance) to its n-f-2 nearest peers.

    Returns the chosen vector and each client's score. Ties go to the lowest id.
    """
    updates, stack = _stack(updates)
    n = stack.shape[0]
    if f < 0:
        raise ValueError("f must be >= 0")
    if n < f + 3:
        raise ValueError(f"krum with f={f} needs at least {f + 3} updates, got {n}")
    scores = krum_scores(stack, f)
    best = int(np.argmin(scores))
    return stack[best].copy(), {u.client_id: float(s) for u, s in zip(updates, scores)}


@dataclass(frozen=True)
class Aggregator:
    """``kind`` is one of fedavg, median, trimmed_mean, krum."""

    kind: str = "fedavg"
    trim_k: int = 1
    krum_f: int = 1

    KINDS = ("fedavg", "median", "trimmed_mean", "krum")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown aggregator {self.kind!r}; expected one of {self.KINDS}")
        if self.trim_k < 0 or self.krum_f < 0:
            raise ValueError("trim_k and krum_f must be >= 0")

    def __call__(self, updates) -> np.ndarray:
        if self.kind == "fedavg":
            return fedavg(updates)
        if self.kind == "median":
            return coordinate_median(updates)
        if self.kind == "trimmed_mean":
            return trimmed_mean(updates, self.trim_k)
        return krum(updates, self.krum_f)[0]


def dp_noise(update, clip_norm: float, sigma: float, rng) -> np.ndarray:
    """Clip to L2 norm ``clip_norm`` then add N(0, (sigma*clip_norm)^2) per coordinate."""
    update = np.asarray(update, dtype=np.float64)
    if clip_norm <= 0:
        raise ValueError("clip_norm must be > 0")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if not np.all(np.isfinite(update)):
        raise ValueError("update contains non-finite values")
    norm = float(np.linalg.norm(update))
    out = update * (clip_norm / norm) if norm > clip_norm else update.copy()
    if sigma > 0:
        out = out + rng.normal(0.0, sigma * clip_norm, size=out.shape)
    return out
