"""Label-flipping data poisoning for a single client's shard."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from fedpoison.data import Dataset

DEFAULT_VICTIM_FRACTION = 0.7
DEFAULT_N_TARGETS = 6


@dataclass(frozen=True)
class AttackSpec:
    """Parameters of the label-flipping attack.

    ``target_classes=None`` means "the ``n_targets`` most frequent classes of
    the shard being attacked" (ties go to the lower class id). With
    ``pooled_fraction`` the flip count is ``victim_fraction`` of all targeted
    rows together instead of per class.
    """

    victim_fraction: float = DEFAULT_VICTIM_FRACTION
    target_classes: tuple[int, ...] | None = None
    seed: int = 0
    enabled: bool = True
    n_targets: int = DEFAULT_N_TARGETS
    pooled_fraction: bool = False

    def __post_init__(self):
        if not 0.0 <= self.victim_fraction <= 1.0:
            raise ValueError("victim_fraction must be in [0, 1]")
        if self.n_targets < 0:
            raise ValueError("n_targets must be >= 0")

    def resolve_targets(self, shard: Dataset) -> list[int]:
        if self.target_classes is not None:
            targets = sorted(set(int(t) for t in self.target_classes))
            bad = [t for t in targets if not 0 <= t < shard.c]
            if bad:
                raise ValueError(f"target classes {bad} outside [0, {shard.c})")
            return targets
        counts = shard.class_counts()
        order = sorted(range(shard.c), key=lambda k: (-counts[k], k))
        return sorted(order[: self.n_targets])


@dataclass(frozen=True)
class Flip:
    index: int
    old: int
    new: int


def flip_count(fraction: float, n: int) -> int:
    """Round-half-up count of rows to flip."""
    return int(math.floor(fraction * n + 0.5))


def flip_labels(shard: Dataset, spec: AttackSpec) -> tuple[Dataset, list[Flip]]:
    """Reassign a fraction of the targeted classes' labels to other classes.

    Rows to flip are drawn uniformly without replacement; each gets a new
    label uniform over the ``c - 1`` classes other than its own. Features are
    never touched. The log is ordered by target class, then draw order.
    """
    if not spec.enabled or spec.victim_fraction == 0.0:
        return Dataset(shard.X, shard.y.copy(), shard.c, list(shard.feature_names)), []
    targets = spec.resolve_targets(shard)
    if targets and shard.c < 2:
        raise ValueError("label flipping needs at least 2 classes")
    rng = np.random.default_rng(spec.seed)
    y = shard.y.copy()

    if spec.pooled_fraction:
        pool = np.flatnonzero(np.isin(shard.y, targets))
        groups = [pool]
    else:
        groups = [np.flatnonzero(shard.y == t) for t in targets]

    log: list[Flip] = []
    for rows in groups:
        k = flip_count(spec.victim_fraction, rows.size)
        if k == 0:
            continue
        chosen = rng.choice(rows, size=k, replace=False)
        draws = rng.integers(0, shard.c - 1, size=k)
        for row, r in zip(chosen, draws):
            old = int(shard.y[row])
            new = int(r) + (1 if r >= old else 0)
            y[row] = new
            log.append(Flip(int(row), old, new))
    return Dataset(shard.X, y, shard.c, list(shard.feature_names)), log


def write_flip_log(flips, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "old", "new"])
        for f in flips:
            w.writerow([f.index, f.old, f.new])
