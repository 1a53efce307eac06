"""Per-purpose RNG seeds derived from one master seed.

seed(purpose, ids...) folds the master seed, a fixed purpose tag and any ids
through the SplitMix64 finalizer, one 64-bit word at a time.
"""

from __future__ import annotations

from dataclasses import dataclass

MASK64 = (1 << 64) - 1

TAGS = {
    "data": 1,
    "split": 2,
    "partition": 3,
    "attack": 4,
    "init": 5,
    "train": 6,
    "dp": 7,
    "local_split": 8,
}


def splitmix64(x: int) -> int:
    z = (x + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def hash64(*words: int) -> int:
    h = 0
    for w in words:
        h = splitmix64(h ^ (int(w) & MASK64))
    return h


@dataclass(frozen=True)
class SeedMap:
    master_seed: int

    def seed(self, purpose: str, *ids: int) -> int:
        return hash64(self.master_seed, TAGS[purpose], *ids)

    @property
    def data(self) -> int:
        return self.seed("data")

    @property
    def split(self) -> int:
        return self.seed("split")

    @property
    def partition(self) -> int:
        return self.seed("partition")

    @property
    def attack(self) -> int:
        return self.seed("attack")

    @property
    def init(self) -> int:
        return self.seed("init")

    def local_split(self, client_id: int) -> int:
        return self.seed("local_split", client_id)

    def train(self, client_id: int, round_idx: int) -> int:
        return self.seed("train", client_id, round_idx)

    def dp(self, client_id: int, round_idx: int) -> int:
        return self.seed("dp", client_id, round_idx)


def derive_seeds(master_seed: int) -> SeedMap:
    return SeedMap(int(master_seed))
