import csv
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedpoison.data import Dataset
from fedpoison.poisoning import AttackSpec, flip_count, flip_labels, write_flip_log


def _shard(labels, c, d=3, seed=0):
    y = np.asarray(labels, dtype=np.int64)
    X = np.random.default_rng(seed).normal(size=(y.size, d))
    return Dataset(X, y, c)


@st.composite
def shards_and_specs(draw):
    c = draw(st.integers(2, 11))
    labels = draw(st.lists(st.integers(0, c - 1), min_size=1, max_size=200))
    frac = draw(st.sampled_from([0.7, 0.0, 1.0, 0.5, 0.25, 0.33]))
    targets = draw(st.one_of(st.none(), st.sets(st.integers(0, c - 1), max_size=c).map(tuple)))
    seed = draw(st.integers(0, 2**32 - 1))
    return _shard(labels, c, seed=seed % 1000), AttackSpec(frac, targets, seed)


def test_flip_count_round_half_up():
    assert flip_count(0.7, 10) == 7
    assert flip_count(0.5, 3) == 2
    assert flip_count(0.7, 5) == 4  # 3.5 rounds up
    assert flip_count(0.0, 100) == 0
    assert flip_count(1.0, 40) == 40


def test_zero_fraction_is_identity():
    shard = _shard(np.arange(30) % 3, 3)
    out, log = flip_labels(shard, AttackSpec(0.0, seed=1))
    assert np.array_equal(out.y, shard.y) and log == []


def test_disabled_is_identity():
    shard = _shard(np.arange(30) % 3, 3)
    out, log = flip_labels(shard, AttackSpec(0.7, seed=1, enabled=False))
    assert np.array_equal(out.y, shard.y) and log == []


def test_full_fraction_flips_every_target():
    shard = _shard([3] * 40 + [0] * 10, 5)
    out, log = flip_labels(shard, AttackSpec(1.0, (3,), seed=2))
    assert len(log) == 40
    assert not np.any(out.y == 3)
    assert np.all(out.y[40:] == 0)


def test_six_of_eleven_classes():
    shard = _shard(np.repeat(np.arange(11), 10), 11)
    out, log = flip_labels(shard, AttackSpec(0.7, (0, 1, 2, 3, 4, 5), seed=5))
    assert len(log) == 42
    per_class = Counter(f.old for f in log)
    assert per_class == {t: 7 for t in range(6)}


def test_default_targets_are_most_frequent():
    counts = [5, 50, 10, 40, 30, 20, 60, 1, 2, 3, 45]
    shard = _shard(np.repeat(np.arange(11), counts), 11)
    assert AttackSpec().resolve_targets(shard) == [1, 3, 4, 5, 6, 10]


def test_default_targets_ties_go_to_lower_id():
    shard = _shard(np.repeat(np.arange(4), [5, 5, 5, 5]), 4)
    assert AttackSpec(n_targets=2).resolve_targets(shard) == [0, 1]


def test_pooled_fraction_total():
    shard = _shard(np.repeat(np.arange(3), [5, 5, 10]), 3)
    _, log = flip_labels(shard, AttackSpec(0.7, (0, 1), seed=0, pooled_fraction=True))
    assert len(log) == 7


def test_errors():
    with pytest.raises(ValueError):
        AttackSpec(1.5)
    with pytest.raises(ValueError):
        flip_labels(_shard([0, 1], 2), AttackSpec(0.5, (2,)))
    with pytest.raises(ValueError):
        flip_labels(_shard([0, 0], 1), AttackSpec(0.5, (0,)))


@settings(max_examples=100)
@given(shards_and_specs())
def test_attack_exactness(case):
    shard, spec = case
    out, log = flip_labels(shard, spec)
    assert out.X.tobytes() == shard.X.tobytes()
    targets = spec.resolve_targets(shard)
    for t in targets:
        n_t = int((shard.y == t).sum())
        assert sum(1 for f in log if f.old == t) == math.floor(spec.victim_fraction * n_t + 0.5)
    flipped = {f.index for f in log}
    assert len(flipped) == len(log)
    for f in log:
        assert f.new != f.old and f.old in targets
        assert shard.y[f.index] == f.old and out.y[f.index] == f.new
    untouched = np.setdiff1d(np.arange(shard.n), list(flipped))
    assert np.array_equal(out.y[untouched], shard.y[untouched])


def test_deterministic():
    shard = _shard(np.arange(200) % 11, 11)
    a = flip_labels(shard, AttackSpec(seed=77))
    b = flip_labels(shard, AttackSpec(seed=77))
    assert a[1] == b[1] and np.array_equal(a[0].y, b[0].y)


def test_new_label_uniform_over_other_classes():
    c = 11
    shard = _shard([4] * 20, c)
    counts = Counter()
    for seed in range(1000):
        _, log = flip_labels(shard, AttackSpec(0.05, (4,), seed=seed))
        counts.update(f.new for f in log)
    total = sum(counts.values())
    assert 4 not in counts
    for k in range(c):
        if k != 4:
            assert abs(counts[k] / total - 1 / (c - 1)) <= 0.05


def test_write_flip_log(tmp_path):
    shard = _shard(np.arange(30) % 3, 3)
    _, log = flip_labels(shard, AttackSpec(0.7, (1,), seed=3))
    p = tmp_path / "flips.csv"
    write_flip_log(log, p)
    rows = list(csv.reader(p.open()))
    assert rows[0] == ["index", "old", "new"]
    assert [(int(a), int(b), int(c)) for a, b, c in rows[1:]] == [(f.index, f.old, f.new) for f in log]
