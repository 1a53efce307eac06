"""Federated round loop shared by simulation and wire modes.

The data pipeline is: load -> encode/clean -> stratified train/test split ->
standardize with train statistics -> partition train rows among clients ->
(victim only) flip labels on the whole shard -> per-client train/eval holdout.
Clients measure the received global model on their eval split before training,
so every client's row in a round describes the same shared model.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from fedpoison import data as data_mod
from fedpoison.config import ExperimentConfig
from fedpoison.data import Dataset, PartitionPlan, Standardizer
from fedpoison.errors import DataError
from fedpoison.federation import Aggregator, ClientUpdate, dp_noise
from fedpoison.metrics import f1_score
from fedpoison.model import AdamState, ParamSet, Schedule, evaluate, init_params, train_local
from fedpoison.poisoning import AttackSpec, Flip, flip_labels
from fedpoison.seeds import SeedMap, derive_seeds

log = logging.getLogger(__name__)


@dataclass
class ClientMetrics:
    client_id: int
    loss: float
    accuracy: float
    f1: float
    n_samples: int
    epochs_run: int


@dataclass
class RoundRecord:
    round_idx: int
    clients: list[ClientMetrics]
    test_loss: float
    test_accuracy: float
    test_f1: float

    def client(self, client_id: int) -> ClientMetrics:
        for m in self.clients:
            if m.client_id == client_id:
                return m
        raise KeyError(client_id)


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    rounds: list[RoundRecord]
    final_params: ParamSet | None
    flip_log: list[Flip] = field(default_factory=list)
    initial: tuple[float, float, float] | None = None
    complete: bool = True
    incomplete_round: int | None = None
    wall_time: float = 0.0
    mode: str = "simulation"

    @property
    def final(self) -> RoundRecord:
        return self.rounds[-1]


@dataclass
class Prepared:
    """Server-side view of the data after splitting and partitioning.

    ``dataset`` is the full standardized table; ``shards`` hold row ids into it.
    """

    dataset: Dataset
    train_rows: np.ndarray
    test_rows: np.ndarray
    standardizer: Standardizer
    plan: PartitionPlan
    shards: list[np.ndarray]

    @property
    def test(self) -> Dataset:
        return self.dataset.subset(self.test_rows)


@dataclass
class ClientState:
    client_id: int
    train: Dataset
    eval: Dataset
    shard_rows: np.ndarray
    train_rows: np.ndarray
    eval_rows: np.ndarray
    optimizer: AdamState | None = None


def load_dataset(config: ExperimentConfig, seeds: SeedMap) -> Dataset:
    """Unstandardized dataset named by ``config.data``."""
    dc = config.data
    if dc.source == "synthetic":
        s = dc.synthetic
        return data_mod.make_synthetic(s.n, s.d, s.c, s.separation, seed=seeds.data)
    if dc.source == "cache":
        return data_mod.load_cache(dc.path)
    raw = data_mod.read_csv(dc.path)
    drop = dc.drop_columns if dc.drop_columns is not None else data_mod.DEFAULT_DROP_COLUMNS
    return data_mod.preprocess(raw, dc.label_column, drop, standardize=False).dataset


def prepare(config: ExperimentConfig, seeds: SeedMap | None = None, dataset: Dataset | None = None) -> Prepared:
    seeds = seeds or derive_seeds(config.master_seed)
    try:
        raw = dataset if dataset is not None else load_dataset(config, seeds)
        train_rows, test_rows = data_mod.split_indices(raw.y, config.data.train_fraction, seeds.split)
        if train_rows.size == 0 or test_rows.size == 0:
            raise DataError("train/test split left one side empty")
        std = Standardizer.fit(raw.X[train_rows])
        full = std.transform(raw)
        if config.n_clients == 1:
            plan = PartitionPlan([np.arange(train_rows.size)], "single", None, seeds.partition)
        else:
            plan = data_mod.partition(
                full.y[train_rows], config.n_clients, config.partition.method,
                config.partition.alpha, seeds.partition,
            )
    except (DataError, ValueError) as exc:
        raise DataError(f"[{config.name}] {exc}") from exc
    shards = [train_rows[s] for s in plan.client_shards]
    return Prepared(full, train_rows, test_rows, std, plan, shards)


def attack_spec(config: ExperimentConfig, seeds: SeedMap) -> AttackSpec:
    a = config.attack
    return AttackSpec(
        victim_fraction=a.victim_fraction,
        target_classes=tuple(a.target_classes) if a.target_classes is not None else None,
        seed=seeds.attack,
        enabled=a.enabled,
        n_targets=a.n_targets,
        pooled_fraction=a.pooled_fraction,
    )


def _local_holdout(y, eval_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    n = y.size
    if n == 1:
        return np.zeros(1, np.int64), np.zeros(1, np.int64)
    tr, ev = data_mod.split_indices(y, 1.0 - eval_fraction, seed)
    if ev.size == 0:
        # only singleton classes: hold out the last training row
        tr, ev = tr[:-1], tr[-1:]
    return tr, ev


def setup_client(
    client_id: int,
    shard: Dataset,
    shard_rows,
    config: ExperimentConfig,
    seeds: SeedMap,
) -> tuple[ClientState, list[Flip]]:
    """Build a client's local state; the victim's shard is poisoned here.

    Flip indices are translated from shard positions to dataset row ids.
    """
    shard_rows = np.asarray(shard_rows, dtype=np.int64)
    flips: list[Flip] = []
    if config.attack.enabled and client_id == config.attack.victim_client_id:
        shard, local = flip_labels(shard, attack_spec(config, seeds))
        flips = [Flip(int(shard_rows[f.index]), f.old, f.new) for f in local]
    tr, ev = _local_holdout(shard.y, config.data.local_eval_fraction, seeds.local_split(client_id))
    state = ClientState(
        client_id, shard.subset(tr), shard.subset(ev), shard_rows, shard_rows[tr], shard_rows[ev]
    )
    return state, flips


def schedule_for(config: ExperimentConfig) -> Schedule:
    return Schedule(
        max_epochs=config.epochs_per_round,
        batch_size=config.training.batch_size,
        patience=config.training.patience,
        dropout_rate=config.model.dropout,
    )


def client_round(
    client: ClientState, global_params: ParamSet, config: ExperimentConfig, seeds: SeedMap, round_idx: int
) -> tuple[ClientUpdate, ClientMetrics]:
    """One client's work for a round. Mutates only ``client.optimizer``."""
    loss, acc, preds = evaluate(global_params, client.eval)
    f1 = f1_score(preds, client.eval.y, client.eval.c, config.metrics.f1_average)

    tc = config.training
    if client.optimizer is None:
        client.optimizer = AdamState.fresh(global_params.flat.size, tc.lr, tc.beta1, tc.beta2, tc.eps)
    trained, report = train_local(
        global_params, client.train, client.eval, schedule_for(config),
        seed=seeds.train(client.client_id, round_idx), optimizer=client.optimizer,
    )
    client.optimizer = report.optimizer

    vec = trained.flatten()
    if config.dp.enabled:
        # noise the change the client made, not the absolute weights
        rng = np.random.default_rng(seeds.dp(client.client_id, round_idx))
        delta = dp_noise(vec - global_params.flat, config.dp.clip_norm, config.dp.sigma, rng)
        vec = global_params.flat + delta
    n = int(client.train.n)
    update = ClientUpdate(client.client_id, vec, n)
    metrics = ClientMetrics(client.client_id, loss, acc, f1, n, report.epochs_run)
    return update, metrics


def aggregator_for(config: ExperimentConfig) -> Aggregator:
    a = config.aggregator
    return Aggregator(a.kind, a.trim_k, a.krum_f)


def finish_round(
    updates, metrics, global_params: ParamSet, config: ExperimentConfig, round_idx: int, test_set: Dataset
) -> tuple[ParamSet, RoundRecord]:
    """Server half of a round: aggregate, then score the new model on the test split."""
    updates = sorted(updates, key=lambda u: u.client_id)
    new_global = ParamSet(aggregator_for(config)(updates), global_params.dims)
    loss, acc, preds = evaluate(new_global, test_set)
    f1 = f1_score(preds, test_set.y, test_set.c, config.metrics.f1_average)
    record = RoundRecord(round_idx, sorted(metrics, key=lambda m: m.client_id), loss, acc, f1)
    return new_global, record


def run_round(
    global_params: ParamSet,
    clients: list[ClientState],
    config: ExperimentConfig,
    round_idx: int,
    *,
    test_set: Dataset,
    seeds: SeedMap | None = None,
    workers: int = 1,
) -> tuple[ParamSet, RoundRecord]:
    seeds = seeds or derive_seeds(config.master_seed)

    def work(client):
        try:
            return client_round(client, global_params, config, seeds, round_idx)
        except Exception as exc:
            raise RuntimeError(f"client {client.client_id} failed in round {round_idx}: {exc}") from exc

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, clients))
    else:
        results = [work(c) for c in clients]
    updates = [u for u, _ in results]
    metrics = [m for _, m in results]
    return finish_round(updates, metrics, global_params, config, round_idx, test_set)


def model_dims(config: ExperimentConfig, dataset: Dataset) -> tuple[int, int, int]:
    return dataset.d, config.model.hidden, dataset.c


def run_experiment(config: ExperimentConfig, workers: int = 1, dataset: Dataset | None = None) -> ExperimentReport:
    """Run every round in-process. Deterministic given ``config``."""
    start = time.perf_counter()
    seeds = derive_seeds(config.master_seed)
    prep = prepare(config, seeds, dataset)
    clients: list[ClientState] = []
    flips: list[Flip] = []
    for cid, rows in enumerate(prep.shards):
        state, f = setup_client(cid, prep.dataset.subset(rows), rows, config, seeds)
        clients.append(state)
        flips.extend(f)
    test = prep.test
    global_params = init_params(model_dims(config, prep.dataset), seeds.init)
    loss, acc, preds = evaluate(global_params, test)
    initial = (loss, acc, f1_score(preds, test.y, test.c, config.metrics.f1_average))

    records = []
    for r in range(1, config.rounds + 1):
        global_params, record = run_round(
            global_params, clients, config, r, test_set=test, seeds=seeds, workers=workers
        )
        records.append(record)
        log.info("round %d: test acc %.4f loss %.4f f1 %.4f", r, record.test_accuracy, record.test_loss, record.test_f1)
    return ExperimentReport(
        config, records, global_params, flips, initial, wall_time=time.perf_counter() - start
    )
