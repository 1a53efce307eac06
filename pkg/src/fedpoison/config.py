"""Experiment configuration: schema, defaults and TOML loading."""

from __future__ import annotations

import sys
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from fedpoison.errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

BUNDLED_DIR = Path(__file__).parent / "configs"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SyntheticConfig(_Section):
    n: int = Field(7326, ge=1)
    d: int = Field(76, ge=2)
    c: int = Field(11, ge=1)
    separation: float = Field(4.0, gt=0)


class DataConfig(_Section):
    source: Literal["synthetic", "csv", "cache"] = "synthetic"
    path: Optional[str] = None
    label_column: str = "Label"
    drop_columns: Optional[list[str]] = None
    train_fraction: float = Field(0.7, gt=0, lt=1)
    local_eval_fraction: float = Field(0.2, gt=0, lt=1)
    ship_data: bool = False
    synthetic: SyntheticConfig = SyntheticConfig()

    @model_validator(mode="after")
    def _path_needed(self):
        if self.source != "synthetic" and not self.path:
            raise ValueError(f"data.path is required for source {self.source!r}")
        return self


class PartitionConfig(_Section):
    method: Literal["iid", "dirichlet"] = "dirichlet"
    alpha: float = Field(0.5, gt=0)


class ModelConfig(_Section):
    hidden: int = Field(50, ge=1)
    dropout: float = Field(0.2, ge=0, lt=1)


class TrainingConfig(_Section):
    batch_size: int = Field(32, ge=1)
    patience: int = Field(10, ge=1)
    lr: float = Field(1e-3, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)


class AggregatorConfig(_Section):
    kind: Literal["fedavg", "median", "trimmed_mean", "krum"] = "fedavg"
    trim_k: int = Field(1, ge=0)
    krum_f: int = Field(1, ge=0)


class AttackConfig(_Section):
    enabled: bool = False
    victim_client_id: int = Field(2, ge=0)
    victim_fraction: float = Field(0.7, ge=0, le=1)
    n_targets: int = Field(6, ge=0)
    target_classes: Optional[list[int]] = None
    pooled_fraction: bool = False


class DPConfig(_Section):
    enabled: bool = False
    clip_norm: float = Field(1.0, gt=0)
    sigma: float = Field(0.0, ge=0)


class MetricsConfig(_Section):
    f1_average: Literal["macro", "weighted"] = "macro"


class ExperimentConfig(_Section):
    """Full declarative description of one run.

    Client ids are 0-based, so the default victim id 2 is the third client.
    """

    name: str = "experiment"
    master_seed: int = 0
    n_clients: int = Field(5, ge=1, le=64)
    rounds: int = Field(20, ge=1)
    epochs_per_round: int = Field(20, ge=0)
    timeout_s: float = Field(120.0, gt=0)
    data: DataConfig = DataConfig()
    partition: PartitionConfig = PartitionConfig()
    model: ModelConfig = ModelConfig()
    training: TrainingConfig = TrainingConfig()
    aggregator: AggregatorConfig = AggregatorConfig()
    attack: AttackConfig = AttackConfig()
    dp: DPConfig = DPConfig()
    metrics: MetricsConfig = MetricsConfig()

    @model_validator(mode="after")
    def _cross_checks(self):
        if self.attack.enabled and self.attack.victim_client_id >= self.n_clients:
            raise ValueError(
                f"attack.victim_client_id {self.attack.victim_client_id} is not a client "
                f"(n_clients={self.n_clients})"
            )
        agg = self.aggregator
        if agg.kind == "krum" and self.n_clients < agg.krum_f + 3:
            raise ValueError(f"krum with f={agg.krum_f} needs n_clients >= {agg.krum_f + 3}")
        if agg.kind == "trimmed_mean" and self.n_clients <= 2 * agg.trim_k:
            raise ValueError(f"trimmed_mean with k={agg.trim_k} needs n_clients > {2 * agg.trim_k}")
        return self

    def with_updates(self, **changes) -> "ExperimentConfig":
        """Copy with dotted-path overrides, e.g. ``with_updates(**{"attack.enabled": True})``."""
        data = self.model_dump()
        for key, value in changes.items():
            node = data
            *parents, leaf = key.split(".")
            for p in parents:
                node = node[p]
            node[leaf] = value
        return from_dict(data)


def from_dict(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def resolve_path(path) -> Path:
    """A config path, or the name of a bundled config (``clean_5c_synth``)."""
    p = Path(path)
    if p.is_file():
        return p
    bundled = BUNDLED_DIR / (p.stem + ".toml")
    if bundled.is_file():
        return bundled
    raise ConfigError(f"config file not found: {path}")


def load_config(path) -> ExperimentConfig:
    p = resolve_path(path)
    try:
        with open(p, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{p}: {exc}") from exc
    return from_dict(data)


def bundled_configs() -> list[str]:
    return sorted(f.stem for f in BUNDLED_DIR.glob("*.toml"))
