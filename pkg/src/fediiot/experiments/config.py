"""Experiment configuration: nested dataclasses loaded from YAML with unknown keys rejected."""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from ..fl import ConfigError, ConvergenceCriterion
from ..nn import OptimizerState
from ..simnet import NetConfig


class Scheme(str, enum.Enum):
    STANDALONE = "STANDALONE"
    STANDALONE_GAN = "STANDALONE_GAN"
    FL_NO_GAN = "FL_NO_GAN"
    FL_GAN = "FL_GAN"
    CENTRALIZED = "CENTRALIZED"


ALL_SCHEMES = tuple(Scheme)


@dataclass
class DatasetConfig:
    kind: str = "synthetic_images"  # synthetic_images | gaussian_mixture | csv
    n_total: int = 620
    k_classes: int = 3
    side: int = 16
    noise: float = 0.2
    contrast: float = 1.0
    components: list = field(default_factory=list)
    n_per_component: int = 250
    path: str | None = None
    n_features: int | None = None
    shape: list | None = None

    def validate(self) -> None:
        if self.kind not in ("synthetic_images", "gaussian_mixture", "csv"):
            raise ConfigError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "synthetic_images" and self.side < 11:
            # three valid 3x3 convolutions, the middle one strided, need 11 pixels
            raise ConfigError("synthetic image side must be >= 11 for the convolutional classifier")
        if self.kind == "csv" and (not self.path or not self.n_features):
            raise ConfigError("csv datasets need path and n_features")
        if self.kind == "gaussian_mixture" and not self.components:
            raise ConfigError("gaussian_mixture needs at least one component")


@dataclass
class PartitionConfig:
    kind: str = "iid"  # iid | dirichlet
    alpha: float = 0.5

    def validate(self) -> None:
        if self.kind not in ("iid", "dirichlet"):
            raise ConfigError(f"unknown partition kind {self.kind!r}")
        if self.alpha <= 0:
            raise ConfigError("partition alpha must be positive")


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def build(self) -> OptimizerState:
        try:
            return OptimizerState(kind=self.kind, lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


@dataclass
class FederationSettings:
    client_fraction: float = 1.0
    local_epochs: int = 1
    batch_size: int = 32
    aggregation: str = "sample_weighted"
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    workers: int = 1
    # off by default so every scheme trains for exactly `epochs`
    early_stop: bool = False
    loss_delta_tol: float = 1e-4
    patience: int = 3
    target_accuracy: float | None = None

    def convergence(self) -> ConvergenceCriterion | None:
        if not self.early_stop:
            return None
        return ConvergenceCriterion(self.loss_delta_tol, self.patience, self.target_accuracy)


@dataclass
class NetSettings:
    latency_base_ms: float = 0.0
    jitter_ms: float = 0.0
    drop_prob: float = 0.0
    deadline_ms: float | None = None

    def build(self, seed: int) -> NetConfig:
        try:
            return NetConfig(self.latency_base_ms, self.jitter_ms, self.drop_prob, self.deadline_ms, seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


@dataclass
class GanSettings:
    rounds: int = 100
    local_epochs: int = 1
    noise_dim: int = 16
    hidden: int = 128
    batch_size: int = 32
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    gen_ema: float = 0.0


@dataclass
class ExperimentConfig:
    schemes: list = field(default_factory=lambda: list(ALL_SCHEMES))
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    institutions: int = 5
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    test_fraction: float = 0.2
    federation: FederationSettings = field(default_factory=FederationSettings)
    net: NetSettings = field(default_factory=NetSettings)
    gan: GanSettings = field(default_factory=GanSettings)
    synth_n: int = 1500
    # how FL_GAN trains the classifier on augmented partitions: federated | centralized
    augmented_training: str = "federated"
    epochs: int = 200
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    output_dir: str = "runs/default"

    def __post_init__(self):
        try:
            self.schemes = [Scheme(s) for s in self.schemes]
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        self.seeds = [int(s) for s in self.seeds]

    def validate(self) -> "ExperimentConfig":
        if not self.schemes:
            raise ConfigError("at least one scheme is required")
        if self.institutions < 1:
            raise ConfigError("institutions must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.seeds or any(s < 0 for s in self.seeds):
            raise ConfigError("seeds must be a non-empty list of non-negative integers")
        if self.synth_n < 0 or self.gan.rounds < 0:
            raise ConfigError("synth_n and gan.rounds must be >= 0")
        if self.augmented_training not in ("federated", "centralized"):
            raise ConfigError("augmented_training must be 'federated' or 'centralized'")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie in (0, 1)")
        self.dataset.validate()
        self.partition.validate()
        self.net.build(0)
        self.federation.optimizer.build()
        return self

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["schemes"] = [s.value for s in self.schemes]
        return out


_NESTED = {
    ExperimentConfig: {
        "dataset": DatasetConfig, "partition": PartitionConfig, "federation": FederationSettings,
        "net": NetSettings, "gan": GanSettings,
    },
    FederationSettings: {"optimizer": OptimizerConfig},
}


def _type_ok(default: Any, value: Any) -> bool:
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, str):
        return isinstance(value, str)
    if default is None:
        return value is None or isinstance(value, (int, float, str, list)) and not isinstance(value, bool)
    return isinstance(value, list)  # list-valued fields use default factories


def _build(cls: type, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    defaults = {f.name: f.default for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        name = f"{where}.{key}".lstrip(".")
        sub = _NESTED.get(cls, {}).get(key)
        if sub:
            kwargs[key] = _build(sub, value, name)
            continue
        if not _type_ok(defaults[key], value):
            raise ConfigError(f"{name}: expected {type(defaults[key]).__name__}, got {value!r}")
        kwargs[key] = float(value) if isinstance(defaults[key], float) else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def config_from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data or {}, "").validate()


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(data or {})
