"""YAML run configuration with explicit defaults for every stage.

A single file may carry any subset of the sections below; anything omitted
takes the default shown here.  Unknown keys are rejected so typos fail loudly.

    seed: 0
    data:        synthetic task (generate_synthetic arguments)
    partition:   client layout (PartitionSpec without its seed)
    model:       encoder / head sizes
    pretrain:    encoder pre-training plus optional hyperparameter variants
    federation:  FederationConfig without algorithm and seed
    experiment:  method rows, trial count, optional sweep grid
"""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .datagen import PartitionSpec
from .federation import FederationConfig
from .nn import ArchConfig
from .pretrain import PretrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    num_classes: int = 10
    dim: int = 256
    per_class: int = 2000
    separation: float = 2.0
    noise: float = 1.0
    modes_per_class: int = 4
    latent_dim: int | None = 8
    unlabeled: int = 20000
    shift: float = 0.0
    # linear-evaluation proxy: per-class cap on samples no client received
    proxy_per_class: int = 100


@dataclass
class PartitionConfig:
    num_clients: int = 60
    num_groups: int = 3
    classes_per_client: int = 4
    major_count: int = 20
    minor_count: int = 5
    majors_per_client: int = 2
    test_per_class: int = 20


@dataclass
class ModelConfig:
    encoder_widths: list[int] = field(default_factory=lambda: [128, 64])
    rep_dim: int = 32
    head: str = "c"
    head_width: int | None = None


@dataclass
class PretrainSection:
    # simclr | byol | simsiam | supervised
    method: str = "simclr"
    epochs: int = 30
    batch_size: int = 128
    lr: float = 1e-3
    temperature: float | None = None
    beta: float | None = None
    proj_dim: int | None = None
    augment: dict = field(default_factory=dict)
    # each entry overrides some of the fields above; the best linear probe wins
    variants: list[dict] = field(default_factory=list)
    probe_epochs: int = 50
    probe_lr: float = 1e-2


@dataclass
class FederationSection:
    num_clusters: int = 3
    rounds: int = 100
    explore_rounds: int = 10
    local_epochs: int = 3
    encoder_epochs: int | None = None
    lr: float = 1e-2
    batch_size: int = 32
    participation: float = 1.0
    global_encoder: bool = False
    max_restarts: int = 3
    failure_window: int = 5
    eval_every: int = 10
    checkpoint_every: int = 0


DEFAULT_METHODS = ["fedavg(none)", "fedavg(simclr)", "ifca(none)", "ifca(fedavg)", "cpcfl(simclr)"]


@dataclass
class ExperimentSection:
    name: str = "experiment"
    trials: int = 1
    methods: list[str] = field(default_factory=lambda: list(DEFAULT_METHODS))
    # "section.key" -> list of values; the full method table runs per grid point
    sweep: dict = field(default_factory=dict)
    jobs: int = 1


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    federation: FederationSection = field(default_factory=FederationSection)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)

    # ---- derived stage configs
    def arch(self, seed: int) -> ArchConfig:
        m = self.model
        return ArchConfig(
            input_dim=self.data.dim, num_classes=self.data.num_classes,
            encoder_widths=list(m.encoder_widths), rep_dim=m.rep_dim,
            head=m.head, head_width=m.head_width, seed=seed,
        )

    def partition_spec(self, seed: int) -> PartitionSpec:
        return PartitionSpec(**asdict(self.partition), seed=seed)

    def pretrain_config(self, method: str, seed: int, overrides: dict | None = None) -> PretrainConfig:
        sec = replace(self.pretrain, **(overrides or {}))
        kw = dict(
            epochs=sec.epochs, batch_size=sec.batch_size, lr=sec.lr, proj_dim=sec.proj_dim,
            augment=dict(sec.augment), seed=seed,
        )
        if method == "simclr" and sec.temperature is not None:
            kw["temperature"] = sec.temperature
        if method == "byol" and sec.beta is not None:
            kw["beta"] = sec.beta
        return PretrainConfig.for_method(method, **kw)

    def federation_config(self, algorithm: str, seed: int) -> FederationConfig:
        sec = asdict(self.federation)
        if algorithm == "fedavg":
            sec["num_clusters"] = 1
        return FederationConfig(algorithm=algorithm, seed=seed, **sec)

    def with_override(self, dotted: str, value) -> "RunConfig":
        section, _, key = dotted.partition(".")
        out = copy.deepcopy(self)
        if not key:
            if section != "seed":
                raise ConfigError(f"sweep key {dotted!r} must look like section.key")
            out.seed = value
            return out
        target = getattr(out, section, None)
        if target is None or not dataclasses.is_dataclass(target) or key not in {f.name for f in fields(target)}:
            raise ConfigError(f"unknown sweep key {dotted!r}")
        setattr(target, key, value)
        return out

    def validate(self):
        try:
            self.arch(self.seed).validate()
            self.partition_spec(self.seed)
            if self.pretrain.method not in ("simclr", "byol", "simsiam", "supervised"):
                raise ValueError(f"unknown pre-training method {self.pretrain.method!r}")
            for ov in self.pretrain.variants or [{}]:
                unknown = set(ov) - {f.name for f in fields(PretrainSection)}
                if unknown:
                    raise ValueError(f"unknown pretrain variant keys {sorted(unknown)}")
                if self.pretrain.method != "supervised":
                    self.pretrain_config(self.pretrain.method, self.seed, ov)
            for alg in ("ifca", "cpcfl"):
                self.federation_config(alg, self.seed).validate()
            if self.experiment.trials < 1:
                raise ValueError("experiment.trials must be >= 1")
            if self.experiment.jobs < 1:
                raise ValueError("experiment.jobs must be >= 1")
            from .pipeline import parse_method

            for m in self.experiment.methods:
                parse_method(m)
            for key, values in self.experiment.sweep.items():
                if not isinstance(values, list) or not values:
                    raise ValueError(f"sweep {key!r} needs a nonempty list of values")
                self.with_override(key, values[0])
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def _build(cls, raw, where):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(raw).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for name, value in raw.items():
        sub = _SECTIONS.get(name) if cls is RunConfig else None
        kwargs[name] = _build(sub, value, f"{where}.{name}" if where else name) if sub else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


_SECTIONS = {
    "data": DataConfig,
    "partition": PartitionConfig,
    "model": ModelConfig,
    "pretrain": PretrainSection,
    "federation": FederationSection,
    "experiment": ExperimentSection,
}


def config_from_dict(raw: dict | None) -> RunConfig:
    return _build(RunConfig, raw or {}, "")


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(raw)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True, default_flow_style=False)
