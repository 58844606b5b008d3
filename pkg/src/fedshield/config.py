"""Experiment configuration: one declarative file drives all training phases.

The config is a tree of frozen-ish dataclasses, loaded from YAML or JSON.
Unknown keys are rejected and the whole tree is validated up front, before
any compute starts.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


@dataclass
class DatasetConfig:
    name: str = "cifar10"  # cifar10 | imagedir | synthetic
    path: str = ""
    image_size: int = 32
    channels: int = 3
    classes: list | None = None  # optional class subset (relabelled 0..k-1)
    max_train: int | None = None
    max_test: int | None = None
    val_fraction: float = 0.1
    augment: bool = True
    strict: bool = True  # fail on unreadable image files instead of skipping
    # synthetic generator knobs (ignored for on-disk datasets)
    synthetic_train: int = 2000
    synthetic_test: int = 500


@dataclass
class PartitionConfig:
    kind: str = "iid"  # iid | label_shard | dirichlet
    param: float = 0.5  # shards per client (label_shard) or concentration (dirichlet)


@dataclass
class ModelConfig:
    K: int = 3
    feature_dim: int = 128
    backbone: str = "small_resnet"  # small_resnet | resnet18
    backbone_blocks: int = 4
    backbone_width: int = 32
    head_hidden: int = 256
    attention_hidden: int = 64
    num_classes: int = 2
    shared_features: str = "expert0"  # expert0 | dedicated


@dataclass
class OptimConfig:
    lr: float = 0.02
    momentum: float = 0.9
    batch_size: int = 64
    clip_norm: float = 5.0  # 0 disables gradient clipping


@dataclass
class LossConfig:
    beta: float = 1e-4
    gamma: float = 0.01


@dataclass
class AttackConfig:
    norm: str = "linf"  # linf | l2
    eps: float = 0.015
    alpha: float = 0.007
    steps: int = 7
    random_start: bool = False


@dataclass
class MAEConfig:
    patch_size: int = 4
    mask_ratio: float = 0.75
    depth: int = 4
    dim: int = 192
    heads: int = 4
    decoder_depth: int = 2
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 64


@dataclass
class DetectorConfig:
    kappa: float = 0.05
    n_draws: int = 4
    masked_scoring: bool = True
    score_mask_ratio: float | None = None  # None = training mask ratio


@dataclass
class DiffusionConfig:
    T: int = 200
    beta1: float = 1e-4
    betaT: float = 0.02
    epochs: int = 50
    lr: float = 2e-3
    batch_size: int = 64
    base_channels: int = 64
    depth: int = 3  # number of down/up stages


@dataclass
class PurifyConfig:
    t_min: int = 10
    t_max: int = 50
    sigma_mode: str = "beta"  # beta | posterior
    recheck: bool = False  # experimental: re-score after purification


@dataclass
class FedConfig:
    n_clients: int = 10
    rounds: int = 20
    local_epochs: int = 15
    participation: float = 1.0
    aggregate_attention: bool = False
    defense_in_training: bool = False


@dataclass
class EvalConfig:
    batch_size: int = 64
    round_eval_samples: int = 256  # per-round monitoring subset; 0 disables
    eval_clients: int = 0  # clients included in final evaluation; 0 = all


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    mae: MAEConfig = field(default_factory=MAEConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    purify: PurifyConfig = field(default_factory=PurifyConfig)
    fed: FedConfig = field(default_factory=FedConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    out_dir: str = "runs/exp"
    sequential: bool = False

    def validate(self) -> "ExperimentConfig":
        _require(self.dataset.name in ("cifar10", "imagedir", "synthetic"),
                 "dataset.name", self.dataset.name)
        _require(self.dataset.image_size >= 4, "dataset.image_size", self.dataset.image_size)
        _require(self.dataset.channels in (1, 3), "dataset.channels", self.dataset.channels)
        _require(0.0 <= self.dataset.val_fraction < 1.0,
                 "dataset.val_fraction", self.dataset.val_fraction)
        _require(self.partition.kind in ("iid", "label_shard", "dirichlet"),
                 "partition.kind", self.partition.kind)
        _require(self.partition.param > 0, "partition.param", self.partition.param)
        _require(self.model.K >= 1, "model.K", self.model.K)
        _require(self.model.feature_dim >= 1, "model.feature_dim", self.model.feature_dim)
        _require(self.model.backbone in ("small_resnet", "resnet18"),
                 "model.backbone", self.model.backbone)
        _require(self.model.num_classes >= 2, "model.num_classes", self.model.num_classes)
        _require(self.model.shared_features in ("expert0", "dedicated"),
                 "model.shared_features", self.model.shared_features)
        _require(self.optim.lr > 0, "optim.lr", self.optim.lr)
        _require(self.optim.batch_size >= 1, "optim.batch_size", self.optim.batch_size)
        _require(self.loss.beta >= 0, "loss.beta", self.loss.beta)
        _require(self.attack.norm in ("linf", "l2"), "attack.norm", self.attack.norm)
        _require(self.attack.eps > 0, "attack.eps", self.attack.eps)
        _require(self.attack.alpha > 0, "attack.alpha", self.attack.alpha)
        _require(self.attack.steps >= 0, "attack.steps", self.attack.steps)
        _require(self.mae.patch_size >= 1, "mae.patch_size", self.mae.patch_size)
        _require(self.dataset.image_size % self.mae.patch_size == 0,
                 "mae.patch_size", self.mae.patch_size)
        _require(0.0 < self.mae.mask_ratio < 1.0, "mae.mask_ratio", self.mae.mask_ratio)
        _require(self.mae.dim % self.mae.heads == 0, "mae.heads", self.mae.heads)
        _require(0.0 < self.detector.kappa < 1.0, "detector.kappa", self.detector.kappa)
        _require(self.detector.n_draws >= 1, "detector.n_draws", self.detector.n_draws)
        _require(self.diffusion.T >= 2, "diffusion.T", self.diffusion.T)
        _require(0.0 < self.diffusion.beta1 < self.diffusion.betaT < 1.0,
                 "diffusion.beta1/betaT", (self.diffusion.beta1, self.diffusion.betaT))
        _require(1 <= self.purify.t_min <= self.purify.t_max <= self.diffusion.T,
                 "purify.t_min/t_max", (self.purify.t_min, self.purify.t_max))
        _require(self.purify.sigma_mode in ("beta", "posterior"),
                 "purify.sigma_mode", self.purify.sigma_mode)
        _require(self.fed.n_clients >= 1, "fed.n_clients", self.fed.n_clients)
        _require(self.fed.rounds >= 0, "fed.rounds", self.fed.rounds)
        _require(self.fed.local_epochs >= 0, "fed.local_epochs", self.fed.local_epochs)
        _require(0.0 < self.fed.participation <= 1.0,
                 "fed.participation", self.fed.participation)
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def content_hash(self) -> str:
        """Stable hash of the experiment-defining config (execution details
        like the output directory do not change results and are excluded)."""
        payload = self.to_dict()
        payload.pop("out_dir")
        payload.pop("sequential")
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def _require(cond: bool, key: str, value) -> None:
    if not cond:
        raise ConfigError(f"invalid value for {key}: {value!r}")


def _build_section(cls, data: dict, path: str):
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown config key: {path}.{key}")
        kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    fields = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
    kwargs = {}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"unknown config key: {key}")
        f = fields[key]
        if f.default_factory is not dataclasses.MISSING:
            if not isinstance(value, dict):
                raise ConfigError(f"config section {key} must be a mapping")
            kwargs[key] = _build_section(type(f.default_factory()), value, key)
        else:
            kwargs[key] = value
    return ExperimentConfig(**kwargs).validate()


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    if path.suffix in (".yaml", ".yml"):
        data = yaml.safe_load(text) or {}
    elif path.suffix == ".json":
        data = json.loads(text)
    else:
        raise ConfigError(f"unsupported config format: {path.suffix}")
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    return config_from_dict(data)


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True)
