"""Run configuration: one JSON document, defaults for every field, flag overrides on top."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields, is_dataclass

from .counterfactual import CounterfactualConfig
from .data import FeatureSchema, default_schema
from .errors import ConfigError, EscimError
from .evaluation import ALPHA_GRID, THRESHOLD_GRID, ExperimentSettings
from .model import TrainConfig
from .objectives import ObjectiveKind, ObjectiveSpec, PropensityClip
from .simulator import ScmConfig


@dataclass(frozen=True)
class SimSection:
    n_samples: int = 200_000
    target_ctr: float = 0.04
    target_cvr_given_click: float = 0.05
    z_dim: int = 8
    z_weight_scale: float = 1.0
    shared_fraction: float = 0.5


@dataclass(frozen=True)
class DataSection:
    log_path: str | None = None  # default: <out_dir>/log.csv
    oracle_path: str | None = None  # default: <out_dir>/oracle.csv when present
    labels_path: str | None = None  # default: <out_dir>/labels_<method>.csv
    checkpoint_path: str | None = None  # default: <out_dir>/checkpoint_<objective>_s<seed>.bin
    test_fraction: float = 0.2
    val_fraction: float = 0.1
    downsample_ratio: int = 5  # non-clicks kept per click in training; 0 disables
    split_seed: int = 0


@dataclass(frozen=True)
class ObjectiveSection:
    kind: str = "escim"
    alpha: float = 0.1
    alpha_f: float = 0.1
    alpha_cf: float = 1e-4
    clip_epsilon: float = 0.05
    cf_weight_mode: str = "inverse_ctr"


@dataclass(frozen=True)
class TrainSection:
    tower_dims: tuple = (64, 32)
    embedding_std: float = 0.1
    batch_size: int = 512
    lr: float = 1e-4
    weight_decay: float = 1e-6
    l2: float = 1e-4
    dropout: float = 0.1
    epochs: int = 20
    patience: int = 3


@dataclass(frozen=True)
class CounterfactualSection:
    method: str = "max"
    lr: float = 1e-4
    batch_size: int = 256
    pretrain_epochs: int = 100
    pretrain_min_epochs: int = 10
    pretrain_patience: int = 10
    pretrain_val_fraction: float = 0.1
    pretrain_stop_metric: str = "auc"
    vae_epochs: int = 20
    beta_max: float = 0.2
    anneal_fraction: float = 0.2
    anchor_weight: float = 1.0
    n_z_draws: int = 1
    variant: str = "posterior"


@dataclass(frozen=True)
class SweepSection:
    kind: str = "threshold"
    threshold_grid: tuple = THRESHOLD_GRID
    alpha_grid: tuple = ALPHA_GRID


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    seeds: tuple = (0, 1, 2, 3, 4)
    out_dir: str = "runs"
    schema_path: str | None = None
    sim: SimSection = field(default_factory=SimSection)
    data: DataSection = field(default_factory=DataSection)
    objective: ObjectiveSection = field(default_factory=ObjectiveSection)
    train: TrainSection = field(default_factory=TrainSection)
    counterfactual: CounterfactualSection = field(default_factory=CounterfactualSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    # -- conversions into the library's own config types --

    def schema(self) -> FeatureSchema:
        return FeatureSchema.load(self.schema_path) if self.schema_path else default_schema()

    def scm_config(self) -> ScmConfig:
        s = self.sim
        return _checked(ScmConfig, schema=self.schema(), n_samples=s.n_samples, target_ctr=s.target_ctr,
                        target_cvr_given_click=s.target_cvr_given_click, z_dim=s.z_dim,
                        z_weight_scale=s.z_weight_scale, seed=self.seed, shared_fraction=s.shared_fraction)

    def objective_spec(self, kind=None) -> ObjectiveSpec:
        o = self.objective
        return _checked(ObjectiveSpec, kind=ObjectiveKind.parse(kind or o.kind), alpha=o.alpha, alpha_f=o.alpha_f,
                        alpha_cf=o.alpha_cf, clip=_checked(PropensityClip, epsilon=o.clip_epsilon),
                        cf_weight_mode=o.cf_weight_mode)

    def train_config(self, seed=None) -> TrainConfig:
        t = self.train
        return TrainConfig(lr=t.lr, weight_decay=t.weight_decay, l2=t.l2, dropout=t.dropout, batch_size=t.batch_size,
                           max_epochs=t.epochs, patience=t.patience, seed=self.seed if seed is None else seed)

    def counterfactual_config(self) -> CounterfactualConfig:
        c = self.counterfactual
        return _checked(CounterfactualConfig, hidden_dims=tuple(self.train.tower_dims),
                        encoder_dims=tuple(self.train.tower_dims), decoder_dims=tuple(self.train.tower_dims),
                        lr=c.lr, weight_decay=self.train.weight_decay, l2=self.train.l2, dropout=self.train.dropout,
                        batch_size=c.batch_size, pretrain_epochs=c.pretrain_epochs,
                        pretrain_min_epochs=c.pretrain_min_epochs, pretrain_patience=c.pretrain_patience,
                        pretrain_val_fraction=c.pretrain_val_fraction, pretrain_stop_metric=c.pretrain_stop_metric,
                        vae_epochs=c.vae_epochs, beta_max=c.beta_max, anneal_fraction=c.anneal_fraction,
                        anchor_weight=c.anchor_weight, n_z_draws=c.n_z_draws,
                        embedding_std=self.train.embedding_std, z_variant=c.variant)

    def settings(self) -> ExperimentSettings:
        if self.counterfactual.method not in ("max", "ratio"):
            raise ConfigError(f"counterfactual.method must be 'max' or 'ratio', got {self.counterfactual.method!r}")
        return ExperimentSettings(train=self.train_config(), objective=self.objective_spec(),
                                  counterfactual=self.counterfactual_config(), cf_method=self.counterfactual.method,
                                  tower_dims=tuple(self.train.tower_dims), embedding_std=self.train.embedding_std)

    def validate(self) -> "RunConfig":
        """Build every derived config once so bad values fail early as config errors."""
        self.scm_config()
        self.settings()
        if self.sweep.kind not in ("threshold", "alpha", "ablation"):
            raise ConfigError(f"sweep.kind must be threshold, alpha or ablation, got {self.sweep.kind!r}")
        if not self.seeds:
            raise ConfigError("seeds must be a nonempty list")
        return self

    def to_json(self) -> dict:
        return _to_plain(self)


def _checked(cls, **kwargs):
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (EscimError, ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def _to_plain(obj):
    if is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_to_plain(v) for v in obj]
    return obj


def _build(cls, doc, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where or 'config'} must be a JSON object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(doc) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in doc.items():
        f = known[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        path = f"{where}.{name}" if where else name
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, path)
        elif isinstance(default, tuple):
            if not isinstance(value, list):
                raise ConfigError(f"{path} must be a list")
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = _coerce(value, default, path)
    return cls(**kwargs)


def _coerce(value, default, path):
    if value is None or default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path} must be true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} must be a number")
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{path} must be a string")
    return value


def config_from_dict(doc: dict) -> RunConfig:
    return _build(RunConfig, doc, "").validate()


def load_config(path=None, **overrides) -> RunConfig:
    """Read a JSON config (or start from defaults) and apply non-None top-level overrides."""
    doc = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    doc = dict(doc)
    for key, value in overrides.items():
        if value is not None:
            doc[key] = value
    return config_from_dict(doc)
