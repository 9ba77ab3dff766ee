"""Experiment configuration: YAML in, fully populated dataclasses out.

Validation collects every problem with its field path instead of stopping
at the first one. The parsed config always carries explicit defaults, so
``to_yaml`` of a validated config is self-describing.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from ..errors import ConfigError, ValidationError
from ..longtail_data import LongTailSpec
from ..loss_zoo import LOSS_KINDS, LossSpec, loss_label
from ..model_core import FINAL_FEATURE, BackboneSpec, normalize_insertion_points
from ..training import METHODS, DistillConfig, ScheduleConfig


@dataclass(frozen=True)
class DatasetConfig:
    """``synthetic`` draws a Gaussian mixture; ``subsample`` cuts a long tail out of a saved balanced split.

    ``seed: null`` means each run seed also seeds the data.
    """

    kind: str = "synthetic"
    num_classes: int = 10
    input_dim: int = 32
    max_count: int = 500
    imbalance_factor: float = 100.0
    class_separation: float = 3.0
    within_class_std: float = 1.0
    test_per_class: int = 100
    source: str | None = None
    test: str | None = None
    seed: int | None = None

    @property
    def longtail(self) -> LongTailSpec:
        return LongTailSpec(self.num_classes, self.max_count, self.imbalance_factor)

    @property
    def label(self) -> str:
        return f"IF={self.imbalance_factor:g}"


@dataclass(frozen=True)
class BackboneConfig:
    family: str = "mlp"
    input_shape: tuple | None = None
    widths: tuple = (64, 64, 64)
    activation: str = "relu"
    batch_norm: bool = False
    insertion_points: tuple = (FINAL_FEATURE,)
    per_dim_params: bool = False
    spatial_noise: str = "broadcast"

    def spec(self, input_dim: int) -> BackboneSpec:
        shape = self.input_shape if self.input_shape is not None else (input_dim,)
        return BackboneSpec(self.family, shape, self.widths, self.activation, self.batch_norm)


@dataclass(frozen=True)
class LossConfig:
    kind: str = "ce"
    gamma: float = 1.0
    beta: float = 0.999
    cb_base: str = "ce"

    def spec(self, counts) -> LossSpec:
        return LossSpec(self.kind, self.gamma, self.beta, tuple(int(c) for c in counts), self.cb_base)

    @property
    def label(self) -> str:
        return loss_label(self.kind, self.gamma, self.beta)


@dataclass(frozen=True)
class Stage1Config:
    epochs: int = 30
    period: int = 7
    lr: float = 0.05
    batch_size: int = 64
    optimizer: str = "sgd"
    momentum: float = 0.0
    weight_decay: float = 0.0

    def schedule(self, seed: int) -> ScheduleConfig:
        return ScheduleConfig(self.epochs, self.period, self.lr, self.batch_size, self.optimizer,
                              self.momentum, self.weight_decay, seed)


@dataclass(frozen=True)
class Stage2Config:
    method: str = "from_scratch"
    alpha: float = 1.0
    k: int = 10
    m: int = 10
    epochs: int = 30
    lr: float = 0.05
    batch_size: int = 64
    optimizer: str = "sgd"
    momentum: float = 0.0
    weight_decay: float = 0.0
    resample_noise: bool = True

    def schedule(self, seed: int) -> ScheduleConfig:
        return ScheduleConfig(max(self.epochs, 1), 1, self.lr, self.batch_size, self.optimizer,
                              self.momentum, self.weight_decay, seed)

    def distill(self, seed: int, method: str | None = None) -> DistillConfig:
        return DistillConfig(method or self.method, self.alpha, self.k, self.m, self.epochs,
                             self.resample_noise, seed)


@dataclass(frozen=True)
class EvalConfig:
    many_threshold: int = 100
    few_threshold: int = 20

    @property
    def thresholds(self) -> tuple:
        return (self.many_threshold, self.few_threshold)


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    seeds: tuple = (0, 1, 2)
    output_dir: str | None = None
    checkpoint_every: int = 0

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def with_seeds(self, seeds) -> "ExperimentConfig":
        return replace(self, seeds=tuple(int(s) for s in seeds))

    def with_insertion_points(self, points) -> "ExperimentConfig":
        return replace(self, backbone=replace(self.backbone, insertion_points=tuple(points)))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


_SECTIONS = {
    "dataset": DatasetConfig,
    "backbone": BackboneConfig,
    "loss": LossConfig,
    "stage1": Stage1Config,
    "stage2": Stage2Config,
    "evaluation": EvalConfig,
}

_SCHEDULE_NAMES = {"stage1": "ScheduleConfig", "stage2": "ScheduleConfig"}


def _coerce(value, annotation: str, path: str, errors: list):
    """Check ``value`` against a dataclass annotation string; returns the coerced value or None."""
    optional = "None" in annotation
    if value is None:
        if optional:
            return None
        errors.append(f"{path}: must not be null")
        return None
    base = annotation.replace(" | None", "").strip()
    if base == "bool":
        if isinstance(value, bool):
            return value
    elif base == "int":
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif base == "float":
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if isinstance(value, str):
            # YAML 1.1 reads "1.0e12" (no exponent sign) as a string
            try:
                return float(value)
            except ValueError:
                pass
    elif base == "str":
        if isinstance(value, str):
            return value
    elif base == "tuple":
        if isinstance(value, (list, tuple)):
            return tuple(value)
        if isinstance(value, (str, int)) and not isinstance(value, bool):
            return (value,)
    errors.append(f"{path}: expected {base}, got {value!r}")
    return None


def _section(cls, raw, path: str, errors: list):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        errors.append(f"{path}: expected a mapping, got {type(raw).__name__}")
        return cls()
    known = {f.name for f in fields(cls)}
    for key in raw:
        if key not in known:
            errors.append(f"{path}.{key}: unknown field")
    values = {}
    for f in fields(cls):
        if f.name in raw:
            v = _coerce(raw[f.name], f.type, f"{path}.{f.name}", errors)
            if v is not None or "None" in f.type:
                values[f.name] = v
    return cls(**values)


def _check(cond: bool, msg: str, errors: list):
    if not cond:
        errors.append(msg)


def _check_semantics(cfg: ExperimentConfig, errors: list):
    d = cfg.dataset
    _check(d.kind in ("synthetic", "subsample"), "dataset.kind: must be 'synthetic' or 'subsample'", errors)
    _check(d.num_classes >= 2, "dataset.num_classes: must be ≥ 2", errors)
    _check(d.max_count >= 1, "dataset.max_count: must be ≥ 1", errors)
    _check(d.imbalance_factor >= 1, "dataset.imbalance_factor: imbalance_factor must be ≥ 1", errors)
    _check(d.input_dim >= 1, "dataset.input_dim: must be ≥ 1", errors)
    _check(d.class_separation > 0, "dataset.class_separation: must be > 0", errors)
    _check(d.within_class_std > 0, "dataset.within_class_std: must be > 0", errors)
    _check(d.test_per_class >= 1, "dataset.test_per_class: must be ≥ 1", errors)
    if d.kind == "subsample":
        _check(d.source is not None, "dataset.source: required when dataset.kind is 'subsample'", errors)
        _check(d.test is not None, "dataset.test: required when dataset.kind is 'subsample'", errors)

    b = cfg.backbone
    try:
        spec = b.spec(d.input_dim)
    except (ValidationError, ValueError, TypeError) as exc:
        errors.append(f"backbone: {exc}")
        spec = None
    if spec is not None:
        try:
            normalize_insertion_points(b.insertion_points, spec.num_blocks)
        except ValidationError as exc:
            errors.append(f"backbone.insertion_points: {exc}")
    _check(b.spatial_noise in ("broadcast", "per_position"),
           "backbone.spatial_noise: must be 'broadcast' or 'per_position'", errors)

    lo = cfg.loss
    _check(lo.kind in LOSS_KINDS, f"loss.kind: must be one of {list(LOSS_KINDS)}", errors)
    _check(lo.gamma >= 0, "loss.gamma: must be ≥ 0", errors)
    _check(0 <= lo.beta < 1, "loss.beta: must lie in [0, 1)", errors)
    _check(lo.cb_base in ("ce", "focal"), "loss.cb_base: must be 'ce' or 'focal'", errors)

    for name in ("stage1", "stage2"):
        s = getattr(cfg, name)
        tag = f"{name} ({_SCHEDULE_NAMES[name]})"
        min_epochs = 1 if name == "stage1" else 0
        _check(s.epochs >= min_epochs, f"{tag}.epochs: must be ≥ {min_epochs}", errors)
        _check(s.lr >= 0, f"{tag}.lr: must be ≥ 0", errors)
        _check(s.batch_size >= 1, f"{tag}.batch_size: must be ≥ 1", errors)
        _check(s.optimizer in ("sgd", "adam"), f"{tag}.optimizer: must be 'sgd' or 'adam'", errors)
        _check(s.momentum >= 0, f"{tag}.momentum: must be ≥ 0", errors)
        _check(s.weight_decay >= 0, f"{tag}.weight_decay: must be ≥ 0", errors)
    _check(cfg.stage1.period >= 1, "stage1.period: ScheduleConfig.period must be ≥ 1", errors)

    s2 = cfg.stage2
    _check(s2.method in METHODS, f"stage2.method: DistillConfig.method must be one of {list(METHODS)}", errors)
    _check(s2.alpha >= 0, "stage2.alpha: DistillConfig.alpha must be ≥ 0", errors)
    _check(s2.k >= 1, "stage2.k: DistillConfig.k must be ≥ 1", errors)
    _check(s2.m >= 1, "stage2.m: DistillConfig.m must be ≥ 1", errors)
    if spec is not None and s2.method == "high_conf_kernels":
        _check(s2.k <= spec.feature_dim, f"stage2.k: must not exceed the feature dim {spec.feature_dim}", errors)

    e = cfg.evaluation
    _check(e.few_threshold <= e.many_threshold,
           "evaluation.few_threshold: must not exceed evaluation.many_threshold", errors)
    _check(len(cfg.seeds) > 0, "seeds: at least one seed is required", errors)
    _check(all(isinstance(s, int) and not isinstance(s, bool) for s in cfg.seeds), "seeds: must be integers", errors)
    _check(len(set(cfg.seeds)) == len(cfg.seeds), "seeds: duplicate seeds", errors)
    _check(cfg.checkpoint_every >= 0, "checkpoint_every: must be ≥ 0", errors)


def config_from_dict(raw) -> ExperimentConfig:
    """Build and validate; raises ``ConfigError`` listing every violation."""
    errors = []
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError([f"<root>: expected a mapping, got {type(raw).__name__}"])
    top = {f.name: f for f in fields(ExperimentConfig)}
    for key in raw:
        if key not in top:
            errors.append(f"{key}: unknown field")
    values = {}
    for name, cls in _SECTIONS.items():
        values[name] = _section(cls, raw.get(name), name, errors)
    for name in ("name", "seeds", "output_dir", "checkpoint_every"):
        if name in raw:
            v = _coerce(raw[name], top[name].type, name, errors)
            if v is not None or "None" in top[name].type:
                values[name] = v
    cfg = ExperimentConfig(**values)
    _check_semantics(cfg, errors)
    if errors:
        raise ConfigError(errors)
    return cfg


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}:{mark.column + 1}" if mark is not None else source
        problem = getattr(exc, "problem", None) or str(exc)
        raise ConfigError([f"{where}: parse error: {problem}"]) from None
    return config_from_dict(raw)


def validate_config(path) -> ExperimentConfig:
    """Load ``path``; on any problem raise ``ConfigError`` whose ``errors`` lists them all."""
    path = Path(path)
    if not path.exists():
        raise ConfigError([f"{path}: file not found"])
    return parse_config(path.read_text(), str(path))
