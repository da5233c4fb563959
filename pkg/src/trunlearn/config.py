"""Run configuration: YAML schema, validation with field paths, hashing and seed derivation."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .dataset import BiasSpec
from .model import LossConfig, ModelSpec, TrainConfig
from .spectral import SpectralConfig
from .trsolver import TRConfig
from .unlearn import CertParams, CGConfig, ErrorBudget

SCHEMA_VERSION = 1
METHODS = ("newton", "damped", "tr")


class ConfigError(ValueError):
    """Validation failure; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class SyntheticSource:
    num_classes: int = 2
    dim: int = 2
    per_class: int = 100
    separation: float = 4.0
    test_per_class: int = 100


@dataclass(frozen=True)
class IdxSource:
    train_images: str
    train_labels: str
    test_images: str
    test_labels: str
    num_classes: int = 10


@dataclass(frozen=True)
class DatasetConfig:
    source: str  # "synthetic" | "idx"
    synthetic: SyntheticSource | None = None
    idx: IdxSource | None = None


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "logistic"
    hidden: tuple[int, ...] = ()
    activation: str = "tanh"


@dataclass(frozen=True)
class BiasConfig:
    bias_map: dict = field(default_factory=dict)
    deletion_count: int | None = None
    target_kl: float | None = None
    default_weight: float = 1.0


@dataclass(frozen=True)
class BaselineBoundConfig:
    C: float | str = "auto"  # "auto": ||w*||
    G: float = 1.0
    L: float | str = "auto"  # "auto": power-iteration ||∇²f_D(w*)||
    M: float = 1.0
    lambda_min: float = 0.0
    rho_b: float = 1.0


@dataclass(frozen=True)
class BaselineConfig:
    damping: float | None = None  # None: the loss damping
    cg_tol: float = 1e-8
    cg_max_iter: int = 1000
    bound: BaselineBoundConfig = BaselineBoundConfig()

    @property
    def cg(self) -> CGConfig:
        return CGConfig(self.cg_tol, self.cg_max_iter)


@dataclass(frozen=True)
class TRSettings:
    eta1: float = 0.1
    eta2: float = 0.9
    gamma_dec: float = 0.5
    gamma_inc: float = 2.0
    tau: float = 1.0
    delta0: float = 1.0
    max_iter: int = 10
    cg_max_iter: int = 250
    cg_tol: float | None = None
    kappa: float = 0.5
    max_rejections: int = 10
    grad_tol: float | None = None
    mu_method: str = "damping-floor"


@dataclass(frozen=True)
class MIASettings:
    class_matched: bool = True


@dataclass(frozen=True)
class SweepPoint:
    deletion_count: int | None = None
    target_kl: float | None = None
    iid: bool = False


@dataclass(frozen=True)
class SweepConfig:
    points: tuple[SweepPoint, ...] = ()
    seeds: tuple[int, ...] = (0,)
    timing_repeats: int = 1


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetConfig
    version: int = SCHEMA_VERSION
    seed: int = 0
    output_dir: str = "runs"
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    damping: float = 0.1
    bias: BiasConfig = BiasConfig()
    methods: tuple[str, ...] = ("tr",)
    tr: TRSettings = TRSettings()
    spectral: SpectralConfig = SpectralConfig()
    cert: CertParams = CertParams(1.0, 1e-3)
    budget: ErrorBudget = ErrorBudget()
    baseline: BaselineConfig = BaselineConfig()
    mia: MIASettings = MIASettings()
    sweep: SweepConfig = SweepConfig()

    @property
    def tr_config(self) -> TRConfig:
        kw = dataclasses.asdict(self.tr)
        kw.pop("mu_method")
        return TRConfig(**kw)

    def model_spec(self, input_dim: int, num_classes: int) -> ModelSpec:
        m = self.model
        if m.kind == "mlp":
            return ModelSpec("mlp", input_dim, num_classes, (input_dim, *m.hidden, num_classes), m.activation)
        return ModelSpec(m.kind, input_dim, num_classes, activation=m.activation)

    def loss_config(self, spec: ModelSpec) -> LossConfig:
        return LossConfig(spec, self.damping)

    def bias_spec(self, seed: int, deletion_count: int) -> BiasSpec:
        return BiasSpec(dict(self.bias.bias_map), deletion_count, seed, self.bias.default_weight)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def config_hash(self) -> str:
        """SHA-256 over every result-affecting field (output_dir excluded)."""
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def _plain(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, float) and math.isinf(obj):
        return "inf" if obj > 0 else "-inf"
    return obj


def derive_seed(master: int, label: str) -> int:
    """Sub-seed for a labelled stage, stable across runs and platforms."""
    digest = hashlib.sha256(f"{master}/{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


# ---------------------------------------------------------------- parsing

_SCALARS = {int: (int,), float: (int, float), str: (str,), bool: (bool,)}


def _coerce(value: Any, tp: Any, path: str) -> Any:
    origin = getattr(tp, "__origin__", None)
    args = getattr(tp, "__args__", ())
    if isinstance(tp, str):
        raise TypeError(f"unresolved annotation {tp!r}")
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, "expected a list")
        return tuple(_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value))
    if origin is dict or tp is dict:
        if not isinstance(value, Mapping):
            raise ConfigError(path, "expected a mapping")
        return dict(value)
    if args and type(None) in args:  # Optional / union
        if value is None:
            return None
        errors = []
        for a in args:
            if a is type(None):
                continue
            try:
                return _coerce(value, a, path)
            except ConfigError as exc:
                errors.append(exc)
        raise errors[0]
    if args:  # plain union such as float | str
        for a in args:
            try:
                return _coerce(value, a, path)
            except ConfigError:
                pass
        raise ConfigError(path, f"unexpected value {value!r}")
    if tp is float and isinstance(value, str) and value.lower() in ("inf", "infinity"):
        return math.inf
    if tp is str and value == "auto":
        return value
    if tp in _SCALARS:
        if isinstance(value, bool) and tp is not bool:
            raise ConfigError(path, f"expected {tp.__name__}, got a boolean")
        if not isinstance(value, _SCALARS[tp]):
            raise ConfigError(path, f"expected {tp.__name__}, got {type(value).__name__}")
        return tp(value)
    raise TypeError(f"unsupported annotation {tp!r} at {path}")


def _build(cls: type, raw: Any, path: str) -> Any:
    if not isinstance(raw, Mapping):
        raise ConfigError(path, "expected a mapping")
    import typing
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        key = sorted(map(str, unknown))[0]
        raise ConfigError(f"{path}.{key}" if path else key, "unknown field")
    kwargs = {}
    for f in dataclasses.fields(cls):
        sub = f"{path}.{f.name}" if path else f.name
        if f.name in raw:
            kwargs[f.name] = _coerce(raw[f.name], hints[f.name], sub)
        elif f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
            raise ConfigError(sub, "required field missing")
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(path or "<root>", str(exc)) from None


def parse_config(raw: Mapping, base_dir: Path | None = None, check_files: bool = True) -> RunConfig:
    """Validate a raw mapping into a RunConfig before any compute happens."""
    cfg = _build(RunConfig, raw, "")
    if cfg.version != SCHEMA_VERSION:
        raise ConfigError("version", f"unsupported schema version {cfg.version}")
    ds = cfg.dataset
    if ds.source == "synthetic":
        if ds.synthetic is None:
            cfg = dataclasses.replace(cfg, dataset=DatasetConfig("synthetic", SyntheticSource()))
    elif ds.source == "idx":
        if ds.idx is None:
            raise ConfigError("dataset.idx", "required when source is idx")
        resolved = {}
        for name in ("train_images", "train_labels", "test_images", "test_labels"):
            p = Path(getattr(ds.idx, name))
            if not p.is_absolute() and base_dir is not None:
                p = base_dir / p
            if check_files and not p.exists():
                raise ConfigError(f"dataset.idx.{name}", f"file not found: {p}")
            resolved[name] = str(p)
        cfg = dataclasses.replace(cfg, dataset=DatasetConfig(
            "idx", idx=dataclasses.replace(ds.idx, **resolved)))
    else:
        raise ConfigError("dataset.source", "must be 'synthetic' or 'idx'")
    if cfg.model.kind not in ("logistic", "mlp", "linear-regression"):
        raise ConfigError("model.kind", f"unknown model kind {cfg.model.kind!r}")
    if cfg.model.activation not in ("tanh", "relu"):
        raise ConfigError("model.activation", "must be tanh or relu")
    if not cfg.methods:
        raise ConfigError("methods", "select at least one method")
    for i, m in enumerate(cfg.methods):
        if m not in METHODS:
            raise ConfigError(f"methods[{i}]", f"unknown method {m!r}")
    if cfg.damping < 0:
        raise ConfigError("damping", "must be >= 0")
    if "tr" in cfg.methods and not cfg.damping > 0:
        raise ConfigError("damping", "the tr method needs damping > 0")
    if cfg.tr.mu_method not in ("damping-floor", "smallest-eigenvalue-estimate"):
        raise ConfigError("tr.mu_method", "unknown curvature-floor method")
    try:
        cfg.tr_config
    except ValueError as exc:
        raise ConfigError("tr", str(exc)) from None
    for key, val in cfg.bias.bias_map.items():
        if not isinstance(key, int) or isinstance(val, bool) or not isinstance(val, (int, float)) or val < 0:
            raise ConfigError(f"bias.bias_map.{key}", "keys must be class ids and weights >= 0")
    for name in ("C", "L"):
        v = getattr(cfg.baseline.bound, name)
        if isinstance(v, str) and v != "auto":
            raise ConfigError(f"baseline.bound.{name}", "must be a number or 'auto'")
    for i, p in enumerate(cfg.sweep.points):
        if sum([p.deletion_count is not None, p.target_kl is not None, p.iid]) > 1 and not (
                p.iid and p.deletion_count is not None and p.target_kl is None):
            raise ConfigError(f"sweep.points[{i}]", "give deletion_count or target_kl (iid needs deletion_count)")
    if cfg.sweep.timing_repeats < 1:
        raise ConfigError("sweep.timing_repeats", "must be >= 1")
    return cfg


def load_config(path: str | Path, check_files: bool = True) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ConfigError("<file>", f"config not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError("<file>", f"not valid YAML: {exc}") from None
    if raw is None:
        raw = {}
    return parse_config(raw, path.parent, check_files)
