"""Run configuration and the flat ``key = value`` config file format.

Example file::

    # blobs with label noise
    seed = 3
    model = in=2 dense=16 dense=2
    data.kind = blobs
    data.noise_rate = 0.1
    optimizer.name = asam
    optimizer.rho = 0.5
    train.epochs = 20
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .errors import ConfigError
from .models import ModelSpec
from .normops import PerturbationConfig

__all__ = [
    "DataConfig",
    "OptimConfig",
    "RunConfig",
    "parse_config_text",
    "load_config",
    "DEFAULT_RHO",
]

DEFAULT_RHO = {"sam": 0.05, "asam": 0.5}

_ALIASES = {
    "batch_size": "train.batch_size",
    "epochs": "train.epochs",
    "weight_decay": "optimizer.weight_decay",
    "lr": "optimizer.lr",
    "momentum": "optimizer.momentum",
    "rho": "optimizer.rho",
    "eta": "optimizer.eta",
    "p": "optimizer.p",
    "norm": "optimizer.norm",
    "m": "optimizer.m",
    "noise_rate": "data.noise_rate",
}


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        out[key] = value.strip()
    return out


def _bool(value) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("on", "true", "yes", "1"):
        return True
    if text in ("off", "false", "no", "0"):
        return False
    raise ConfigError(f"expected on/off, got {value!r}")


def _opt_int(value):
    if value is None or str(value).lower() in ("", "none", "full"):
        return None
    return int(value)


def _opt_float(value):
    if value is None or str(value).lower() in ("", "none"):
        return None
    return float(value)


def _opt_str(value):
    if value is None or str(value) == "":
        return None
    return str(value)


@dataclass(frozen=True)
class DataConfig:
    kind: str = "blobs"
    classes: int = 2
    dim: int = 2
    n: int = 400
    n_test: int = 400
    separation: float = 4.0
    seed: int = 0
    train_images: str = None
    train_labels: str = None
    test_images: str = None
    test_labels: str = None
    subset: int = None
    noise_rate: float = 0.0

    _types = {
        "kind": str, "classes": int, "dim": int, "n": int, "n_test": int, "separation": float,
        "seed": int, "train_images": _opt_str, "train_labels": _opt_str, "test_images": _opt_str,
        "test_labels": _opt_str, "subset": _opt_int, "noise_rate": float,
    }


@dataclass(frozen=True)
class OptimConfig:
    name: str = "sgd"
    base: str = "sgd"
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: str = "cosine"
    rho: float = None
    p: str = "2"
    norm: str = "elementwise"
    eta: float = 0.01
    bias_norm: bool = False
    m: int = None

    _types = {
        "name": str, "base": str, "lr": float, "momentum": float, "weight_decay": float,
        "schedule": str, "rho": _opt_float, "p": str, "norm": str, "eta": float,
        "bias_norm": _bool, "m": _opt_int,
    }

    @property
    def sharpness_aware(self) -> bool:
        return self.name in ("sam", "asam")

    @property
    def base_kind(self) -> str:
        return self.name if self.name in ("sgd", "adam") else self.base

    def perturbation(self) -> PerturbationConfig:
        rho = self.rho if self.rho is not None else DEFAULT_RHO.get(self.name, 0.0)
        scheme = self.norm if self.name == "asam" else "identity"
        return PerturbationConfig(rho=rho, p=self.p, scheme=scheme, eta=self.eta, bias_normalized=self.bias_norm)


@dataclass(frozen=True)
class RunConfig:
    model: str = "in=2 dense=16 dense=2"
    data: DataConfig = field(default_factory=DataConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    out: str = None

    def validate(self) -> "RunConfig":
        spec = ModelSpec.from_text(self.model)
        d, o = self.data, self.optim
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if o.name not in ("sgd", "adam", "sam", "asam"):
            raise ConfigError(f"unknown optimizer {o.name!r}")
        if o.base not in ("sgd", "adam"):
            raise ConfigError(f"unknown base optimizer {o.base!r}")
        if o.rho is not None and not (math.isfinite(o.rho) and o.rho >= 0):
            raise ConfigError(f"rho must be >= 0, got {o.rho}")
        if not o.lr > 0:
            raise ConfigError("learning rate must be positive")
        if o.m is not None and o.m < 1:
            raise ConfigError("m must be >= 1")
        o.perturbation()
        if not 0.0 <= d.noise_rate <= 1.0:
            raise ConfigError("noise rate must lie in [0, 1]")
        if d.kind == "blobs":
            if math.prod(spec.input_shape) != d.dim:
                raise ConfigError(f"model input {spec.input_shape} does not match blob dim {d.dim}")
            if spec.num_classes != d.classes:
                raise ConfigError(f"model has {spec.num_classes} outputs but data has {d.classes} classes")
        elif d.kind == "idx":
            for name in ("train_images", "train_labels", "test_images", "test_labels"):
                path = getattr(d, name)
                if not path:
                    raise ConfigError(f"data.{name} is required for idx data")
                if not Path(path).is_file():
                    raise ConfigError(f"data.{name}: no such file {path}")
        else:
            raise ConfigError(f"unknown data kind {d.kind!r}")
        return self

    @property
    def spec(self) -> ModelSpec:
        return ModelSpec.from_text(self.model)

    def to_mapping(self) -> dict:
        out = {"model": self.model, "train.epochs": self.epochs, "train.batch_size": self.batch_size, "seed": self.seed}
        if self.out is not None:
            out["out"] = self.out
        for prefix, section in (("data", self.data), ("optimizer", self.optim)):
            for key, value in asdict(section).items():
                if value is not None:
                    out[f"{prefix}.{key}"] = value
        return out

    @classmethod
    def from_mapping(cls, mapping: dict) -> "RunConfig":
        return cls().with_overrides(mapping)

    def with_overrides(self, mapping: dict) -> "RunConfig":
        data, optim = {}, {}
        top = {}
        for raw_key, value in mapping.items():
            key = _ALIASES.get(raw_key, raw_key)
            section, _, name = key.partition(".")
            try:
                if key == "model":
                    top["model"] = str(value)
                elif key == "seed":
                    top["seed"] = int(value)
                elif key == "out":
                    top["out"] = _opt_str(value)
                elif section == "train" and name in ("epochs", "batch_size"):
                    top[name] = int(value)
                elif section == "data" and name in DataConfig._types:
                    data[name] = DataConfig._types[name](value)
                elif section == "optimizer" and name in OptimConfig._types:
                    optim[name] = OptimConfig._types[name](value)
                else:
                    raise ConfigError(f"unknown config key {raw_key!r}")
            except (TypeError, ValueError) as exc:
                if isinstance(exc, ConfigError):
                    raise
                raise ConfigError(f"{raw_key}: cannot parse {value!r}") from None
        return replace(
            self,
            data=replace(self.data, **data),
            optim=replace(self.optim, **optim),
            **top,
        )


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return RunConfig.from_mapping(parse_config_text(text))
