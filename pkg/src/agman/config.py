"""Run configuration: a single JSON document, overridable with ``key=value``."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .data import AttributeSpace


class ConfigError(ValueError):
    """Invalid or missing configuration field; ``key`` names the field."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


TRIPLET_MODES = ("similarity_corrected", "as_written")
PROFILES = ("tinynet", "resnet50")

# Defaults that depend on the backbone profile; None in ModelConfig means
# "take it from here".
PROFILE_DEFAULTS = {
    "tinynet": {"embedding_size": 64, "c_prime": 32, "ca_reduction": 4, "image_size": 64,
                "mean": [0.0, 0.0, 0.0], "std": [1.0, 1.0, 1.0]},
    "resnet50": {"embedding_size": 1024, "c_prime": 512, "ca_reduction": 16, "image_size": 224,
                 "mean": [0.485, 0.456, 0.406], "std": [0.229, 0.224, 0.225]},
}


@dataclass
class ModelConfig:
    profile: str = "tinynet"
    embedding_size: int | None = None
    c_prime: int | None = None
    ca_reduction: int | None = None
    aca_hidden: int | None = None
    channels: list[int] | None = None
    pretrained: str | None = None
    enable_asa: bool = True
    enable_sa: bool = True
    enable_aca: bool = True
    enable_ca: bool = True
    enable_fusion: bool = True


@dataclass
class TrainConfig:
    batch_size: int = 16
    learning_rate: float = 1e-4
    lr_step: int = 3
    lr_gamma: float = 0.9
    epochs: int = 50
    margin: float = 0.2
    triplets_per_epoch: int = 100_000
    triplet_mode: str = "similarity_corrected"
    optimizer: str = "adam"
    enable_classification_loss: bool = True
    weight_clamp: float = 10.0
    class_weights: list[float] | None = None


@dataclass
class DataConfig:
    train_manifest: str | None = None
    eval_manifest: str | None = None
    triplets: str | None = None
    image_size: int | None = None
    query_fraction: float = 0.2
    eval_triplets: int = 1000
    # per-channel normalisation; None takes the profile default
    mean: list[float] | None = None
    std: list[float] | None = None


@dataclass
class RunConfig:
    space: AttributeSpace | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output_dir: str = "runs/agman"
    seed: int = 0

    # -- derived values ------------------------------------------------------
    def _profile_default(self, key):
        return PROFILE_DEFAULTS[self.model.profile][key]

    @property
    def embedding_size(self) -> int:
        return self.model.embedding_size or self._profile_default("embedding_size")

    @property
    def c_prime(self) -> int:
        return self.model.c_prime or self._profile_default("c_prime")

    @property
    def ca_reduction(self) -> int:
        return self.model.ca_reduction or self._profile_default("ca_reduction")

    @property
    def image_size(self) -> int:
        return self.data.image_size or self._profile_default("image_size")

    @property
    def pixel_mean(self) -> list[float]:
        return self.data.mean or self._profile_default("mean")

    @property
    def pixel_std(self) -> list[float]:
        return self.data.std or self._profile_default("std")

    # -- (de)serialisation ---------------------------------------------------
    def to_dict(self) -> dict:
        d = {
            "space": self.space.to_dict() if self.space else None,
            "model": asdict(self.model),
            "train": asdict(self.train),
            "data": asdict(self.data),
            "output_dir": self.output_dir,
            "seed": self.seed,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        known = {"space", "model", "train", "data", "output_dir", "seed"}
        for key in d:
            if key not in known:
                raise ConfigError(key, "unknown key")
        space = None
        if d.get("space") is not None:
            try:
                space = AttributeSpace.from_dict(d["space"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError("space", str(exc)) from None
        cfg = cls(
            space=space,
            model=_section(ModelConfig, d.get("model", {}), "model"),
            train=_section(TrainConfig, d.get("train", {}), "train"),
            data=_section(DataConfig, d.get("data", {}), "data"),
            output_dir=d.get("output_dir", "runs/agman"),
            seed=d.get("seed", 0),
        )
        cfg.validate()
        return cfg

    def validate(self) -> None:
        m, t, dc = self.model, self.train, self.data
        if m.profile not in PROFILES:
            raise ConfigError("model.profile", f"must be one of {PROFILES}, got {m.profile!r}")
        _check_type("seed", self.seed, int)
        _check_type("output_dir", self.output_dir, str)
        for key in ("embedding_size", "c_prime", "ca_reduction", "aca_hidden"):
            v = getattr(m, key)
            if v is not None:
                _check_type(f"model.{key}", v, int)
                if v < 1:
                    raise ConfigError(f"model.{key}", f"must be positive, got {v}")
        if m.channels is not None and (len(m.channels) != 4 or any(c < 1 for c in m.channels)):
            raise ConfigError("model.channels", "expected four positive channel counts")
        if m.profile == "tinynet" and m.channels is not None and m.channels[2] != 2 * m.channels[1]:
            raise ConfigError("model.channels", "stage 3 must have twice the channels of stage 2")
        if self.embedding_size % self.ca_reduction:
            raise ConfigError("model.ca_reduction",
                              f"{self.ca_reduction} does not divide embedding size {self.embedding_size}")
        for key in ("enable_asa", "enable_sa", "enable_aca", "enable_ca", "enable_fusion"):
            _check_type(f"model.{key}", getattr(m, key), bool)
        for key in ("batch_size", "lr_step", "triplets_per_epoch"):
            v = getattr(t, key)
            _check_type(f"train.{key}", v, int)
            if v < 1:
                raise ConfigError(f"train.{key}", f"must be positive, got {v}")
        _check_type("train.epochs", t.epochs, int)
        if t.epochs < 0:
            raise ConfigError("train.epochs", f"must be >= 0, got {t.epochs}")
        for key in ("learning_rate", "lr_gamma", "margin", "weight_clamp"):
            v = getattr(t, key)
            _check_type(f"train.{key}", v, (int, float))
            if v < 0:
                raise ConfigError(f"train.{key}", f"must be >= 0, got {v}")
        if t.lr_gamma <= 0:
            raise ConfigError("train.lr_gamma", "must be positive")
        if t.triplet_mode not in TRIPLET_MODES:
            raise ConfigError("train.triplet_mode", f"must be one of {TRIPLET_MODES}, got {t.triplet_mode!r}")
        if t.optimizer not in ("adam", "sgd"):
            raise ConfigError("train.optimizer", f"must be 'adam' or 'sgd', got {t.optimizer!r}")
        if t.class_weights is not None:
            if self.space and len(t.class_weights) != self.space.n:
                raise ConfigError("train.class_weights", f"expected {self.space.n} weights")
            if any(w <= 0 for w in t.class_weights):
                raise ConfigError("train.class_weights", "weights must be positive")
        if self.image_size < 16:
            raise ConfigError("data.image_size", f"must be >= 16, got {self.image_size}")
        if not 0 < dc.query_fraction < 1:
            raise ConfigError("data.query_fraction", "must lie in (0, 1)")
        for key in ("mean", "std"):
            v = getattr(dc, key)
            if v is not None and len(v) != 3:
                raise ConfigError(f"data.{key}", "expected three per-channel values")
        if dc.std is not None and any(s <= 0 for s in dc.std):
            raise ConfigError("data.std", "must be positive")

    def require(self, *keys: str) -> None:
        """Raise ConfigError for the first dotted key whose value is None."""
        for key in keys:
            obj: Any = self
            for part in key.split("."):
                obj = getattr(obj, part)
            if obj is None:
                raise ConfigError(key, "missing required value")

    def override(self, key: str, raw: str) -> "RunConfig":
        """Apply ``key=value`` (value parsed as JSON, falling back to a string)."""
        d = self.to_dict()
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        parts = key.split(".")
        node = d
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                if part == "space" and node.get(part) is None:
                    node[part] = {}
                else:
                    raise ConfigError(key, "unknown key")
            node = node[part]
        if parts[-1] not in node and not (parts[0] == "space"):
            raise ConfigError(key, "unknown key")
        node[parts[-1]] = value
        return RunConfig.from_dict(d)


def _check_type(key, value, types):
    types = types if isinstance(types, tuple) else (types,)
    if isinstance(value, bool) and bool not in types:
        raise ConfigError(key, "wrong type bool")
    if not isinstance(value, types):
        raise ConfigError(key, f"wrong type {type(value).__name__}")


def _section(cls, d, prefix):
    if not isinstance(d, dict):
        raise ConfigError(prefix, "expected an object")
    names = {f.name for f in fields(cls)}
    for key in d:
        if key not in names:
            raise ConfigError(f"{prefix}.{key}", "unknown key")
    return cls(**d)


def load_config(path: str | Path, overrides: list[str] = ()) -> RunConfig:
    path = Path(path)
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError("--config", f"no such file {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("--config", f"invalid JSON: {exc}") from None
    cfg = RunConfig.from_dict(d)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(item, "expected KEY=VALUE")
        cfg = cfg.override(key.strip(), value)
    return cfg

