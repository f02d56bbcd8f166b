"""Run configuration: one JSON document, five sections, unknown keys rejected."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from . import aca, model as M
from .cqt import CqtConfig
from .errors import ConfigError, DataIOError
from .synth import CLIP_SECONDS, DESK_SAMPLE_RATE, LABEL_SETS


@dataclass(frozen=True)
class DatasetSection:
    pieces: int = 20
    corpus: str = "A"
    labels: str = "all"
    sample_rate: int = DESK_SAMPLE_RATE
    duration_s: float = CLIP_SECONDS

    def validate(self):
        if self.pieces < 1:
            raise ConfigError("dataset.pieces must be at least 1")
        if self.labels not in LABEL_SETS:
            raise ConfigError(f"dataset.labels must be one of {sorted(LABEL_SETS)}")
        if self.sample_rate < 8000 or self.duration_s <= 0:
            raise ConfigError("dataset.sample_rate >= 8000 and dataset.duration_s > 0 required")


@dataclass(frozen=True)
class CqtSection:
    f_min: float = 32.70
    bins_per_octave: int = 24
    n_bins: int = 168
    hop: int = 512
    floor_db: float = -80.0
    height: int = 64
    width: int = 64

    def cqt_config(self) -> CqtConfig:
        return CqtConfig(self.f_min, self.bins_per_octave, self.n_bins, self.hop, self.floor_db)

    def validate(self):
        if min(self.bins_per_octave, self.n_bins, self.hop, self.height, self.width) < 1 or self.f_min <= 0:
            raise ConfigError("cqt: sizes must be positive and f_min > 0")
        if self.floor_db >= 0:
            raise ConfigError("cqt.floor_db must be negative")


@dataclass(frozen=True)
class ModelSection:
    preset: str = "desk"
    dropout: float = 0.5

    def validate(self):
        if self.preset not in M.PRESETS:
            raise ConfigError(f"model.preset must be one of {sorted(M.PRESETS)}")
        if not 0 <= self.dropout < 1:
            raise ConfigError("model.dropout must lie in [0, 1)")


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 200
    batch_size: int = 16
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4

    def train_config(self) -> M.TrainConfig:
        return M.TrainConfig(self.epochs, self.batch_size, self.lr, self.momentum, self.weight_decay)

    def validate(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("train.epochs >= 0 and train.batch_size >= 1 required")
        if self.lr < 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigError("train: lr >= 0, momentum in [0, 1), weight_decay >= 0 required")


@dataclass(frozen=True)
class EvalSection:
    train_rate: float = 0.7
    rates: tuple = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7)
    repetitions: int = 10
    piece_level: bool = False
    methods: tuple = ("sresnn",) + aca.FEATURES
    baseline_epochs: int = 500
    baseline_lr: float = 0.5

    def validate(self):
        for r in (self.train_rate, *self.rates):
            if not 0 < r < 1:
                raise ConfigError(f"train rates must lie in (0, 1), got {r}")
        if self.repetitions < 1:
            raise ConfigError("eval.repetitions must be at least 1")
        for m in self.methods:
            if m != "sresnn" and m not in aca.FEATURES:
                raise ConfigError(f"unknown method {m!r}")


_SECTIONS = {"dataset": DatasetSection, "cqt": CqtSection, "model": ModelSection,
             "train": TrainSection, "eval": EvalSection}


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    cqt: CqtSection = field(default_factory=CqtSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self) -> "RunConfig":
        for name in _SECTIONS:
            getattr(self, name).validate()
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("rates", "methods"):
            d["eval"][key] = list(d["eval"][key])
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def model_config(self, n_classes: int = 28) -> M.SResnnConfig:
        base = M.PRESETS[self.model.preset](n_classes)
        return replace(base, head_dropout_p=self.model.dropout,
                       input=(3, self.cqt.height, self.cqt.width))

    def override(self, section: str, **values) -> "RunConfig":
        """Copy with selected fields replaced; ``None`` values are ignored."""
        values = {k: v for k, v in values.items() if v is not None}
        if not values:
            return self
        return replace(self, **{section: _section_from(section, {**asdict(getattr(self, section)), **values})})


def _coerce(ftype, value, where):
    if ftype in ("int", int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
    elif ftype in ("float", float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        value = float(value)
    elif ftype in ("str", str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
    elif ftype in ("bool", bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
    elif ftype in ("tuple", tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        value = tuple(value)
    return value


def _section_from(name: str, data) -> object:
    cls = _SECTIONS[name]
    if not isinstance(data, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown keys in section {name!r}: {unknown}")
    values = {k: _coerce(known[k].type, v, f"{name}.{k}") for k, v in data.items()}
    section = cls(**values)
    section.validate()
    return section


def from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(data) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config sections: {unknown}")
    return RunConfig(**{k: _section_from(k, v) for k, v in data.items()}).validate()


def load(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataIOError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return from_dict(data)
