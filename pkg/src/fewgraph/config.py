"""INI-style config files: `key = value` pairs in protocol/train/experiment
sections. Unknown sections or keys fail fast."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import replace

from .errors import ConfigError
from .harness import METHODS, ExperimentConfig, SyntheticSpec
from .protocol import ProtocolConfig
from .trainer import TrainConfig

_SYNTHETIC_KEYS = {
    "dataset_classes": "class_count",
    "dataset_dim": "dim",
    "dataset_radius": "radius",
    "train_per_class": "train_per_class",
    "test_per_class": "test_per_class",
}
_EXPERIMENT_KEYS = {"method", "dataset", "test_dataset", "repeat", "out"} | set(_SYNTHETIC_KEYS)

# dataclass annotations are strings (postponed evaluation); map the ones a
# config file may set
_TYPE_BY_NAME = {"int": int, "float": float, "bool": bool, "str": str, "int | None": int}


def _coerce(raw: str, kind):
    text = raw.strip()
    try:
        if kind is bool:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"cannot parse {raw!r} as {kind.__name__}") from exc


def _field_kind(field: dataclasses.Field):
    if isinstance(field.type, type):
        return field.type
    return _TYPE_BY_NAME.get(str(field.type))


def _apply_section(target, section, fields, section_name: str):
    updates = {}
    for key, raw in section.items():
        if key not in fields:
            raise ConfigError(f"unknown key {key!r} in section [{section_name}]")
        kind = _field_kind(fields[key])
        if kind is None:
            default = getattr(target, key)
            kind = type(default) if default is not None else int
        updates[key] = _coerce(raw, kind)
    return replace(target, **updates) if updates else target


def load_config(path: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        read = parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config {path!r}: {exc}") from exc
    if not read:
        raise ConfigError(f"config file {path!r} not found or unreadable")

    known_sections = {"protocol", "train", "experiment"}
    unknown = set(parser.sections()) - known_sections
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")

    protocol = ProtocolConfig(base_class_count=12, n_way=2, k_shot=5,
                              query_per_class=15, session_count=4, seed=0)
    train = TrainConfig()
    if parser.has_section("protocol"):
        fields = {f.name: f for f in dataclasses.fields(ProtocolConfig)}
        protocol = _apply_section(protocol, parser["protocol"], fields, "protocol")
    if parser.has_section("train"):
        fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
        train = _apply_section(train, parser["train"], fields, "train")

    experiment = ExperimentConfig(protocol=protocol, train=train)
    if parser.has_section("experiment"):
        synth = {}
        updates = {}
        for key, raw in parser["experiment"].items():
            if key not in _EXPERIMENT_KEYS:
                raise ConfigError(f"unknown key {key!r} in section [experiment]")
            if key in _SYNTHETIC_KEYS:
                attr = _SYNTHETIC_KEYS[key]
                kind = type(getattr(SyntheticSpec(), attr))
                synth[attr] = _coerce(raw, kind)
            elif key == "method":
                method = raw.strip()
                if method not in METHODS:
                    raise ConfigError(f"method must be one of {METHODS}, got {method!r}")
                updates["method"] = method
            elif key == "dataset":
                updates["dataset_source"] = raw.strip()
            elif key == "test_dataset":
                updates["test_dataset_source"] = raw.strip()
            elif key == "repeat":
                updates["repeat"] = _coerce(raw, int)
            elif key == "out":
                updates["out_dir"] = raw.strip()
        if synth:
            updates["synthetic"] = replace(SyntheticSpec(), **synth)
        experiment = replace(experiment, **updates)
    experiment.validate()
    return experiment
