"""Flat ``namespace.key = value`` run configuration with typed resolution."""

from __future__ import annotations

import os
import typing
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Dict, Iterable, Optional, Tuple

from .data import FormatSpec
from .errors import ConfigError
from .train import TrainConfig


@dataclass
class DataConfig:
    input: Optional[str] = None
    dataset: Optional[str] = None
    delimiter: str = "\t"
    columns: Tuple[str, ...] = ("user", "item", "timestamp", "rating")
    comment: str = "#"
    header: bool = False
    strict: bool = False
    max_malformed_fraction: float = 0.1
    split: str = "leave_one_out"
    fractions: Tuple[float, ...] = (0.8, 0.1, 0.1)

    def __post_init__(self):
        if self.split not in ("leave_one_out", "time"):
            raise ConfigError(f"data.split must be leave_one_out or time, got {self.split!r}")
        self.format_spec()

    def format_spec(self) -> FormatSpec:
        return FormatSpec(self.delimiter, tuple(self.columns), self.comment, self.header, self.strict,
                          self.max_malformed_fraction)


# config key -> (section, field name)
_KEYS: Dict[str, Tuple[str, str]] = {}
for _f in fields(DataConfig):
    _KEYS[f"data.{_f.name}"] = ("data", _f.name)
for _name in ("d_user", "d_content", "num_layers", "num_heads", "d_ff", "dropout", "attention_dropout", "dtype"):
    _KEYS[f"model.{_name}"] = ("train", _name)
for _name, _field in (("mode", "eval_mode"), ("n_negatives", "eval_negatives"),
                      ("exclude_seen", "eval_exclude_seen"), ("ks", "eval_ks"), ("every", "eval_every")):
    _KEYS[f"eval.{_name}"] = ("train", _field)
_taken = {v[1] for k, v in _KEYS.items() if v[0] == "train"}
for _f in fields(TrainConfig):
    if _f.name not in _taken and _f.name != "phase":
        _KEYS[f"train.{_f.name}"] = ("train", _f.name)

KNOWN_KEYS = tuple(sorted(_KEYS))
_ESCAPES = {"\\t": "\t", "tab": "\t", "comma": ",", "space": " "}


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment line; later keys win."""
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {raw!r}")
        out[key.strip()] = value.strip()
    return out


def parse_overrides(pairs: Iterable[str]) -> Dict[str, str]:
    out = {}
    for p in pairs:
        key, sep, value = p.partition("=")
        if not sep:
            raise ConfigError(f"override {p!r} is not key=value")
        out[key.strip()] = value.strip()
    return out


def _coerce(raw: str, tp, key: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union and type(None) in args:
        if raw.lower() in ("", "none", "null"):
            return None
        return _coerce(raw, next(a for a in args if a is not type(None)), key)
    if origin is tuple:
        return tuple(_coerce(x.strip(), args[0], key) for x in raw.split(",") if x.strip())
    try:
        if tp is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {tp.__name__}") from None
    return _ESCAPES.get(raw, raw) if key == "data.delimiter" else raw


@dataclass
class RunConfig:
    data: DataConfig
    train: TrainConfig

    def flat(self) -> Dict[str, object]:
        """Every resolved key with its value, for echoing into manifests."""
        sections = {"data": asdict(self.data), "train": self.train.to_dict()}
        out = {}
        for key in KNOWN_KEYS:
            section, name = _KEYS[key]
            v = sections[section][name]
            out[key] = list(v) if isinstance(v, tuple) else v
        return out


def resolve(config_path=None, overrides: Optional[Dict[str, str]] = None,
            defaults: Optional[Dict[str, str]] = None) -> RunConfig:
    """Merge command defaults, then the file, then overrides; reject unknown keys.

    When no seed is given anywhere, ``PDT_SEED`` is consulted before the
    built-in default.
    """
    merged: Dict[str, str] = dict(defaults or {})
    if "train.seed" not in merged and os.environ.get("PDT_SEED"):
        merged["train.seed"] = os.environ["PDT_SEED"]
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        merged.update(parse_config_text(path.read_text(encoding="utf-8"), str(path)))
    merged.update(overrides or {})
    unknown = sorted(set(merged) - set(_KEYS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    hints = {"data": typing.get_type_hints(DataConfig), "train": typing.get_type_hints(TrainConfig)}
    values: Dict[str, Dict[str, object]] = {"data": {}, "train": {}}
    for key, raw in merged.items():
        section, name = _KEYS[key]
        values[section][name] = _coerce(raw, hints[section][name], key)
    try:
        return RunConfig(DataConfig(**values["data"]), TrainConfig(**values["train"]))
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _render(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ",".join(_render(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def defaults_from_train_config(cfg: Dict[str, object]) -> Dict[str, str]:
    """Config-key defaults reproducing a stored training config (e.g. a checkpoint's echo)."""
    return {key: _render(cfg[name]) for key, (section, name) in _KEYS.items() if section == "train" and name in cfg}
