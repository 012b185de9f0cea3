"""Run configuration: flat ``section.key = value`` text plus command-line overrides.

Sections are ``network``, ``loss``, ``train``, ``augment`` and ``paths``.
Values are coerced to the type of the field's default: comma lists for
tuples, ``true``/``false`` for booleans, and fractions such as ``1/16`` for
reals. Later sources win: defaults < config file < overrides.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Optional

from .data import AugmentConfig
from .loss import LossConfig
from .network import ConfigError, NetworkConfig
from .trainer import TrainConfig


@dataclass
class PathsConfig:
    train_manifest: Optional[str] = None
    val_manifest: Optional[str] = None
    eval_manifest: Optional[str] = None
    checkpoint: Optional[str] = None
    out: str = "runs/slsdeep"


SECTIONS = {
    "network": NetworkConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "augment": AugmentConfig,
    "paths": PathsConfig,
}
# TrainConfig nests the loss section; it is configured through ``loss.*`` only.
_HIDDEN = {("train", "loss")}

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _field_map(section: str) -> dict:
    return {f.name: f for f in fields(SECTIONS[section]) if (section, f.name) not in _HIDDEN}


def _scalar(text: str, like, key: str):
    text = text.strip()
    if isinstance(like, bool):
        low = text.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    try:
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(Fraction(text))
    except (ValueError, ZeroDivisionError):
        kind = "an integer" if isinstance(like, int) else "a real number"
        raise ConfigError(f"{key}: expected {kind}, got {text!r}") from None
    return text


def coerce(section: str, key: str, text: str):
    """Convert the string ``text`` to the type of ``section.key``'s default."""
    name = f"{section}.{key}"
    if section not in SECTIONS:
        raise ConfigError(f"unknown config section {section!r} in {name!r}; sections: {', '.join(SECTIONS)}")
    fmap = _field_map(section)
    if key not in fmap:
        raise ConfigError(f"unknown config key {name!r}; valid keys: {', '.join(sorted(fmap))}")
    f = fmap[key]
    default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
    if isinstance(default, tuple):
        parts = [p for p in text.replace("x", ",").split(",") if p.strip()]
        if not parts:
            raise ConfigError(f"{name}: expected a comma-separated list, got {text!r}")
        return tuple(_scalar(p, default[0], name) for p in parts)
    if default is None:
        text = text.strip()
        return None if text.lower() in ("", "none", "null") else text
    return _scalar(text, default, name)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    if value is None:
        return "none"
    return repr(value) if isinstance(value, float) else str(value)


def parse_text(text: str, source: str = "<config>") -> list:
    """``[(section, key, raw value)]`` from config text; ``#`` starts a comment."""
    items = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value', got {line!r}")
        lhs, rhs = line.split("=", 1)
        lhs = lhs.strip()
        if lhs.count(".") != 1:
            raise ConfigError(f"{source}:{lineno}: key {lhs!r} must have the form section.key")
        section, key = lhs.split(".")
        items.append((section, key, rhs.strip()))
    return items


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    # "section.key" names set by a file or override rather than defaulted.
    explicit: frozenset = frozenset()

    @classmethod
    def resolve(cls, config_path=None, overrides: Iterable[tuple] = ()) -> "RunConfig":
        """Merge defaults, the optional config file and ``(section, key, raw)`` overrides."""
        items = []
        if config_path is not None:
            path = Path(config_path)
            if not path.is_file():
                raise ConfigError(f"config file not found: {path}")
            items.extend(parse_text(path.read_text(encoding="utf-8"), str(path)))
        items.extend(overrides)
        values = {s: {} for s in SECTIONS}
        for section, key, raw in items:
            values[section][key] = coerce(section, key, raw)
        return cls.from_values(values)

    @classmethod
    def from_values(cls, values: dict) -> "RunConfig":
        values = {s: dict(values.get(s, {})) for s in SECTIONS}
        explicit = frozenset(f"{s}.{k}" for s, kv in values.items() for k in kv)
        try:
            loss = LossConfig(**values["loss"])
            train = TrainConfig(**values["train"], loss=loss)
            built = dict(
                network=NetworkConfig(**values["network"]),
                augment=AugmentConfig(**values["augment"]),
                paths=PathsConfig(**values["paths"]),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from None
        return cls(loss=loss, train=train, explicit=explicit, **built)

    def section_values(self, section: str) -> dict:
        obj = getattr(self, section)
        return {k: getattr(obj, k) for k in _field_map(section)}

    def to_text(self) -> str:
        """Every resolved key, one per line, in the config-file format."""
        lines = []
        for section in SECTIONS:
            for key, value in self.section_values(section).items():
                lines.append(f"{section}.{key} = {_format(value)}")
        return "\n".join(lines) + "\n"

    def network_explicit(self) -> bool:
        return any(name.startswith("network.") for name in self.explicit)
