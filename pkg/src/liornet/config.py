"""Sectioned key-value run configuration.

Defaults ship as ``defaults.ini`` next to this module. A user file and
``section.key=value`` overrides are layered on top; any key not present in
the defaults is rejected. Empty values in the defaults mark required keys,
checked when a command first needs them.
"""

from __future__ import annotations

import configparser
import io
import typing
from dataclasses import fields, replace
from importlib import resources
from pathlib import Path

from .baselines import DLIORConfig, DRORConfig, FilterConfig, LIORConfig, RORConfig, SORConfig
from .core import SensorMeta
from .losses import LossConfig
from .nnet.models import NetConfig
from .nnet.train import TrainConfig
from .pseudolabel import PseudoLabelConfig


class ConfigError(ValueError):
    pass


def _parser() -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keys like I0 are case-sensitive
    return cp


def default_text() -> str:
    return resources.files(__package__).joinpath("defaults.ini").read_text()


class Config:
    def __init__(self, cp: configparser.ConfigParser):
        self.cp = cp

    @classmethod
    def load(cls, path=None, overrides=()) -> "Config":
        cp = _parser()
        cp.read_string(default_text(), source="defaults.ini")
        valid = {s: set(cp[s]) for s in cp.sections()}
        if path is not None:
            user = _parser()
            try:
                user.read_string(Path(path).read_text(), source=str(path))
            except configparser.Error as exc:
                raise ConfigError(f"cannot parse {path}: {exc}") from exc
            for sec in user.sections():
                for key, value in user[sec].items():
                    cls._set(cp, valid, sec, key, value, str(path))
        for item in overrides:
            name, sep, value = item.partition("=")
            sec, dot, key = name.rpartition(".")
            if not sep or not dot:
                raise ConfigError(f"override {item!r} is not of the form section.key=value")
            cls._set(cp, valid, sec, key, value, "override")
        return cls(cp)

    @staticmethod
    def _set(cp, valid, sec, key, value, origin):
        if sec not in valid:
            raise ConfigError(f"{origin}: unknown section [{sec}]; valid sections: {', '.join(sorted(valid))}")
        if key not in valid[sec]:
            raise ConfigError(f"{origin}: unknown key {sec}.{key}; valid keys in [{sec}]: "
                              f"{', '.join(sorted(valid[sec]))}")
        cp[sec][key] = value.strip()

    def dump(self) -> str:
        buf = io.StringIO()
        self.cp.write(buf)
        return buf.getvalue()

    def get(self, sec: str, key: str) -> str:
        if not self.cp.has_option(sec, key):
            raise ConfigError(f"unknown key {sec}.{key}")
        value = self.cp[sec][key]
        if value == "":
            raise ConfigError(f"missing required key {sec}.{key}")
        return value

    def getint(self, sec, key) -> int:
        return int(self.get(sec, key))

    def getfloat(self, sec, key) -> float:
        return float(self.get(sec, key))

    def getbool(self, sec, key) -> bool:
        value = self.get(sec, key).lower()
        if value not in configparser.ConfigParser.BOOLEAN_STATES:
            raise ConfigError(f"{sec}.{key}: not a boolean: {value!r}")
        return configparser.ConfigParser.BOOLEAN_STATES[value]

    def getlist(self, sec, key, cast=float) -> tuple:
        raw = self.get(sec, key)
        return tuple(cast(v) for v in raw.split(",") if v.strip())

    def section(self, sec: str, cls, skip=()):
        """Build dataclass ``cls`` from the keys of ``sec`` that name its fields."""
        hints = typing.get_type_hints(cls)
        kwargs = {}
        for f in fields(cls):
            if f.name in skip or not self.cp.has_option(sec, f.name):
                continue
            kwargs[f.name] = self._convert(sec, f.name, hints[f.name])
        try:
            return cls(**kwargs)
        except ValueError as exc:
            raise ConfigError(f"[{sec}]: {exc}") from exc

    def _convert(self, sec, key, hint):
        args = typing.get_args(hint)
        if typing.get_origin(hint) is typing.Union and type(None) in args:
            if self.cp[sec][key].lower() in ("", "none"):
                return None
            hint = next(a for a in args if a is not type(None))
        try:
            if hint is bool:
                return self.getbool(sec, key)
            if hint is int:
                return self.getint(sec, key)
            if hint is float:
                return self.getfloat(sec, key)
            if hint is tuple:
                return self.getlist(sec, key)
            return self.get(sec, key)
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"{sec}.{key}: {exc}") from exc

    # builders ---------------------------------------------------------------

    def sensor(self) -> SensorMeta:
        return self.section("sensor", SensorMeta)

    def pseudolabel(self) -> PseudoLabelConfig:
        return self.section("pseudolabel", PseudoLabelConfig)

    def filters(self) -> FilterConfig:
        return FilterConfig(
            ror=self.section("filter.ror", RORConfig),
            sor=self.section("filter.sor", SORConfig),
            dror=self.section("filter.dror", DRORConfig),
            lior=self.section("filter.lior", LIORConfig),
            dlior=self.section("filter.dlior", DLIORConfig),
        )

    def net(self) -> NetConfig:
        return self.section("net", NetConfig)

    def loss(self) -> LossConfig:
        base = self.section("loss", LossConfig, skip=("pseudolabel",))
        return replace(base, pseudolabel=self.pseudolabel())

    def train(self) -> TrainConfig:
        return self.section("train", TrainConfig)

    def snow_ids(self) -> tuple:
        return self.getlist("io", "snow_ids", int)
