"""INI run configuration: one section per module, every default written out.

The schema is read off the dataclass defaults, so a key's type is the type
of its default. ``[run] seed`` is the only seed; it is copied into every
stage's config.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, fields
from pathlib import Path

from .adaptation import AdaptationConfig
from .data import ShiftSpec
from .errors import ConfigError, DataError
from .target import SourceConfig
from .vil import ToyViLConfig

SETTINGS = ("closed", "partial", "open")


def _defaults(cls, extra=None):
    out = dict(extra or {})
    out.update({f.name: f.default for f in fields(cls) if f.name != "seed"})
    return out


SCHEMA = {
    "run": {"seed": 0, "name": "toy"},
    "data": _defaults(ShiftSpec, {"setting": "closed", "keep_classes": 6, "known_classes": 6}),
    "target_model": _defaults(SourceConfig),
    "vil_backend": _defaults(ToyViLConfig, {"backend": "toy"}),
    "adaptation": _defaults(AdaptationConfig),
    "evaluation": {"track_mmd": True, "mmd_samples": 512, "open_threshold": "median"},
}


@dataclass(frozen=True)
class RunConfig:
    values: dict

    @property
    def seed(self) -> int:
        return self.values["run"]["seed"]

    @property
    def name(self) -> str:
        return self.values["run"]["name"]

    def _build(self, cls, section):
        kw = {k: v for k, v in self.values[section].items() if k in {f.name for f in fields(cls)}}
        try:
            return cls(**kw, seed=self.seed)
        except DataError as exc:
            raise ConfigError(f"[{section}] {exc}") from None

    @property
    def shift_spec(self) -> ShiftSpec:
        return self._build(ShiftSpec, "data")

    @property
    def source(self) -> SourceConfig:
        return self._build(SourceConfig, "target_model")

    @property
    def vil(self) -> ToyViLConfig:
        return self._build(ToyViLConfig, "vil_backend")

    @property
    def adaptation(self) -> AdaptationConfig:
        return self._build(AdaptationConfig, "adaptation")

    def section(self, name) -> dict:
        return dict(self.values[name])

    def with_value(self, section, key, value) -> "RunConfig":
        values = {s: dict(v) for s, v in self.values.items()}
        values[section][key] = value
        return RunConfig(values)

    def to_ini(self) -> str:
        lines = []
        for section, entries in self.values.items():
            lines.append(f"[{section}]")
            lines.extend(f"{key} = {_format(value)}" for key, value in entries.items())
            lines.append("")
        return "\n".join(lines)


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _convert(section, key, text, default):
    where = f"[{section}] {key}"
    try:
        if isinstance(default, bool):
            return configparser.ConfigParser.BOOLEAN_STATES[text.lower()]
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except (KeyError, ValueError):
        kind = "boolean" if isinstance(default, bool) else type(default).__name__
        raise ConfigError(f"{where}: expected {kind}, got {text!r}") from None
    return text


def default_config() -> RunConfig:
    return RunConfig({s: dict(v) for s, v in SCHEMA.items()})


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    values = {s: dict(v) for s, v in SCHEMA.items()}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]; expected one of {', '.join(SCHEMA)}")
        for key, text_value in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"[{section}] unknown key {key!r}")
            values[section][key] = _convert(section, key, text_value.strip(), SCHEMA[section][key])
    cfg = RunConfig(values)
    validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), str(path))


def validate(cfg: RunConfig) -> None:
    data = cfg.values["data"]
    spec = cfg.shift_spec
    if data["setting"] not in SETTINGS:
        raise ConfigError(f"[data] setting: expected one of {SETTINGS}, got {data['setting']!r}")
    for key in ("keep_classes", "known_classes"):
        if not 1 <= data[key] < spec.n_classes:
            raise ConfigError(f"[data] {key}: must lie in [1, {spec.n_classes - 1}], got {data[key]}")
    try:
        cfg.adaptation.validate(min(spec.n_classes, data["known_classes"]))
    except ConfigError as exc:
        raise ConfigError(f"[adaptation] {exc}") from None
    src = cfg.source
    if src.epochs < 0 or src.batch_size < 1 or not 0 < src.train_fraction < 1 or not 0 <= src.sigma < 1:
        raise ConfigError("[target_model] need epochs >= 0, batch_size >= 1, 0 < train_fraction < 1, 0 <= sigma < 1")
    if cfg.vil.logit_scale <= 0:
        raise ConfigError("[vil_backend] logit_scale: must be positive")
    threshold = cfg.values["evaluation"]["open_threshold"]
    if threshold != "median":
        try:
            float(threshold)
        except ValueError:
            raise ConfigError(f"[evaluation] open_threshold: expected 'median' or a number, got {threshold!r}") \
                from None


def with_setting(cfg: RunConfig, setting: str | None) -> RunConfig:
    return cfg if setting is None else cfg.with_value("data", "setting", setting)

