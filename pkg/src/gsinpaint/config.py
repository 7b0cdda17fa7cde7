"""INI configuration: defaults, then file, then dotted ``section.key=value`` overrides.

Sections and what they configure:

    [scene]    synthetic scene and dataset generation (SceneSpec)
    [train]    optimization schedule, budget, initialization (TrainConfig)
    [lr]       per-class learning rates: position, color, opacity, scale, rotation, feature
    [loss]     loss weights and schedules (LossConfig)
    [sgi]      selective inpainting loop (SGIConfig)
    [backend]  inpainting and depth backends
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import typing
from dataclasses import dataclass, field

from .losses import LossConfig
from .sgi import SGIConfig
from .synthetic import SceneSpec
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class BackendConfig:
    inpainter: str = "oracle"  # oracle | external
    oracle_noise: float = 0.0
    command: str = ""          # external inpainter template with {input} {mask} {output}
    depth_command: str = ""    # optional external depth estimator with {input} {output}
    timeout: float = 600.0

    def __post_init__(self):
        if self.inpainter not in ("oracle", "external"):
            raise ValueError(f"unknown inpainter backend {self.inpainter!r}")
        if self.inpainter == "external" and not self.command:
            raise ValueError("the external inpainter needs backend.command")


@dataclass
class Settings:
    scene: SceneSpec = field(default_factory=SceneSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    sgi: SGIConfig = field(default_factory=SGIConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)

    def train_config(self) -> TrainConfig:
        """The training config with the [loss] and [sgi] sections folded in."""
        return dataclasses.replace(self.train, loss=self.loss, sgi=self.sgi)


# section -> (Settings attribute, field-name prefix)
SECTIONS = {
    "scene": ("scene", ""),
    "train": ("train", ""),
    "lr": ("train", "lr_"),
    "loss": ("loss", ""),
    "sgi": ("sgi", ""),
    "backend": ("backend", ""),
}
_NESTED = {"loss", "sgi"}


def _section_fields(section: str) -> dict[str, tuple[str, type]]:
    """Config key -> (dataclass field name, annotated type) for one section."""
    attr, prefix = SECTIONS[section]
    cls = type(getattr(Settings(), attr))
    hints = typing.get_type_hints(cls)
    out = {}
    for f in dataclasses.fields(cls):
        if f.name in _NESTED and cls is TrainConfig:
            continue
        if section == "train" and f.name.startswith("lr_"):
            continue
        if prefix and not f.name.startswith(prefix):
            continue
        out[f.name[len(prefix):]] = (f.name, hints[f.name])
    return out


def coerce(value: str, typ, key: str):
    text = value.strip()
    try:
        if typ is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        if typ is str:
            return text
        if typing.get_origin(typ) is tuple:
            args = typing.get_args(typ)
            parts = [p for p in text.replace("(", "").replace(")", "").split(",") if p.strip()]
            if len(parts) != len(args):
                raise ValueError(text)
            return tuple(a(p.strip()) for a, p in zip(args, parts))
    except ValueError:
        raise ConfigError(f"{key}: cannot read {value!r} as {getattr(typ, '__name__', typ)}") from None
    raise ConfigError(f"{key}: unsupported option type {typ}")


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(repr(float(v)) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _apply(values: dict, section: str, key: str, raw: str) -> None:
    if section not in SECTIONS:
        raise ConfigError(f"unknown config section [{section}]")
    fields = _section_fields(section)
    if key not in fields:
        raise ConfigError(f"unknown config key {section}.{key}")
    name, typ = fields[key]
    values[SECTIONS[section][0]][name] = coerce(raw, typ, f"{section}.{key}")


def parse_override(text: str) -> tuple[str, str, str]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    lhs, raw = text.split("=", 1)
    if "." not in lhs:
        raise ConfigError(f"override key {lhs!r} needs a section prefix (e.g. loss.kappa)")
    section, key = lhs.strip().split(".", 1)
    return section, key, raw


def resolve(file_text: str | None = None, overrides: typing.Sequence[str] = ()) -> Settings:
    """Defaults, then the INI text, then overrides; later sources win."""
    values: dict[str, dict] = {a: {} for a, _ in SECTIONS.values()}
    if file_text:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            cp.read_string(file_text)
        except configparser.Error as e:
            raise ConfigError(f"malformed config file: {e}") from None
        for section in cp.sections():
            for key, raw in cp.items(section):
                _apply(values, section, key, raw)
    for ov in overrides:
        _apply(values, *parse_override(ov))
    try:
        return Settings(
            scene=SceneSpec(**values["scene"]), train=TrainConfig(**values["train"]),
            loss=LossConfig(**values["loss"]), sgi=SGIConfig(**values["sgi"]),
            backend=BackendConfig(**values["backend"]),
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def dump(settings: Settings) -> str:
    """Every option with its resolved value, in the same INI format ``resolve`` reads."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    for section, (attr, _) in SECTIONS.items():
        obj = getattr(settings, attr)
        cp[section] = {key: _format(getattr(obj, name)) for key, (name, _) in _section_fields(section).items()}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()
