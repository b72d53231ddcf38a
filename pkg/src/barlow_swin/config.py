"""Flat ``key = value`` run configuration covering every model, loss, training and augmentation field."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Optional

from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .exceptions import ConfigError
from .losses import BtLossConfig, ProjectorConfig, SegLossConfig
from .training import AugmentSpec, TrainConfig

SECTIONS = {
    "encoder": EncoderConfig,
    "decoder": DecoderConfig,
    "projector": ProjectorConfig,
    "train": TrainConfig,
    "bt": BtLossConfig,
    "seg": SegLossConfig,
    "augment": AugmentSpec,
}

# key -> (section, default value); keys are unique across sections
KEYS: Dict[str, tuple] = {}
for _section, _cls in SECTIONS.items():
    for _f in dataclasses.fields(_cls):
        if _f.name in KEYS:
            raise RuntimeError(f"duplicate config key {_f.name}")
        KEYS[_f.name] = (_section, _f.default)

ENCODER_KEYS = tuple(f.name for f in dataclasses.fields(EncoderConfig))
PROJECTOR_KEYS = tuple(f.name for f in dataclasses.fields(ProjectorConfig))

DESK_OVERRIDES = {"image_size": 64, "batch_size": 2}


def _parse_value(key: str, text: str):
    default = KEYS[key][1]
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [t.strip() for t in text.strip("()[]").split(",") if t.strip()]
            kind = float if key == "crop_scale" else int
            return tuple(kind(t) for t in items)
        return text
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    projector: ProjectorConfig = field(default_factory=ProjectorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    bt: BtLossConfig = field(default_factory=BtLossConfig)
    seg: SegLossConfig = field(default_factory=SegLossConfig)
    augment: AugmentSpec = field(default_factory=AugmentSpec)

    @classmethod
    def from_values(cls, values: Dict[str, object]) -> "RunConfig":
        unknown = sorted(set(values) - set(KEYS))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        grouped: Dict[str, dict] = {s: {} for s in SECTIONS}
        for key, value in values.items():
            grouped[KEYS[key][0]][key] = value
        try:
            return cls(**{s: SECTIONS[s](**kw) for s, kw in grouped.items()})
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def desk(cls, **overrides) -> "RunConfig":
        return cls.from_values({**DESK_OVERRIDES, **overrides})

    def values(self) -> Dict[str, object]:
        out = {}
        for section in SECTIONS:
            out.update(dataclasses.asdict(getattr(self, section)))
        return {k: tuple(v) if isinstance(v, list) else v for k, v in out.items()}

    def snapshot(self) -> Dict[str, str]:
        """String form stored inside checkpoints."""
        return {k: _format_value(v) for k, v in self.values().items()}

    def replace(self, **overrides) -> "RunConfig":
        return RunConfig.from_values({**self.values(), **overrides})

    def dumps(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.snapshot().items())


def parse_lines(lines: Iterable[str], source: str = "<config>", allow_repeat: bool = False) -> Dict[str, object]:
    values: Dict[str, object] = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        if key in values and not allow_repeat:
            raise ConfigError(f"{source}:{lineno}: duplicate config key {key!r}")
        values[key] = _parse_value(key, value)
    return values


def parse_overrides(pairs: Iterable[str]) -> Dict[str, object]:
    """Command-line overrides; a repeated key takes its last value."""
    return parse_lines(pairs, source="--set", allow_repeat=True)


def load_config(path: Optional[str] = None, overrides: Iterable[str] = ()) -> RunConfig:
    """Read ``path`` (if given), then apply ``key=value`` overrides; overrides win."""
    values: Dict[str, object] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        values.update(parse_lines(p.read_text(encoding="utf-8").splitlines(), str(p)))
    values.update(parse_overrides(overrides))
    return RunConfig.from_values(values)


def config_from_snapshot(snapshot: Dict[str, str]) -> RunConfig:
    return RunConfig.from_values({k: _parse_value(k, v) for k, v in snapshot.items() if k in KEYS})
