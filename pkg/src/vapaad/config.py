"""Run configuration: model, training, data and output settings.

Stored as an INI file with sections ``[model]``, ``[train]``, ``[data]`` and
``[output]``.  Every key has a default; unknown sections or keys are
rejected so typos do not silently fall back to defaults.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .model import VapaadConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    # path, http(s) URL, "synthetic" or "auto" (cache, else synthetic)
    source: str = "auto"
    cache_dir: str = ""
    n_sequences: int = 1000
    test_fraction: float = 0.1
    split_seed: int = 0
    downscale: int = 1
    # 0: generate exactly n_sequences
    synthetic_sequences: int = 0
    synthetic_seed: int = 0

    def __post_init__(self):
        if self.n_sequences < 2:
            raise ValueError("n_sequences must be >= 2 (train and validation)")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in (0, 1)")
        if self.downscale < 1:
            raise ValueError("downscale must be >= 1")


@dataclass
class OutputConfig:
    checkpoint_every: int = 50
    record_wall_time: bool = False
    image_format: str = "pgm"

    def __post_init__(self):
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0 (0 disables periodic checkpoints)")
        if self.image_format not in ("pgm", "png"):
            raise ValueError("image_format must be 'pgm' or 'png'")


SECTIONS = {"model": VapaadConfig, "train": TrainConfig, "data": DataConfig, "output": OutputConfig}

DESK_PRESET = {
    "model": {"frame_size": [32, 32], "filters": [8, 8, 8]},
    "data": {"n_sequences": 20, "test_fraction": 0.2, "downscale": 2},
    "train": {"batch_size": 4, "steps": 200},
}


@dataclass
class RunConfig:
    model: VapaadConfig = field(default_factory=VapaadConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def to_dict(self) -> dict:
        return {name: _section_dict(getattr(self, name)) for name in SECTIONS}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
        parts = {}
        for name, typ in SECTIONS.items():
            vals = dict(d.get(name, {}))
            _check_keys(name, typ, vals)
            try:
                parts[name] = typ(**vals)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"[{name}] {exc}") from None
        return cls(**parts)

    def to_ini(self) -> str:
        lines = []
        for name, sec in self.to_dict().items():
            lines.append(f"[{name}]")
            for k, v in sec.items():
                lines.append(f"{k} = {_format(v)}")
            lines.append("")
        return "\n".join(lines)


def _section_dict(obj) -> dict:
    if hasattr(obj, "to_dict"):
        return obj.to_dict()
    return dataclasses.asdict(obj)


def _check_keys(section: str, typ, vals: dict) -> None:
    names = {f.name for f in dataclasses.fields(typ)}
    unknown = set(vals) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {sorted(unknown)}; "
                          f"valid keys: {sorted(names)}")


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ", ".join(_format(x) if not isinstance(x, (list, tuple)) else "x".join(map(str, x)) for x in v)
    return str(v)


def _parse_value(section: str, key: str, raw: str, default):
    where = f"[{section}] {key} = {raw!r}"
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError("expected a boolean")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, (list, tuple)):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if key == "kernels":
                return [[int(p) for p in s.split("x")] if "x" in s else int(s) for s in items]
            if key == "frame_size" and len(items) == 1:
                return [int(items[0])] * 2
            return [int(s) for s in items]
        return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _defaults(typ) -> dict:
    return _section_dict(typ())


def parse_ini(text: str, base: dict | None = None) -> dict:
    """Overlay the INI ``text`` onto ``base`` (a :meth:`RunConfig.to_dict`)."""
    cp = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    out = {k: dict(v) for k, v in (base or RunConfig().to_dict()).items()}
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]; valid: {sorted(SECTIONS)}")
        defaults = _defaults(SECTIONS[section])
        for key, raw in cp.items(section):
            if key not in defaults:
                raise ConfigError(f"unknown key {key!r} in [{section}]; valid keys: {sorted(defaults)}")
            out[section][key] = _parse_value(section, key, raw, defaults[key])
    return out


def desk_overlay(d: dict) -> dict:
    out = {k: dict(v) for k, v in d.items()}
    for section, vals in DESK_PRESET.items():
        out[section].update(vals)
    return out


def load_run_config(path=None, desk_scale: bool = False, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the desk preset, then the file, then ``overrides``."""
    d = RunConfig().to_dict()
    if desk_scale:
        d = desk_overlay(d)
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        d = parse_ini(text, d)
    for section, vals in (overrides or {}).items():
        d[section].update(vals)
    return RunConfig.from_dict(d)
