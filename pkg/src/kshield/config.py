"""Plain-text experiment config: ``[section]`` headers over ``key = value`` lines.

Every key maps onto a field of the experiment dataclasses and carries that
field's default; unknown sections or keys are errors. Lists (channels, grid)
are comma-separated; ``none`` clears an optional value; pools read ``8x8``.
"""
from __future__ import annotations

import configparser
from dataclasses import MISSING, dataclass, fields, replace

from .defense import DefenseConfig
from .harness.experiment import AXES, AttackSpec, CurationSpec, DataSpec, ExperimentConfig, FeatureSpec, ModelSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SweepSpec:
    axis: str = "K"
    grid: tuple | None = None       # None takes the axis default grid
    x: str = ""                     # chart x field; empty picks the swept column
    y: str = "attacked_acc"
    series: str = "attack"
    plots: bool = True


@dataclass(frozen=True)
class RunSpec:
    threat: str = "gray"
    seed: int = 0


SECTIONS = {
    "data": DataSpec, "model": ModelSpec, "features": FeatureSpec, "defense": DefenseConfig,
    "attack": AttackSpec, "curation": CurationSpec, "experiment": RunSpec, "sweep": SweepSpec,
}
# nprobe is configured with the index in [features]
HIDDEN = {("defense", "nprobe")}


def _fields(section):
    return [f for f in fields(SECTIONS[section]) if (section, f.name) not in HIDDEN]


def _bool(text):
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _convert(section, name, default, text):
    text = text.strip()
    if name == "pool":
        if text.lower() == "none":
            return None
        h, _, w = text.lower().partition("x")
        return (int(h), int(w or h))
    if name == "grid":
        return None if text.lower() == "none" else tuple(v.strip() for v in text.split(",") if v.strip())
    if name == "step":
        return None if text.lower() == "none" else float(text)
    if isinstance(default, bool):
        return _bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        return tuple(int(v) for v in text.split(","))
    return text


def parse_config(text: str, source="<config>"):
    """Returns (ExperimentConfig, SweepSpec); raises ConfigError naming the offending key."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    values = {}
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]")
        known = {f.name: f for f in _fields(section)}
        kwargs = {}
        for key, raw in cp.items(section):
            if key not in known:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
            f = known[key]
            default = f.default if f.default is not MISSING else None
            try:
                kwargs[key] = _convert(section, key, default, raw)
            except ValueError as exc:
                raise ConfigError(f"{source}: bad value for {section}.{key}: {exc}") from None
        values[section] = kwargs
    try:
        parts = {s: SECTIONS[s](**values.get(s, {})) for s in SECTIONS}
        run = parts["experiment"]
        cfg = ExperimentConfig(parts["data"], parts["model"], parts["features"], parts["defense"],
                               parts["attack"], parts["curation"], run.threat, run.seed)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from None
    sw = parts["sweep"]
    if sw.axis not in AXES:
        raise ConfigError(f"{source}: unknown sweep axis {sw.axis!r}; choose from {', '.join(AXES)}")
    return cfg, sw


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), source=str(path))


def override(cfg: ExperimentConfig, section: str, **kwargs) -> ExperimentConfig:
    """Replace fields of one section (flags override the config file)."""
    if section == "experiment":
        return replace(cfg, **kwargs)
    attr = {"data": "data", "model": "model", "features": "features", "defense": "defense",
            "attack": "attack", "curation": "curation"}[section]
    return replace(cfg, **{attr: replace(getattr(cfg, attr), **kwargs)})


def describe_defaults() -> str:
    """Every config key with its default, grouped by section."""
    lines = []
    for section in SECTIONS:
        lines.append(f"[{section}]")
        for f in _fields(section):
            default = f.default if f.default is not MISSING else None
            if isinstance(default, tuple):
                default = ",".join(str(v) for v in default)
            lines.append(f"  {f.name} = {'none' if default is None else default}")
    return "\n".join(lines)
