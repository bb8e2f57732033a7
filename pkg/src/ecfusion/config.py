"""Plain-text run configuration.

One ``key = value`` per line; ``#`` starts a comment. Keys are the field
names of :class:`TrainConfig`, :class:`ConflictConfig`, :class:`GridConfig`
and :class:`EvalThresholds` (they do not collide) plus ``out``. Unknown or
repeated keys are errors. Booleans accept true/false/on/off/1/0; tuples are
comma separated.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .pipeline import EvalThresholds, TrainConfig
from .synth import ConflictConfig, GridConfig


class ConfigError(ValueError):
    pass


SECTIONS = (("train", TrainConfig), ("conflict", ConflictConfig), ("grid", GridConfig), ("eval", EvalThresholds))
_TRUE = {"true", "on", "yes", "1"}
_FALSE = {"false", "off", "no", "0"}


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    conflict: ConflictConfig = field(default_factory=ConflictConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    eval: EvalThresholds = field(default_factory=EvalThresholds)
    out: str = "runs"

    def with_values(self, values):
        """Copy with ``{key: value}`` overrides applied (values already typed)."""
        parts = {name: {} for name, _ in SECTIONS}
        out = self.out
        for k, v in values.items():
            if k == "out":
                out = str(v)
                continue
            sec = _KEY_SECTION.get(k)
            if sec is None:
                raise ConfigError(f"unknown config key {k!r}")
            parts[sec][k] = v
        try:
            kw = {name: replace(getattr(self, name), **parts[name]) for name, _ in SECTIONS}
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None
        return RunConfig(out=out, **kw)

    def items(self):
        for name, _ in SECTIONS:
            obj = getattr(self, name)
            for f in fields(obj):
                yield f.name, getattr(obj, f.name)
        yield "out", self.out

    def to_text(self):
        lines = []
        for name, cls in SECTIONS:
            lines.append(f"# {name}")
            obj = getattr(self, name)
            lines.extend(f"{f.name} = {format_value(getattr(obj, f.name))}" for f in fields(cls))
        lines.append(f"out = {self.out}")
        return "\n".join(lines) + "\n"


_KEY_SECTION = {f.name: name for name, cls in SECTIONS for f in fields(cls)}
_DEFAULTS = {k: v for k, v in RunConfig().items()}


def format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_value(key, text):
    if key not in _DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    ref = _DEFAULTS[key]
    t = text.strip()
    try:
        if isinstance(ref, bool):
            low = t.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(t)
        if isinstance(ref, int):
            return int(t)
        if isinstance(ref, float):
            return float(t)
        if isinstance(ref, tuple):
            return tuple(float(x) for x in t.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {text!r}") from None
    return t


def parse_text(text, source="<config>"):
    values = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        if k in values:
            raise ConfigError(f"{source}:{n}: duplicate key {k!r}")
        values[k] = parse_value(k, v)
    return values


def load(path=None, overrides=None):
    """RunConfig from an optional file plus ``{key: text}`` overrides."""
    values = {}
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {str(p)!r}: {e.strerror or e}") from None
        values.update(parse_text(text, str(p)))
    for k, v in (overrides or {}).items():
        values[k] = parse_value(k, v) if isinstance(v, str) else v
    return RunConfig().with_values(values)


def write_resolved(cfg, directory, name="config.resolved"):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / name).write_text(cfg.to_text())
    return d / name
