"""Flat ``key = value`` experiment configs with preset inheritance.

A file may start with ``preset = desk`` (a built-in name) or
``preset = other.cfg`` (a path relative to the file); its keys then
override the inherited ones. Nested settings use dotted keys, e.g.
``model.embed_dim = 64`` or ``synth.n_speakers_train = 16``.
"""

from __future__ import annotations

import ast
from dataclasses import fields
from pathlib import Path

from .data import SPLITS, SynthConfig
from .model import ModelConfig
from .training import TrainConfig, desk_preset
from .validation import atomic_write

BUILTIN_PRESETS = {"full": TrainConfig, "desk": desk_preset}
ALIASES = {"lambda": "lam"}
_NESTED = {
    "model": {f.name for f in fields(ModelConfig)},
    "synth": {f.name for f in fields(SynthConfig)} - {"split"} | {f"n_speakers_{s}" for s in SPLITS},
}
_TOP = {f.name for f in fields(TrainConfig)} - set(_NESTED)


def parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null"):
        return None
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def parse_lines(lines, source: str = "<config>") -> list[tuple[str, object]]:
    out = []
    for k, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{k}: expected 'key = value', got {raw.rstrip()!r}")
        key, value = line.split("=", 1)
        out.append((key.strip(), parse_value(value)))
    return out


def _check_key(key: str) -> str:
    key = ALIASES.get(key, key)
    if "." in key:
        group, name = key.split(".", 1)
        if group not in _NESTED or name not in _NESTED[group]:
            raise ValueError(f"unknown config key {key!r}")
    elif key not in _TOP:
        raise ValueError(f"unknown config key {key!r}")
    return key


def apply_overrides(cfg: TrainConfig, pairs) -> TrainConfig:
    d = cfg.to_dict()
    for key, value in pairs:
        key = _check_key(key)
        if "." in key:
            group, name = key.split(".", 1)
            d[group] = {**d[group], name: value}
        else:
            d[key] = value
    return TrainConfig.from_dict(d)


def load_config(path=None, overrides=(), _seen=None) -> TrainConfig:
    """Resolve a config file (or the full-scale defaults when ``path`` is None)."""
    if path is None:
        return apply_overrides(TrainConfig(), overrides)
    path = Path(path)
    _seen = set() if _seen is None else _seen
    if path.resolve() in _seen:
        raise ValueError(f"preset cycle through {path}")
    _seen.add(path.resolve())
    pairs = parse_lines(path.read_text().splitlines(), str(path))
    base = TrainConfig()
    presets = [v for k, v in pairs if k == "preset"]
    if len(presets) > 1:
        raise ValueError(f"{path}: more than one preset line")
    if presets:
        name = str(presets[0])
        if name in BUILTIN_PRESETS:
            base = BUILTIN_PRESETS[name]()
        else:
            base = load_config(path.parent / name, (), _seen)
    body = [(k, v) for k, v in pairs if k != "preset"]
    return apply_overrides(base, [*body, *overrides])


def parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ValueError(f"override must look like key=value, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), parse_value(value)


def format_config(cfg: TrainConfig) -> str:
    d = cfg.to_dict()
    lines = []
    for key in sorted(_TOP):
        lines.append(f"{'lambda' if key == 'lam' else key} = {d[key]!r}")
    for group in sorted(_NESTED):
        for name, value in sorted(d[group].items()):
            lines.append(f"{group}.{name} = {value!r}")
    return "\n".join(lines) + "\n"


def write_config(path, cfg: TrainConfig) -> None:
    with atomic_write(path, "w") as f:
        f.write(format_config(cfg))
