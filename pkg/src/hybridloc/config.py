"""Flat ``key = value`` run configuration mapped onto :class:`BenchmarkConfig`."""

from __future__ import annotations

import dataclasses
import math
from typing import Any, Callable

from .cellgrid import GeoPoint
from .pipeline import BenchmarkConfig


class ConfigError(ValueError):
    pass


# key -> (section, field); section None means a BenchmarkConfig field.
_SECTIONS = {"world": "world", "train": "train", "loss": "loss"}
_TOP = {
    "levels.prototype": "prototype_level",
    "levels.aerial": "aerial_level",
    "data.n_train_places": "n_train_places",
    "data.n_test_places": "n_test_places",
    "data.density_bumps": "density_bumps",
    "data.density_background": "density_background",
    "eval.Ks": "Ks",
    "eval.distance_factors": "distance_factors",
    "eval.kappa_factors": "kappa_factors",
    "eval.calibration_queries": "calibration_queries",
    "eval.gap_fraction": "gap_fraction",
}
_OPTIONAL = {"loss.neg_exclusion_radius": float, "train.hidden": int}
_SKIP = {"world.seed", "world.region_center", "train.seed", "train.loss"}


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parser_for(key: str, default: Any) -> Callable[[str], Any]:
    if key in _OPTIONAL:
        inner = _OPTIONAL[key]
        return lambda t: None if t.lower() == "none" else inner(t)
    if isinstance(default, bool):
        return _parse_bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    if isinstance(default, str):
        return str
    if isinstance(default, tuple):
        elem = type(default[0]) if default else float
        return lambda t: tuple(elem(x) for x in t.split(",") if x.strip())
    raise TypeError(f"no parser for {key}")


def _format(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    return str(value)


def _flatten(cfg: BenchmarkConfig) -> dict[str, Any]:
    out: dict[str, Any] = {"seed": cfg.train.seed}
    c = cfg.world.region_center
    out["world.region_center_deg"] = (math.degrees(c.lat), math.degrees(c.lon))
    for section, obj in (("world", cfg.world), ("train", cfg.train), ("loss", cfg.train.loss)):
        for f in dataclasses.fields(obj):
            key = f"{section}.{f.name}"
            if key not in _SKIP:
                out[key] = getattr(obj, f.name)
    for key, name in _TOP.items():
        out[key] = getattr(cfg, name)
    return out


def known_keys() -> list[str]:
    return sorted(_flatten(BenchmarkConfig()))


def parse_config(text: str, base: BenchmarkConfig | None = None, source: str = "<config>") -> BenchmarkConfig:
    """Apply ``key = value`` lines (``#`` comments allowed) on top of ``base``."""
    base = BenchmarkConfig() if base is None else base
    defaults = _flatten(base)
    values: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, _, val = (p.strip() for p in line.partition("="))
        if key not in defaults:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = _parser_for(key, defaults[key])(val)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    try:
        return _build(base, values)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{source}: {exc}") from None


def apply_overrides(cfg: BenchmarkConfig, pairs: list[str]) -> BenchmarkConfig:
    return parse_config("\n".join(pairs), cfg, source="--set")


def _build(base: BenchmarkConfig, values: dict[str, Any]) -> BenchmarkConfig:
    sections: dict[str, dict[str, Any]] = {"world": {}, "train": {}, "loss": {}}
    top: dict[str, Any] = {}
    for key, val in values.items():
        if key == "seed":
            continue
        if key == "world.region_center_deg":
            if len(val) != 2:
                raise ValueError("world.region_center_deg needs lat,lon")
            sections["world"]["region_center"] = GeoPoint.from_degrees(*val)
        elif key in _TOP:
            top[_TOP[key]] = val
        else:
            section, name = key.split(".", 1)
            sections[section][name] = val
    loss = dataclasses.replace(base.train.loss, **sections["loss"])
    train = dataclasses.replace(base.train, loss=loss, **sections["train"])
    world = dataclasses.replace(base.world, **sections["world"])
    cfg = dataclasses.replace(base, world=world, train=train, **top)
    if cfg.aerial_level - cfg.prototype_level not in (0, 1, 2):
        raise ValueError("levels.aerial - levels.prototype must be 0, 1 or 2")
    if "seed" in values:
        cfg = cfg.with_seed(values["seed"])
    return cfg


def resolved_text(cfg: BenchmarkConfig) -> str:
    """Every key with its effective value, sorted; parses back to ``cfg``."""
    return "".join(f"{k} = {_format(v)}\n" for k, v in sorted(_flatten(cfg).items()))
