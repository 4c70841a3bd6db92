"""Experiment configuration files.

A config is a nested YAML mapping. Loading merges it over the defaults of
its benchmark, validates it and returns plain dicts; :func:`canonical`
renders the sorted, fully defaulted form used for diffs and manifests.
"""

from __future__ import annotations

import copy
from importlib import resources
from pathlib import Path

import yaml

BENCHMARKS = ("boucwen", "vdp", "localization", "synthetic-cone")
PRESETS = ("boucwen-desk", "vdp-desk", "localization-desk", "synthetic-cone")


class ConfigError(ValueError):
    pass


_DEFAULTS = {
    "benchmark": None,
    "seed": None,
    "output_dir": "runs",
    "jobs": 1,
    "data": {},
    "model": {},
    "meta": {},
    "baselines": {},
    "ekf": {},
    "evaluation": {},
    "paths": {},
}

_SECTION_KEYS = {
    "model": {"kind", "H", "H_p", "n_psi", "encoder_hidden", "transition_hidden", "decoder_hidden",
              "decoder_x_hidden", "decoder_y_hidden", "activation", "residual", "output", "output_path",
              "coords", "n_steps", "window_stride", "G", "R"},
    "meta": {"algorithm", "beta_in", "beta_out", "M", "B", "inner_mask", "epochs", "val_fraction", "seed",
             "first_order", "optimizer", "clip_norm", "inference_steps", "context_size", "target_size"},
    "ekf": {"Qw", "Qeta", "P0", "project", "x0_noise"},
    "evaluation": {"adapt_fraction", "adapt_fractions", "n_targets", "n_seeds", "metric"},
    "paths": {"data_dir", "checkpoint", "target"},
}


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate(cfg: dict) -> dict:
    unknown = set(cfg) - set(_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    if cfg.get("benchmark") not in BENCHMARKS:
        raise ConfigError(f"benchmark must be one of {BENCHMARKS}, got {cfg.get('benchmark')!r}")
    if not isinstance(cfg.get("seed"), int) or isinstance(cfg.get("seed"), bool):
        raise ConfigError("seed is mandatory and must be an integer")
    if not isinstance(cfg.get("jobs"), int) or cfg["jobs"] < 1:
        raise ConfigError("jobs must be a positive integer")
    for section, keys in _SECTION_KEYS.items():
        sec = cfg.get(section) or {}
        if not isinstance(sec, dict):
            raise ConfigError(f"section {section!r} must be a mapping")
        bad = set(sec) - keys
        if bad:
            raise ConfigError(f"unknown keys in {section}: {sorted(bad)}")
    for section in ("data", "baselines"):
        if not isinstance(cfg.get(section) or {}, dict):
            raise ConfigError(f"section {section!r} must be a mapping")
    return cfg


def from_dict(d: dict) -> dict:
    return validate(_merge(_DEFAULTS, d))


def preset_path(name: str) -> Path:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
    return Path(str(resources.files("metassm") / "presets" / f"{name}.yaml"))


def load(source, overrides: dict | None = None) -> dict:
    """Load a config file, or a preset by name, and apply ``overrides``."""
    path = Path(source)
    if not path.exists() and str(source) in PRESETS:
        path = preset_path(str(source))
    if not path.exists():
        raise ConfigError(f"config file {source} not found")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return from_dict(_merge(data, overrides or {}))


def canonical(cfg: dict) -> str:
    """Sorted block-style YAML of a validated config."""
    return yaml.safe_dump(validate(copy.deepcopy(cfg)), sort_keys=True, default_flow_style=False)


def parse(text: str) -> dict:
    return from_dict(yaml.safe_load(text) or {})


def dump(cfg: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical(cfg))
    return path
