"""Experiment configuration: flat key=value files, presets, and merging.

Config files are plain text, one ``KEY = value`` per line, ``#`` comments.
Values merge in precedence order preset < config file < command line, all
kept as strings until a single typed-coercion pass, so every layer follows
identical parsing rules.
"""

from __future__ import annotations

from .harness import SWEEP_FIELDS, ExperimentSpec
from .scenario import ScenarioConfig


class ConfigError(ValueError):
    """Malformed configuration text or an invalid setting value."""


def _float_or_none(s: str):
    return None if s.strip().lower() == "none" else float(s)


def _float_tuple(s: str) -> tuple:
    parts = [p.strip() for p in s.split(",") if p.strip()]
    if not parts:
        raise ValueError("empty list")
    return tuple(float(p) for p in parts)


def _str_tuple(s: str) -> tuple:
    parts = [p.strip() for p in s.split(",") if p.strip()]
    if not parts:
        raise ValueError("empty list")
    return tuple(parts)


SCENARIO_KEYS = {
    "m": int,
    "n1": int,
    "n2": int,
    "k": int,
    "p": int,
    "q": int,
    "l1": int,
    "l2": int,
    "snr_db": float,
    "carrier_hz": float,
    "bs_ris_distance_m": float,
    "ue_distance_lo": float,
    "ue_distance_hi": float,
    "l2_overestimate": int,
    "min_separation": _float_or_none,
}

EXPERIMENT_KEYS = {
    "sweep_field": str,
    "sweep_values": _float_tuple,
    "trials": int,
    "seed": int,
    "algorithms": _str_tuple,
    "p_mis": float,
    "out": str,
    "format": str,
    "trial_dump": str,
    "workers": int,
}

# Preset values stay strings so they run through the same coercion as files.
PRESETS = {
    "desk": {"trials": "200"},
    "paper": {
        "m": "64",
        "n1": "16",
        "n2": "16",
        "k": "8",
        "p": "128",
        "q": "16",
        "trials": "1000",
    },
}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """``KEY = value`` lines to a raw string dict; rejects malformed lines."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected KEY = value, got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not key or not value:
            raise ConfigError(f"{source}:{lineno}: empty key or value in {raw!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
    return parse_config_text(text, source=path)


def merge_settings(*layers: dict) -> dict:
    """Later layers win; ``None`` values (unset CLI flags) are skipped."""
    merged = {}
    for layer in layers:
        for key, value in layer.items():
            if value is not None:
                merged[key] = str(value)
    return merged


def resolve_settings(settings: dict) -> dict:
    """Typed values for every known key; unknown keys are an error."""
    known = dict(SCENARIO_KEYS)
    known.update(EXPERIMENT_KEYS)
    unknown = sorted(set(settings) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    typed = {}
    for key, value in settings.items():
        try:
            typed[key] = known[key](value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {value!r} ({exc})") from exc
    return typed


def build_scenario(typed: dict) -> ScenarioConfig:
    """ScenarioConfig from typed settings (experiment keys ignored)."""
    kwargs = {k: typed[k] for k in SCENARIO_KEYS if k in typed}
    lo = kwargs.pop("ue_distance_lo", None)
    hi = kwargs.pop("ue_distance_hi", None)
    if lo is not None or hi is not None:
        d_lo, d_hi = ScenarioConfig().ue_distance_range_m
        kwargs["ue_distance_range_m"] = (
            lo if lo is not None else d_lo,
            hi if hi is not None else d_hi,
        )
    try:
        return ScenarioConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def build_experiment(typed: dict) -> ExperimentSpec:
    """ExperimentSpec from typed settings (scenario keys feed the base)."""
    base = build_scenario(typed)
    kwargs = {"base": base}
    rename = {"out": "output_path", "format": "output_format", "trial_dump": "trial_dump_path"}
    for key in EXPERIMENT_KEYS:
        if key in typed:
            kwargs[rename.get(key, key)] = typed[key]
    if kwargs.get("sweep_field") not in (None,) + SWEEP_FIELDS:
        raise ConfigError(
            f"sweep_field {kwargs['sweep_field']!r} not in {SWEEP_FIELDS}"
        )
    try:
        return ExperimentSpec(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
