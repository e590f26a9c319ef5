"""Experiment configuration: INI file with sections, flat key namespace.

Every key can be overridden by a command-line flag of the same name. The
resolved configuration (without paths) plus the content hashes of the input
stores determine the config hash stamped on every output artifact.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from pathlib import Path

from .errors import ValidationError


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _sizes(text):
    if isinstance(text, (list, tuple)):
        return [int(x) for x in text]
    return [int(x) for x in str(text).replace(";", ",").split(",") if x.strip()]


# key -> (section, type, default)
SCHEMA = {
    "encoder_id": ("experiment", str, "synth"),
    "aggregation": ("experiment", str, "identity"),
    "architecture": ("experiment", str, "auto"),
    "seed": ("experiment", int, 0),
    "protocol": ("experiment", str, "loo"),
    "threshold": ("experiment", float, 0.5),
    "jobs": ("experiment", int, 1),
    "target": ("experiment", str, ""),
    "sizes": ("experiment", _sizes, [10, 30, 100, 300, 1000]),
    "k": ("experiment", int, 3),
    "lr": ("train", float, 1e-3),
    "batch_size": ("train", int, 32),
    "max_epochs": ("train", int, 200),
    "patience": ("train", int, 10),
    "min_delta": ("train", float, 1e-4),
    "weight_decay": ("train", float, 1e-2),
    "standardize": ("train", _bool, False),
    "pairs": ("synth", int, 1000),
    "nonmember_pairs": ("synth", int, 0),
    "alignment_gap": ("synth", float, -1.0),
    "member_noise": ("synth", float, 0.5),
    "dim": ("synth", int, 32),
    "map_layers": ("synth", int, 0),
    "semantic_dim": ("synth", int, 16),
    "content_scale": ("synth", float, 0.5),
    "short_multiplier": ("synth", float, 3.0),
    "offset_scale": ("synth", float, 0.1),
    "sample_rate": ("reference", int, 16000),
    "n_bands": ("reference", int, 32),
    "n_frames": ("reference", int, 64),
}

TRAIN_KEYS = ("lr", "batch_size", "max_epochs", "patience", "min_delta", "weight_decay", "seed", "standardize")


def _convert(key, value):
    _, typ, _ = SCHEMA[key]
    try:
        return typ(value)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"config key {key!r}: cannot parse {value!r} ({exc})") from None


def load_config(path=None, overrides=None) -> dict:
    """Defaults <- INI file <- command-line overrides (None values ignored)."""
    cfg = {k: (list(d) if isinstance(d, list) else d) for k, (_, _, d) in SCHEMA.items()}
    if path:
        parser = configparser.ConfigParser()
        text = Path(path).read_text(encoding="utf-8")
        try:
            parser.read_string(text, source=str(path))
        except configparser.Error as exc:
            raise ValidationError(f"{path}: {exc}") from None
        for section in parser.sections():
            for key, value in parser.items(section):
                if key not in SCHEMA:
                    raise ValidationError(f"{path}: unknown config key {key!r} in [{section}]")
                cfg[key] = _convert(key, value)
    for key, value in (overrides or {}).items():
        if value is not None and key in SCHEMA:
            cfg[key] = _convert(key, value)
    return cfg


def train_config_kwargs(cfg: dict) -> dict:
    return {k: cfg[k] for k in TRAIN_KEYS}


def config_hash(cfg: dict, inputs=()) -> str:
    """Hash of resolved settings plus input content hashes (paths excluded)."""
    # parallelism never changes results, so it stays out of the hash
    settings = {k: v for k, v in cfg.items() if k != "jobs"}
    payload = json.dumps({"config": settings, "inputs": list(inputs)}, sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def to_ini(cfg: dict) -> str:
    sections: dict = {}
    for key, (section, _, _) in SCHEMA.items():
        value = cfg[key]
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        sections.setdefault(section, []).append(f"{key} = {value}")
    return "\n".join(f"[{s}]\n" + "\n".join(lines) + "\n" for s, lines in sections.items())
