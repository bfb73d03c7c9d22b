"""INI configuration with a fixed schema; unknown sections or keys are hard errors.

Example::

    [dataset]
    noise = 0.05
    train = 600

    [model]
    kind = equilopo
    blocks = 2
    downsample_before = 0

    [train]
    lr = 0.005
    epochs = 5
"""

from __future__ import annotations

import configparser
import re

from .dataset import DatasetSpec
from .train import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; the message carries ``path:line``."""


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str) -> tuple:
    s = s.strip()
    return tuple(int(t) for t in s.split(",") if t.strip()) if s else ()


SCHEMA = {
    "dataset": {
        "classes": int,
        "size": int,
        "arc_length": float,
        "tube_sigma": float,
        "noise": float,
        "shift": float,
        "train": int,
        "val": int,
        "test": int,
        "train_rotation": str,
        "val_rotation": str,
        "test_rotation": str,
        "seed": int,
    },
    "model": {
        "kind": str,
        "blocks": int,
        "width": int,
        "width_schedule": str,
        "mode": str,
        "activation": str,
        "gate": str,
        "classes": int,
        "dropout": float,
        "L_filter": int,
        "input_pool": int,
        "downsample_before": _ints,
        "bias": _bool,
        "seed": int,
        "widths": _ints,
        "input_size": int,
    },
    "train": {
        "lr": float,
        "epochs": int,
        "batch_size": int,
        "seed": int,
        "recalibrate": int,
        "beta1": float,
        "beta2": float,
        "eps": float,
    },
    "paths": {
        "data": str,
        "checkpoint": str,
        "metrics": str,
    },
}


def _locate(text: str, section: str, key: str | None = None) -> int:
    """1-based line of a section header (or of a key inside it); 0 if not found."""
    current = None
    for no, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"\[(.+)\]$", s)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return no
            continue
        if key is not None and current == section:
            k = re.split(r"[=:]", s, maxsplit=1)[0].strip()
            if k.lower() == key.lower():
                return no
    return 0


def parse(text: str, path: str = "<config>") -> dict:
    """Parse and type-check a config; returns ``{section: {key: value}}``."""
    cp = configparser.ConfigParser(interpolation=None, strict=True)
    cp.optionxform = str
    try:
        cp.read_string(text, source=path)
    except configparser.Error as exc:
        line = getattr(exc, "lineno", 0)
        msg = str(exc).splitlines()[0]
        raise ConfigError(f"{path}:{line}: {msg}") from None
    out = {}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{path}:{_locate(text, section)}: unknown section [{section}]")
        out[section] = {}
        for key, raw in cp.items(section):
            line = _locate(text, section, key)
            conv = SCHEMA[section].get(key)
            if conv is None:
                raise ConfigError(f"{path}:{line}: unknown key {key!r} in section [{section}]")
            try:
                out[section][key] = conv(raw)
            except ValueError as exc:
                raise ConfigError(f"{path}:{line}: bad value for {key!r}: {exc}") from None
    return out


def load(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from None
    return parse(text, str(path))


def dataset_spec(cfg: dict, seed: int | None = None) -> DatasetSpec:
    d = dict(cfg.get("dataset", {}))
    spec = DatasetSpec()
    counts = dict(spec.counts)
    rotations = dict(spec.rotations)
    for split in ("train", "val", "test"):
        if split in d:
            counts[split] = d.pop(split)
        if f"{split}_rotation" in d:
            rotations[split] = d.pop(f"{split}_rotation")
    for k, v in d.items():
        setattr(spec, k, v)
    spec.counts, spec.rotations = counts, rotations
    if seed is not None:
        spec.seed = seed
    spec.validate()
    return spec


def model_description(cfg: dict, seed: int | None = None) -> dict:
    m = {"kind": "equilopo", **cfg.get("model", {})}
    if seed is not None:
        m["seed"] = seed
    if m["kind"] == "cnn":
        bad = set(m) - {"kind", "widths", "classes", "input_size", "input_pool", "seed"}
    elif m["kind"] == "equilopo":
        bad = {"widths", "input_size"} & set(m)
    else:
        raise ConfigError(f"unknown model kind {m['kind']!r}")
    if bad:
        raise ConfigError(f"keys {sorted(bad)} do not apply to model kind {m['kind']!r}")
    return m


def train_config(cfg: dict, seed: int | None = None) -> TrainConfig:
    t = dict(cfg.get("train", {}))
    b1, b2 = t.pop("beta1", 0.9), t.pop("beta2", 0.999)
    tc = TrainConfig(**t, betas=(b1, b2))
    if seed is not None:
        tc.seed = seed
    tc.validate()
    return tc
