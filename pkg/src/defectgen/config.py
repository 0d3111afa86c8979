"""Run configuration: one INI-style file with typed sections, strict key
checking, and a stable content hash embedded in every output."""

from __future__ import annotations

import configparser
import hashlib
import json
from pathlib import Path

from .errors import ConfigError

# section -> key -> (type, default); None default means the key is mandatory
SCHEMA: dict[str, dict[str, tuple]] = {
    "run": {
        "seed": (int, None),
        "out_root": (str, "runs"),
    },
    "dataset": {
        "root": (str, "data/toy"),
        "split": (str, "train"),
        "val_split": (str, "val"),
        "count": (int, 25),
        "val_count": (int, 50),
        "resolution": (int, 32),
        "n_defect": (int, 2),
        "defect_kinds": (str, ""),
    },
    "schedule": {
        "t": (int, 200),
        "beta_start": (float, 0.0),  # 0 -> rescaled 1000-step endpoints
        "beta_end": (float, 0.0),
    },
    "model_large": {
        "preset": (str, "large"),
        "channel_scale": (float, 0.125),
    },
    "model_small": {
        "preset": (str, "small"),
        "channel_scale": (float, 0.125),
    },
    "train": {
        "learning_rate": (float, 1e-4),
        "batch_size": (int, 2),
        "iterations": (int, 2000),
        "weight_decay": (float, 2e-3),
        "checkpoint_every": (int, 0),
    },
    "sampler": {
        "u": (int, 10),
        "count": (int, 16),
    },
    "metrics": {
        "extractor_seed": (int, 0),
    },
    "qc": {
        "rules": (str, ""),
        "unlisted_policy": (str, "forbidden"),
    },
    "augment": {
        "ratio": (float, 1.0),
        "ratios": (str, "0,1.0"),
        "seeds": (str, "0,1,2,3,4"),
    },
    "seg": {
        "epochs": (int, 20),
        "learning_rate": (float, 1e-3),
        "batch_size": (int, 8),
        "backbone": (str, "tiny-unet"),
    },
}


class RunConfig:
    def __init__(self, values: dict[str, dict]):
        self.values = values

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    @property
    def seed(self) -> int:
        return self.values["run"]["seed"]

    def hash(self) -> str:
        blob = json.dumps(self.values, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def dump(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.values, indent=1, sort_keys=True),
                              encoding="utf-8")

    @classmethod
    def defaults(cls, seed: int) -> "RunConfig":
        values = {sec: {k: spec[1] for k, spec in keys.items()} for sec, keys in SCHEMA.items()}
        values["run"]["seed"] = seed
        return cls(values)


def load_config(path: Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser()
    cp.read(path, encoding="utf-8")

    values: dict[str, dict] = {}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
    for section, keys in SCHEMA.items():
        values[section] = {}
        present = dict(cp[section]) if cp.has_section(section) else {}
        for key in present:
            if key not in keys:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
        for key, (typ, default) in keys.items():
            if key in present:
                raw = present[key]
                try:
                    values[section][key] = typ(raw)
                except ValueError:
                    raise ConfigError(
                        f"[{section}] {key}: cannot parse {raw!r} as {typ.__name__}") from None
            elif default is None:
                raise ConfigError(f"[{section}] {key} is mandatory")
            else:
                values[section][key] = default
    return RunConfig(values)


def parse_int_list(raw: str) -> list[int]:
    return [int(x) for x in raw.split(",") if x.strip()]


def parse_float_list(raw: str) -> list[float]:
    return [float(x) for x in raw.split(",") if x.strip()]
