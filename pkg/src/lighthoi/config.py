"""Run configuration: YAML file + dotted ``key=value`` overrides.

Unknown keys are rejected with the offending dotted path in the message.
"""

from __future__ import annotations

import copy
import json
import os
import platform
from pathlib import Path

import yaml

CONFIG_FORMAT = 1
DATA_ROOT_ENV = "LIGHTHOI_DATA_ROOT"


class ConfigError(ValueError):
    pass


DEFAULTS: dict = {
    "format_version": CONFIG_FORMAT,
    "run": {"out_dir": "runs/latest", "seed": 0, "log_level": "INFO"},
    "data": {
        "root": None,
        "n_sequences": 576,
        "T": 60,
        "fps": 30.0,
        "seed": 0,
        "objects_per_category": 4,
        "n_points": 512,
        "n_basis": 1024,
        "split_ratios": [0.8888888888888888, 0.1111111111111111],
        "split_mode": "by_sequence",
    },
    "model": {
        "preset": "micro",
        "layers": None,
        "model_dim": None,
        "ffn_dim": None,
        "heads": None,
        "condition_dropout_prob": 0.1,
        "K": 100,
        "schedule": "cosine",
    },
    "train": {
        "steps": 2000,
        "batch_size": 32,
        "lr": 1e-4,
        "log_every": 50,
        "checkpoint_every": 0,
        "lam_fs": 1.0,
        "lam_v": 0.02,
        "lam_cont": 0.1,
        "lam_pv": 1.0,
        "lam_otv": 1.0,
        "lam_orv": 1.0,
    },
    "sample": {
        "checkpoint": None,
        "omega1": 0.5,
        "omega2": 3.0,
        "delta": 50,
        "partition": "bh|o",
        "seed": 0,
        "batch_size": 64,
        "n_samples": None,
        "renoise": "fresh",
        "streaming": False,
        "m1_source": "staged",
    },
    "evaluate": {"samples": None},
    "augment": {
        "source": None,
        "n_jobs": 8,
        "targets_per_job": 1,
        "lam_con": 1.0,
        "lam_normal": 0.1,
        "lam_colli": 1.0,
        "lam_init": 0.01,
        "lam_acc": 0.1,
        "iters": 500,
        "optimize_human": False,
        "method": "lbfgs",
        "workers": 1,
    },
    "analyze": {"n_sequences": 64, "repeats": 1},
    "sweep": {"omega2": [0.0, 1.0, 3.0], "delta": [25, 50, 75]},
}


def _parse_value(text: str):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def _merge(base: dict, update: dict, prefix: str = "") -> dict:
    for key, val in update.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key '{path}'")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key '{path}' must be a mapping")
            _merge(base[key], val, path + ".")
        else:
            base[key] = val
    return base


def set_dotted(cfg: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = cfg
    for i, p in enumerate(parts):
        if not isinstance(node, dict) or p not in node:
            raise ConfigError(f"unknown config key '{'.'.join(parts[: i + 1])}'")
        if i == len(parts) - 1:
            if isinstance(node[p], dict):
                raise ConfigError(f"config key '{dotted}' is a section, not a value")
            node[p] = value
        else:
            node = node[p]


def load_config(path=None, overrides=()) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"invalid YAML in {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError("config file must contain a mapping")
        _merge(cfg, data)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not key=value")
        key, _, raw = item.partition("=")
        set_dotted(cfg, key.strip(), _parse_value(raw))
    if cfg["format_version"] != CONFIG_FORMAT:
        raise ConfigError(f"unsupported config format_version {cfg['format_version']}")
    if cfg["data"]["root"] is None:
        cfg["data"]["root"] = os.environ.get(DATA_ROOT_ENV, "data")
    return cfg


def versions() -> dict:
    import numpy
    import scipy
    import torch

    from . import __version__, kernels
    from .core import CONTAINER_VERSION
    from .model import CHECKPOINT_FORMAT

    return {
        "lighthoi": __version__,
        "config_format": CONFIG_FORMAT,
        "container_format": CONTAINER_VERSION,
        "checkpoint_format": CHECKPOINT_FORMAT,
        "kernel_backend": kernels.backend,
        "python": platform.python_version(),
        "numpy": numpy.__version__,
        "scipy": scipy.__version__,
        "torch": torch.__version__,
    }


def write_run_record(cfg: dict, out_dir, command: str) -> Path:
    """Resolved config plus code/format versions next to a run's outputs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.yaml").write_text(yaml.safe_dump(cfg, sort_keys=True))
    record = {"command": command, "versions": versions(), "seeds": {"run": cfg["run"]["seed"], "data": cfg["data"]["seed"], "sample": cfg["sample"]["seed"]}}
    (out_dir / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return out_dir
