"""Experiment configuration: YAML schema with defaults and path-aware validation."""
from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path

import yaml

from .pde import PROBLEMS

# section -> key -> (default, kind). kinds: int+ (positive int), int0 (>= 0),
# float+ (> 0), float0 (>= 0), float, str, bool, list, list?, optional
SCHEMA: dict[str, dict[str, tuple]] = {
    "problem": {
        "name": ("heat1d", "problem"),
        "dim": (None, "int+?"),
        "phi_true": (None, "list?"),
    },
    "data": {
        "N_u": (50, "int+"),
        "N_f": (30, "int0"),
        "seed": (0, "int0"),
        "tau_u2": (1e-6, "float+"),
        "tau_f2": (1e-6, "float+"),
    },
    "pretrain": {
        "N_col": (100, "int+"),
        "n_iter": (2000, "int+"),
        "seed": (1, "int0"),
        "hidden": ([32, 32], "list"),
        "w_data": (1.0, "float0"),
        "w_PDE": (1.0, "float0"),
        "w_GP": (1.0, "float0"),
        "lr": (1e-3, "float+"),
        "beta1": (0.9, "float0"),
        "beta2": (0.999, "float0"),
        "eps": (1e-8, "float+"),
        "phi_init": (None, "list?"),
        "psi_init": (None, "list?"),
    },
    "hmc": {
        "n_warmup": (1500, "int0"),
        "n_samples": (8500, "int+"),
        "n_leapfrog": (20, "int+"),
        "step_size": (0.05, "float+"),
        "target_accept": (0.8, "float+"),
        "mass": (None, "list?"),
        "seed": (2, "int0"),
        "gradient": ("analytic", "str"),
        "step_jitter": (0.1, "float0"),
    },
    "predict": {
        "thinning": (10, "int+"),
        "grid_n": (21, "int+"),
    },
    "output": {
        "dir": ("runs/default", "str"),
        "slow": (False, "bool"),
    },
}


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def _check(path: str, value, kind: str):
    optional = kind.endswith("?")
    kind = kind.rstrip("?")
    if value is None:
        if optional:
            return None
        raise ConfigError(path, "value required")
    if kind == "problem":
        if value not in PROBLEMS:
            raise ConfigError(path, f"unknown problem '{value}' (expected one of {sorted(PROBLEMS)})")
        return value
    if kind.startswith("int"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        if kind == "int+" and value < 1:
            raise ConfigError(path, f"must be positive, got {value}")
        if kind == "int0" and value < 0:
            raise ConfigError(path, f"must be non-negative, got {value}")
        return value
    if kind.startswith("float"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        value = float(value)
        if kind == "float+" and not value > 0:
            raise ConfigError(path, f"must be positive, got {value}")
        if kind == "float0" and value < 0:
            raise ConfigError(path, f"must be non-negative, got {value}")
        return value
    if kind == "list":
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return list(value)
    if kind == "str":
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    raise AssertionError(kind)


@dataclass
class ExperimentConfig:
    """Parsed configuration; ``values`` mirrors SCHEMA with every default filled in."""

    values: dict
    defaulted: list[str]

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def to_dict(self) -> dict:
        return copy.deepcopy(self.values)

    @property
    def overrides(self) -> dict:
        p = self.values["problem"]
        out = {}
        if p["dim"] is not None:
            out["dim"] = p["dim"]
        if p["phi_true"] is not None:
            out["phi_true"] = p["phi_true"]
        return out


def parse(doc: dict | None) -> ExperimentConfig:
    doc = {} if doc is None else doc
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "config must be a mapping")
    for key in doc:
        if key not in SCHEMA:
            raise ConfigError(key, "unknown section")
    values, defaulted = {}, []
    for section, fields in SCHEMA.items():
        given = doc.get(section) or {}
        if not isinstance(given, dict):
            raise ConfigError(section, "section must be a mapping")
        for key in given:
            if key not in fields:
                raise ConfigError(f"{section}.{key}", "unknown key")
        values[section] = {}
        for key, (default, kind) in fields.items():
            path = f"{section}.{key}"
            if key in given:
                values[section][key] = _check(path, given[key], kind)
            else:
                values[section][key] = copy.deepcopy(default)
                defaulted.append(path)
    _cross_checks(values)
    return ExperimentConfig(values, defaulted)


def _cross_checks(v: dict) -> None:
    if not any(v["pretrain"][k] > 0 for k in ("w_data", "w_PDE", "w_GP")):
        raise ConfigError("pretrain.w_data", "at least one loss weight must be positive")
    if not 0.4 < v["hmc"]["target_accept"] < 0.99:
        raise ConfigError("hmc.target_accept", "must lie in (0.4, 0.99)")
    if v["hmc"]["gradient"] not in ("analytic", "fd"):
        raise ConfigError("hmc.gradient", "expected 'analytic' or 'fd'")
    if not v["hmc"]["step_jitter"] < 1.0:
        raise ConfigError("hmc.step_jitter", "must lie in [0, 1)")
    for k in ("beta1", "beta2"):
        if not v["pretrain"][k] < 1:
            raise ConfigError(f"pretrain.{k}", "must be < 1")
    if any(not isinstance(h, int) or h < 1 for h in v["pretrain"]["hidden"]):
        raise ConfigError("pretrain.hidden", "widths must be positive integers")
    if v["problem"]["name"] == "heat1d" and v["problem"]["dim"] not in (None, 1):
        raise ConfigError("problem.dim", "heat1d has a fixed spatial dimension of 1")
    seeds = [v["data"]["seed"], v["pretrain"]["seed"], v["hmc"]["seed"]]
    if len(set(seeds)) != 3:
        raise ConfigError("hmc.seed", "data, pretrain and hmc seeds must differ")


def load(path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise ConfigError("<root>", f"not valid YAML ({err})") from err
    return parse(doc)


def dump(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
