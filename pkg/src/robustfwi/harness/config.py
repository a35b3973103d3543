"""Experiment configuration: flat dotted keys read from TOML.

Every key has a default; a config file only lists what it changes. Nested
TOML tables and dotted keys are equivalent (``[grid]\\nnz = 51`` is
``grid.nz = 51``). Unknown keys are errors.
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ..misfit import KINDS as PENALTY_KINDS
from ..sampling import PLAN_KINDS, WEIGHT_KINDS

SOLVERS = ("lbfgs", "growing-sample", "stochastic-gradient", "incremental-gradient")
AUTO = "auto"

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "grid.nz": 51,
    "grid.nx": 76,
    "grid.h": 20.0,
    "frequencies.hz": [3.0, 5.0, 7.0],
    "sources.count": 25,
    "sources.depth": 2,
    "sources.weights": [1.0],
    "receivers.count": 76,
    "receivers.depth": 1,
    # velocities in m/s, depths and distances in m
    "model.water_rows": 5,
    "model.water_velocity": 1500.0,
    "model.top_velocity": 1600.0,
    "model.velocity_gradient": 1.4,
    "model.layers": [],
    "model.anomalies": [[500.0, 750.0, 80.0, 300.0]],
    "model.smoothing": 10.0,
    "model.vmin": 1400.0,
    "model.vmax": 4000.0,
    "corruption.fraction": 0.5,
    "penalty.kind": "students-t",
    "penalty.mu": AUTO,
    "penalty.nu": AUTO,
    "penalty.mu_scale": 0.03,
    "penalty.nu_scale": 0.1,
    "solver.kind": "lbfgs",
    "solver.max_iter": 50,
    "solver.memory": 4,
    "solver.step0": 0.01,
    "solver.gtol": 1e-8,
    "solver.s0": 1,
    "solver.schedule": "increment",
    "solver.rate": 0.9,
    "solver.step_policy": "fixed",
    "solver.alpha": 1e-3,
    "solver.cyclic": False,
    "sampling.kind": "without-replacement",
    "sampling.size": 1,
    "sampling.weights": "rademacher",
    "sampling.granularity": "pair",
    "histogram.bins": 101,
    "histogram.limit": AUTO,
    "parallel.workers": 1,
    "output.dir": "output",
    "output.wall_time": False,
}

OUTPUT_DIR_ENV = "ROBUSTFWI_OUTPUT_DIR"


class ConfigError(ValueError):
    pass


def _flatten(table: dict, prefix: str = "") -> dict[str, Any]:
    flat = {}
    for key, value in table.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, name + "."))
        else:
            flat[name] = value
    return flat


def _coerce(key: str, value: Any, default: Any) -> Any:
    if default == AUTO:
        if value == AUTO:
            return value
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(f"{key} must be 'auto' or a number, got {value!r}")
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string, got {value!r}")
        return value
    if not isinstance(value, list):
        raise ConfigError(f"{key} must be a list, got {value!r}")
    return value


def _number_list(key, value, width=None):
    try:
        rows = [[float(v) for v in row] if width else float(row) for row in value]
    except (TypeError, ValueError):
        raise ConfigError(f"{key} must be a list of numbers{' lists' if width else ''}") from None
    if width and any(len(row) != width for row in rows):
        raise ConfigError(f"every entry of {key} needs {width} numbers")
    return rows


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated flat configuration; ``cfg["grid.nz"]`` reads a value."""

    values: dict[str, Any] = field(default_factory=lambda: dict(DEFAULTS))

    def __post_init__(self):
        unknown = sorted(set(self.values) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        merged = dict(DEFAULTS)
        for key, value in self.values.items():
            merged[key] = _coerce(key, value, DEFAULTS[key])
        object.__setattr__(self, "values", merged)
        self._validate()

    def __getitem__(self, key: str):
        return self.values[key]

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with changes; keyword ``a__b`` stands for key ``a.b``."""
        values = dict(self.values)
        for key, value in changes.items():
            values[key.replace("__", ".")] = value
        return ExperimentConfig(values)

    def to_dict(self) -> dict[str, Any]:
        return dict(sorted(self.values.items()))

    def _validate(self):
        v = self.values
        positive = ["grid.h", "model.water_velocity", "model.top_velocity", "model.vmin", "model.vmax"]
        for key in positive:
            if not v[key] > 0:
                raise ConfigError(f"{key} must be positive")
        if v["grid.nz"] < 3 or v["grid.nx"] < 3:
            raise ConfigError("grid needs at least 3x3 nodes")
        if not 0 <= v["corruption.fraction"] < 1:
            raise ConfigError("corruption.fraction must lie in [0, 1)")
        freqs = _number_list("frequencies.hz", v["frequencies.hz"])
        if not freqs or any(not f > 0 for f in freqs):
            raise ConfigError("frequencies.hz needs positive values")
        weights = _number_list("sources.weights", v["sources.weights"])
        if len(weights) not in (1, len(freqs)):
            raise ConfigError("sources.weights needs one value or one per frequency")
        for kind in ("sources", "receivers"):
            if v[f"{kind}.count"] < 1:
                raise ConfigError(f"{kind}.count must be at least 1")
            if v[f"{kind}.count"] > v["grid.nx"]:
                raise ConfigError(f"{kind}.count exceeds the number of lateral nodes")
            if not 0 <= v[f"{kind}.depth"] < v["grid.nz"]:
                raise ConfigError(f"{kind}.depth is outside the grid")
        if not 0 <= v["model.water_rows"] < v["grid.nz"]:
            raise ConfigError("model.water_rows must leave at least one row of subsurface")
        _number_list("model.layers", v["model.layers"], 2)
        _number_list("model.anomalies", v["model.anomalies"], 4)
        if v["model.smoothing"] < 0:
            raise ConfigError("model.smoothing must be non-negative")
        if v["model.vmin"] >= v["model.vmax"]:
            raise ConfigError("model.vmin must be below model.vmax")
        if v["penalty.kind"] not in PENALTY_KINDS:
            raise ConfigError(f"penalty.kind must be one of {PENALTY_KINDS}")
        for key in ("penalty.mu", "penalty.nu"):
            if v[key] != AUTO and not v[key] > 0:
                raise ConfigError(f"{key} must be positive")
        for key in ("penalty.mu_scale", "penalty.nu_scale"):
            if not v[key] > 0:
                raise ConfigError(f"{key} must be positive")
        if v["solver.kind"] not in SOLVERS:
            raise ConfigError(f"solver.kind must be one of {SOLVERS}")
        if v["solver.max_iter"] < 0 or v["solver.memory"] < 0 or v["solver.s0"] < 1:
            raise ConfigError("solver.max_iter and solver.memory must be >= 0, solver.s0 >= 1")
        if v["solver.schedule"] not in ("increment", "bound"):
            raise ConfigError("solver.schedule must be 'increment' or 'bound'")
        if not 0 < v["solver.rate"] < 1:
            raise ConfigError("solver.rate must lie in (0, 1)")
        if v["solver.step_policy"] not in ("fixed", "passes", "harmonic"):
            raise ConfigError("solver.step_policy must be fixed, passes or harmonic")
        for key in ("solver.step0", "solver.alpha"):
            if not v[key] > 0:
                raise ConfigError(f"{key} must be positive")
        if v["sampling.kind"] not in PLAN_KINDS:
            raise ConfigError(f"sampling.kind must be one of {PLAN_KINDS}")
        if v["sampling.weights"] not in WEIGHT_KINDS:
            raise ConfigError(f"sampling.weights must be one of {WEIGHT_KINDS}")
        if v["sampling.size"] < 1:
            raise ConfigError("sampling.size must be at least 1")
        if v["sampling.granularity"] not in ("pair", "source"):
            raise ConfigError("sampling.granularity must be 'pair' or 'source'")
        if v["histogram.bins"] < 1 or v["histogram.bins"] % 2 == 0:
            raise ConfigError("histogram.bins must be a positive odd number (a bin centred on zero)")
        if v["histogram.limit"] != AUTO and not v["histogram.limit"] > 0:
            raise ConfigError("histogram.limit must be positive")
        if v["parallel.workers"] < 1:
            raise ConfigError("parallel.workers must be at least 1")
        if not math.isfinite(v["solver.gtol"]) or v["solver.gtol"] < 0:
            raise ConfigError("solver.gtol must be non-negative")


def load_config(path, env: dict | None = None) -> ExperimentConfig:
    """Read a TOML config; the output-directory env var overrides ``output.dir``."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            table = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    values = _flatten(table)
    env = env if env is not None else {}
    if env.get(OUTPUT_DIR_ENV):
        values["output.dir"] = env[OUTPUT_DIR_ENV]
    return ExperimentConfig(values)


def dumps(cfg: ExperimentConfig) -> str:
    """TOML text for a config, one dotted key per line."""
    lines = []
    for key, value in cfg.to_dict().items():
        lines.append(f"{key} = {_toml_value(value)}")
    return "\n".join(lines) + "\n"


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    return str(value)
