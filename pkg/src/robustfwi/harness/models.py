"""Synthetic true and initial models, and the acquisition layout."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .. import helmholtz as hz
from .config import ConfigError, ExperimentConfig


def flatten_grid(arr: np.ndarray) -> np.ndarray:
    """Inverse of :meth:`Grid2D.to_array`: ``(nz, nx)`` to the depth-fastest vector."""
    return np.ascontiguousarray(np.asarray(arr).T).ravel()


@dataclass(frozen=True)
class ModelPair:
    true: hz.SlownessModel
    initial: hz.SlownessModel
    active: np.ndarray  # False on nodes held fixed (the water layer)


def make_grid(cfg: ExperimentConfig) -> hz.Grid2D:
    return hz.Grid2D(cfg["grid.nz"], cfg["grid.nx"], cfg["grid.h"])


def true_velocity(cfg: ExperimentConfig) -> np.ndarray:
    """Velocity (m/s) on an ``(nz, nx)`` array.

    A water layer of constant velocity over a background that increases
    linearly with depth, plus step layers ``[depth, jump]`` and Gaussian
    anomalies ``[depth, lateral position, radius, amplitude]``.
    """
    nz, nx, h = cfg["grid.nz"], cfg["grid.nx"], cfg["grid.h"]
    z = np.arange(nz)[:, None] * h
    x = np.arange(nx)[None, :] * h
    water = cfg["model.water_rows"]
    below = np.maximum(z - water * h, 0.0)
    vel = cfg["model.top_velocity"] + cfg["model.velocity_gradient"] * below + 0.0 * x
    for depth, jump in cfg["model.layers"]:
        vel = vel + np.where(z >= depth, jump, 0.0)
    for cz, cx, radius, amplitude in cfg["model.anomalies"]:
        if radius <= 0:
            raise ConfigError("anomaly radius must be positive")
        vel = vel + amplitude * np.exp(-((z - cz) ** 2 + (x - cx) ** 2) / (2.0 * radius**2))
    vel[:water] = cfg["model.water_velocity"]
    return vel


def make_models(cfg: ExperimentConfig) -> ModelPair:
    """True model and a Gaussian-smoothed initial model.

    ``model.smoothing`` is the smoothing standard deviation in grid cells; 0
    gives an initial model equal to the true one. The water rows are known
    and kept exact in the initial model.
    """
    grid = make_grid(cfg)
    vel = true_velocity(cfg)
    sigma = cfg["model.smoothing"]
    vel0 = gaussian_filter(vel, sigma, mode="nearest") if sigma > 0 else vel.copy()
    water = cfg["model.water_rows"]
    vel0[:water] = vel[:water]
    lo, hi = cfg["model.vmin"], cfg["model.vmax"]
    for name, v in (("true", vel), ("initial", vel0)):
        if v.min() < lo or v.max() > hi:
            raise ConfigError(
                f"{name} velocity range [{v.min():.1f}, {v.max():.1f}] m/s is outside [{lo}, {hi}]"
            )
    active = np.ones((grid.nz, grid.nx), dtype=bool)
    active[:water] = False
    return ModelPair(
        true=hz.SlownessModel.from_velocity(grid, flatten_grid(vel)),
        initial=hz.SlownessModel.from_velocity(grid, flatten_grid(vel0)),
        active=flatten_grid(active),
    )


def _lateral(count: int, lo: int, hi: int) -> np.ndarray:
    return np.linspace(lo, hi, count).astype(int) if count > 1 else np.array([(lo + hi) // 2])


def make_acquisition(cfg: ExperimentConfig, grid: hz.Grid2D) -> hz.Acquisition:
    """Surface sources and receivers spread evenly across the grid, no data."""
    nx = grid.nx
    src_x = _lateral(cfg["sources.count"], min(2, nx - 1), max(nx - 3, 0))
    rec_x = _lateral(cfg["receivers.count"], 0, nx - 1)
    src = [grid.index(cfg["sources.depth"], int(i)) for i in src_x]
    rec = [grid.index(cfg["receivers.depth"], int(i)) for i in rec_x]
    omegas = 2.0 * np.pi * np.asarray(cfg["frequencies.hz"], dtype=float)
    weights = np.asarray(cfg["sources.weights"], dtype=float)
    weights = np.broadcast_to(weights, (len(src), omegas.size))
    return hz.Acquisition(grid, src, weights, rec, omegas)
