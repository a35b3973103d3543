"""Observed data with random corruption.

The inversion only ever sees the observed :class:`Acquisition`; the clean
data and the mask live in :class:`Diagnostics`, which only the reporting
code reads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .. import helmholtz as hz
from ..sampling import RandomStream
from .objective import predict

MASK_STREAM = (1,)


@dataclass(frozen=True)
class CorruptionMask:
    """``keep[s, f, r]`` is False where the datum is zeroed out."""

    keep: np.ndarray
    fraction: float
    seed: int

    @classmethod
    def draw(cls, shape, fraction: float, seed: int) -> "CorruptionMask":
        if not 0 <= fraction < 1:
            raise ValueError(f"corruption fraction must lie in [0, 1), got {fraction}")
        gen = RandomStream(seed, MASK_STREAM).generator()
        keep = gen.random(shape) >= fraction
        keep.setflags(write=False)
        return cls(keep, float(fraction), int(seed))

    @property
    def zeroed_fraction(self) -> float:
        return 1.0 - float(self.keep.mean())

    def within_binomial(self, sigmas: float = 4.0) -> bool:
        n = self.keep.size
        sd = math.sqrt(self.fraction * (1.0 - self.fraction) / n)
        return abs(self.zeroed_fraction - self.fraction) <= sigmas * sd


@dataclass(frozen=True)
class Diagnostics:
    clean: np.ndarray
    mask: CorruptionMask


def make_data(true_model: hz.SlownessModel, acq: hz.Acquisition, mask: CorruptionMask):
    """Observed acquisition ``mask * F(x_true) q`` and its diagnostics."""
    clean = predict(true_model, acq)
    if mask.keep.shape != clean.shape:
        raise ValueError(f"mask shape {mask.keep.shape} does not match data shape {clean.shape}")
    observed = acq.with_data(np.where(mask.keep, clean, 0.0))
    return observed, Diagnostics(clean, mask)
