"""Sample-average approximations of a finite-sum misfit.

A population of ``m`` subfunctions ``phi_i`` with ``phi = mean(phi_i)`` is
approximated either by uniform index sampling (with or without
replacement) or, for least-squares misfits with a shared forward operator,
by random weighted averages of the experiments ("data averaging").
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

WITHOUT_REPLACEMENT = "without-replacement"
WITH_REPLACEMENT = "with-replacement"
DATA_AVERAGING = "data-averaging"
PLAN_KINDS = (WITHOUT_REPLACEMENT, WITH_REPLACEMENT, DATA_AVERAGING)
WEIGHT_KINDS = ("rademacher", "gaussian")


@dataclass(frozen=True)
class RandomStream:
    """Reproducible random stream identified by ``(seed, stream)``.

    Child streams for parallel workers are derived with :meth:`child`, so the
    draws never depend on scheduling.
    """

    seed: int
    stream: tuple[int, ...] = (0,)

    def __post_init__(self):
        stream = self.stream if isinstance(self.stream, tuple) else (int(self.stream),)
        object.__setattr__(self, "stream", stream)

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=int(self.seed) & (2**64 - 1), spawn_key=self.stream)
        return np.random.Generator(np.random.PCG64(ss))

    def child(self, worker: int) -> "RandomStream":
        return RandomStream(self.seed, self.stream + (int(worker),))


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, RandomStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError(f"expected RandomStream or numpy Generator, got {type(rng).__name__}")


@dataclass(frozen=True)
class SamplePlan:
    kind: str
    size: int
    weights: str = "rademacher"

    def __post_init__(self):
        if self.kind not in PLAN_KINDS:
            raise ValueError(f"unknown sample plan {self.kind!r}; expected one of {PLAN_KINDS}")
        if self.weights not in WEIGHT_KINDS:
            raise ValueError(f"unknown weight distribution {self.weights!r}")
        if int(self.size) < 1:
            raise ValueError(f"sample size must be at least 1, got {self.size}")

    def validate(self, m: int):
        if self.kind == WITHOUT_REPLACEMENT and self.size > m:
            raise ValueError(f"cannot draw {self.size} distinct indices from a population of {m}")

    @property
    def is_index(self) -> bool:
        return self.kind != DATA_AVERAGING


def draw(plan: SamplePlan, m: int, rng) -> np.ndarray:
    """Indices (index plans) or an ``m x s`` weight matrix (data averaging).

    Weight entries have unit variance, so ``E[W W^T] = s I``.
    """
    plan.validate(m)
    gen = as_generator(rng)
    s = int(plan.size)
    if plan.kind == WITHOUT_REPLACEMENT:
        return gen.choice(m, size=s, replace=False)
    if plan.kind == WITH_REPLACEMENT:
        return gen.integers(0, m, size=s)
    if plan.weights == "rademacher":
        return 2.0 * gen.integers(0, 2, size=(m, s)) - 1.0
    return gen.standard_normal((m, s))


Evaluation = tuple[float, np.ndarray]


@dataclass
class PopulationView:
    """A fixed population ``{phi_i}`` of size ``m``.

    ``evaluate(i, x)`` returns ``(phi_i(x), grad phi_i(x))``. ``evaluate_batch``
    (optional) returns the mean over a sorted index multiset in one call;
    ``evaluate_averaged(x, W)`` returns ``(1/(m s)) sum_j ||R(x) w_j||^2`` and
    its gradient and is only meaningful for least squares with a shared
    operator.
    """

    m: int
    evaluate: Callable[[int, np.ndarray], Evaluation]
    evaluate_batch: Callable[[np.ndarray, np.ndarray], Evaluation] | None = None
    evaluate_averaged: Callable[[np.ndarray, np.ndarray], Evaluation] | None = None
    penalty_kind: str = "least-squares"
    shared_operator: bool = True

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("population must have at least one member")

    def mean(self, indices, x) -> Evaluation:
        idx = np.sort(np.asarray(indices, dtype=int))
        if self.evaluate_batch is not None:
            return self.evaluate_batch(idx, x)
        total_f, total_g = 0.0, None
        for i in idx:
            f, g = self.evaluate(int(i), x)
            total_f += f
            total_g = np.array(g, dtype=float) if total_g is None else total_g + g
        return total_f / idx.size, total_g / idx.size

    def full(self, x) -> Evaluation:
        return self.mean(np.arange(self.m), x)


@dataclass(frozen=True)
class SampleEstimate:
    value: float
    gradient: np.ndarray
    sample: np.ndarray


def sample_misfit(pop: PopulationView, plan: SamplePlan, x, rng) -> SampleEstimate:
    if plan.kind == DATA_AVERAGING:
        if pop.penalty_kind != "least-squares":
            raise ValueError("data averaging is only valid for the least-squares misfit")
        if not pop.shared_operator:
            raise ValueError("data averaging needs the same forward operator for every experiment")
        if pop.evaluate_averaged is None:
            raise ValueError("population does not support data averaging")
        W = draw(plan, pop.m, rng)
        f, g = pop.evaluate_averaged(x, W)
        return SampleEstimate(f, g, W)
    idx = draw(plan, pop.m, rng)
    f, g = pop.mean(idx, x)
    return SampleEstimate(f, g, idx)


def gradient_population(pop: PopulationView, x) -> np.ndarray:
    return np.stack([np.asarray(pop.evaluate(i, x)[1], dtype=float) for i in range(pop.m)])


def population_gradient_variance(pop: PopulationView, x, gradients: np.ndarray | None = None) -> float:
    """``sigma_g^2 = 1/(m-1) sum_i ||grad phi_i - grad phi||^2``."""
    if pop.m < 2:
        raise ValueError("gradient variance needs a population of at least two")
    G = gradient_population(pop, x) if gradients is None else np.asarray(gradients)
    dev = G - G.mean(axis=0)
    return float(np.sum(dev * dev) / (pop.m - 1))


def averaged_gradient_variance(
    pop: PopulationView, x, weights: str = "rademacher", draws: int = 1000, rng=None
) -> tuple[float, float]:
    """Monte-Carlo estimate of the variance of single-column averaged gradients.

    Returns the estimate and its standard error.
    """
    gen = as_generator(rng if rng is not None else RandomStream(0))
    plan = SamplePlan(DATA_AVERAGING, 1, weights)
    G = np.stack([pop.evaluate_averaged(x, draw(plan, pop.m, gen))[1] for _ in range(draws)])
    sq = np.sum((G - G.mean(axis=0)) ** 2, axis=1)
    est = float(sq.sum() / (draws - 1))
    return est, float(sq.std(ddof=1) / math.sqrt(draws))


def predicted_error(plan: SamplePlan, m: int, sigma_g2: float) -> float:
    """Expected squared gradient error of a sample average.

    For data averaging ``sigma_g2`` must be the variance of the averaged
    gradients (see :func:`averaged_gradient_variance`).
    """
    plan.validate(m)
    s = plan.size
    if plan.kind == WITHOUT_REPLACEMENT:
        return (1.0 / s) * (1.0 - s / m) * sigma_g2
    return sigma_g2 / s


# ---------------------------------------------------------------------------
# sample-size schedules

RANDOM_WITHOUT = "without"
RANDOM_WITH = "with"
DETERMINISTIC = "deterministic"
STRATEGIES = (RANDOM_WITHOUT, RANDOM_WITH, DETERMINISTIC)


@dataclass(frozen=True)
class ScheduleParams:
    m: int
    rate: float
    iterations: int
    beta1: float = 1.0
    beta2: float = 1.0
    lipschitz: float = 1.0

    def __post_init__(self):
        if self.m < 2:
            raise ValueError("schedules need a population of at least two")
        if not 0 < self.rate < 1:
            raise ValueError(f"rate must lie in (0, 1), got {self.rate}")
        if self.beta1 < 0 or self.beta2 < 1:
            raise ValueError("need beta1 >= 0 and beta2 >= 1")
        if self.iterations < 1:
            raise ValueError("need at least one iteration")

    def beta(self, gaps: Sequence[float] | None = None) -> np.ndarray:
        """``beta_k = beta1 + 2 beta2 L [phi(x_k) - phi*]``, frozen at k=0 without a trace."""
        if gaps is None:
            return np.full(self.iterations, self.beta1 + 0.0)
        gaps = np.asarray(gaps, dtype=float)
        if gaps.size < self.iterations:
            gaps = np.concatenate([gaps, np.full(self.iterations - gaps.size, gaps[-1])])
        return self.beta1 + 2.0 * self.beta2 * self.lipschitz * gaps[: self.iterations]


def error_bound(strategy: str, s, m: int, beta) -> np.ndarray:
    """Right-hand sides of the sample-average error bounds."""
    s = np.asarray(s, dtype=float)
    if strategy == RANDOM_WITHOUT:
        return (1.0 / s) * (1.0 - s / m) * (m / (m - 1.0)) * beta
    if strategy == RANDOM_WITH:
        return (1.0 / s) * (m / (m - 1.0)) * beta
    if strategy == DETERMINISTIC:
        return 4.0 * ((m - s) / m) ** 2 * beta
    raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")


@dataclass(frozen=True)
class Schedule:
    strategy: str
    sizes: np.ndarray
    cumulative: np.ndarray
    clamped: np.ndarray


def schedule(params: ScheduleParams, strategy: str, gaps: Sequence[float] | None = None) -> Schedule:
    """Smallest ``s_k`` whose bound is at most ``rate^k`` times the ``s=1`` bound at k=0."""
    m = params.m
    beta = params.beta(gaps)
    s_all = np.arange(1, m + 1)
    reference = float(error_bound(strategy, 1, m, beta[0]))
    sizes = np.empty(params.iterations, dtype=int)
    clamped = np.zeros(params.iterations, dtype=bool)
    for k in range(params.iterations):
        target = params.rate**k * reference
        ok = np.nonzero(error_bound(strategy, s_all, m, beta[k]) <= target * (1 + 1e-12))[0]
        if ok.size:
            sizes[k] = s_all[ok[0]]
        else:
            sizes[k], clamped[k] = m, True
    return Schedule(strategy, sizes, np.cumsum(sizes), clamped)


def schedule_table(params: ScheduleParams, gaps=None) -> dict[str, Schedule]:
    return {name: schedule(params, name, gaps) for name in STRATEGIES}


SCHEDULE_COLUMNS = ("k", "s_without", "s_with", "s_deterministic", "cum_without", "cum_with", "cum_deterministic")


def write_schedule_csv(target, table: dict[str, Schedule]):
    """Write the schedule table to a path or an open text file."""
    if hasattr(target, "write"):
        _write_schedule(target, table)
        return
    with open(target, "w", newline="") as fh:
        _write_schedule(fh, table)


def _write_schedule(fh, table):
    w, r, d = table[RANDOM_WITHOUT], table[RANDOM_WITH], table[DETERMINISTIC]
    out = csv.writer(fh, lineterminator="\n")
    out.writerow(SCHEDULE_COLUMNS)
    for k in range(w.sizes.size):
        out.writerow([k, w.sizes[k], r.sizes[k], d.sizes[k], w.cumulative[k], r.cumulative[k], d.cumulative[k]])
