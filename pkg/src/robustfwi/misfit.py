"""Penalty functions, influence functions and conditional tail statistics.

Complex residuals are treated as ``2n`` real components (real parts, then
imaginary parts); Huber and Student's t act on each component separately.
Least squares is ``sum |r_k|^2`` with no 1/2 factor.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import integrate

KINDS = ("least-squares", "huber", "students-t")


@dataclass(frozen=True)
class Penalty:
    kind: str = "least-squares"
    mu: float | None = None
    nu: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown penalty kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "huber" and not (self.mu is not None and self.mu > 0):
            raise ValueError("Huber penalty needs a threshold mu > 0")
        if self.kind == "students-t" and not (self.nu is not None and self.nu > 0):
            raise ValueError("Student's t penalty needs degrees of freedom nu > 0")

    @classmethod
    def least_squares(cls) -> "Penalty":
        return cls("least-squares")

    @classmethod
    def huber(cls, mu: float) -> "Penalty":
        return cls("huber", mu=float(mu))

    @classmethod
    def students_t(cls, nu: float) -> "Penalty":
        return cls("students-t", nu=float(nu))


def _components(r) -> np.ndarray:
    r = np.asarray(r)
    if not np.all(np.isfinite(r)):
        raise ValueError("residual contains non-finite entries")
    if np.iscomplexobj(r):
        return np.concatenate([r.real.ravel(), r.imag.ravel()])
    return r.astype(float).ravel()


def scalar_value(p: Penalty, t) -> np.ndarray:
    """Penalty of real components, elementwise."""
    t = np.asarray(t, dtype=float)
    if p.kind == "least-squares":
        return t * t
    if p.kind == "huber":
        a = np.abs(t)
        return np.where(a <= p.mu, t * t / (2.0 * p.mu), a - p.mu / 2.0)
    return np.log1p(t * t / p.nu)


def scalar_influence(p: Penalty, t) -> np.ndarray:
    """Derivative of :func:`scalar_value`, elementwise."""
    t = np.asarray(t, dtype=float)
    if p.kind == "least-squares":
        return 2.0 * t
    if p.kind == "huber":
        return np.clip(t / p.mu, -1.0, 1.0)
    return 2.0 * t / (p.nu + t * t)


def value(p: Penalty, r) -> float:
    comps = _components(r)
    return float(np.sum(scalar_value(p, comps)))


def influence(p: Penalty, r):
    """Gradient of :func:`value`, repacked with the shape and dtype of ``r``.

    For complex input the result is ``d/dRe + i d/dIm``, which is the vector
    the adjoint-state gradient expects.
    """
    r = np.asarray(r)
    _components(r)
    if np.iscomplexobj(r):
        return scalar_influence(p, r.real) + 1j * scalar_influence(p, r.imag)
    return scalar_influence(p, r)


# ---------------------------------------------------------------------------
# scalar densities p(t) ~ exp(-rho(t)) and their conditional tails


@dataclass(frozen=True)
class TailDensity:
    """Symmetric scalar density ``exp(-rho(t))`` up to normalization.

    ``tail`` optionally gives ``log int_t^inf exp(-rho)`` in closed form.
    """

    name: str
    rho: Callable[[float], float]
    right_derivative: Callable[[float], float]
    log_concave: bool
    tail: Callable[[float], float] | None = None


def gaussian() -> TailDensity:
    return TailDensity(
        "gaussian",
        rho=lambda t: 0.5 * t * t,
        right_derivative=lambda t: t,
        log_concave=True,
    )


def laplace(alpha: float = 1.0) -> TailDensity:
    return TailDensity(
        "laplace",
        rho=lambda t: alpha * abs(t),
        right_derivative=lambda t: alpha,
        log_concave=True,
        tail=lambda t: -alpha * t - math.log(alpha),
    )


def cauchy() -> TailDensity:
    # int_t^inf dr/(1+r^2) = arctan(1/t) for t > 0, without cancellation
    return TailDensity(
        "cauchy",
        rho=lambda t: math.log1p(t * t),
        right_derivative=lambda t: 2.0 * t / (1.0 + t * t),
        log_concave=False,
        tail=lambda t: math.log(math.atan2(1.0, t)),
    )


def students_t(nu: float) -> TailDensity:
    """Density ``exp(-log(1 + t^2/nu))``, the one induced by the penalty."""
    s = math.sqrt(nu)
    return TailDensity(
        f"students-t(nu={nu:g})",
        rho=lambda t: math.log1p(t * t / nu),
        right_derivative=lambda t: 2.0 * t / (nu + t * t),
        log_concave=False,
        tail=lambda t: math.log(s * math.atan2(s, t)),
    )


def from_penalty(p: Penalty) -> TailDensity:
    if p.kind == "students-t":
        return students_t(p.nu)
    if p.kind == "least-squares":
        return TailDensity("least-squares", lambda t: t * t, lambda t: 2.0 * t, True)
    mu = p.mu
    return TailDensity(
        f"huber(mu={mu:g})",
        rho=lambda t: float(scalar_value(p, t)),
        right_derivative=lambda t: float(np.clip(t / mu, -1.0, 1.0)),
        log_concave=True,
    )


DENSITIES = {"gaussian": gaussian, "laplace": laplace, "cauchy": cauchy}


def density(name: str, **params) -> TailDensity:
    if name == "students-t":
        return students_t(params.get("nu", 1.0))
    try:
        return DENSITIES[name](**params)
    except KeyError:
        raise ValueError(f"unknown density {name!r}") from None


class QuadratureError(RuntimeError):
    pass


def _shifted_tail(d: TailDensity, t: float, shift: float) -> tuple[float, float]:
    """``int_t^inf exp(-(rho(r) - shift)) dr`` and an error estimate."""
    f = lambda r: math.exp(-(d.rho(r) - shift))  # noqa: E731
    alpha = d.right_derivative(t)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", integrate.IntegrationWarning)
        if d.log_concave and alpha > 0:
            # convexity: rho(r) >= rho(t) + alpha (r - t), so the truncated
            # remainder is at most exp(-(rho(t) - shift) - 40) / alpha
            upper = t + 40.0 / alpha
            val, err = integrate.quad(f, t, upper, epsabs=1e-10, epsrel=1e-12, limit=200)
            err += math.exp(-(d.rho(t) - shift) - 40.0) / alpha
        else:
            val, err = integrate.quad(f, t, np.inf, epsabs=1e-10, epsrel=1e-12, limit=200)
    trouble = any(issubclass(w.category, integrate.IntegrationWarning) for w in caught)
    if trouble or not np.isfinite(val) or err > 1e-6 * max(abs(val), 1e-300) + 1e-9:
        raise QuadratureError(f"tail quadrature for {d.name} at t={t} did not converge (err={err:g})")
    return val, err


def conditional_tail(d: TailDensity | Penalty | str, t1: float, t2: float) -> float:
    """``Pr(|r| > t2 | |r| > t1)`` under ``p ~ exp(-rho)``."""
    if not 0 < t1 < t2:
        raise ValueError(f"need 0 < t1 < t2, got t1={t1}, t2={t2}")
    if isinstance(d, Penalty):
        d = from_penalty(d)
    elif isinstance(d, str):
        d = density(d)
    if d.tail is not None:
        return math.exp(d.tail(t2) - d.tail(t1))
    num, _ = _shifted_tail(d, t2, d.rho(t2))
    den, _ = _shifted_tail(d, t1, d.rho(t1))
    return math.exp(d.rho(t1) - d.rho(t2)) * num / den


@dataclass(frozen=True)
class TailQuery:
    t0: float
    t1: float
    t2: float
    alpha0: float

    def __post_init__(self):
        if not (0 < self.t0 <= self.t1 < self.t2):
            raise ValueError(f"need 0 < t0 <= t1 < t2, got {self.t0}, {self.t1}, {self.t2}")
        if not self.alpha0 > 0:
            raise ValueError("alpha0 must be positive")

    @classmethod
    def at(cls, d: TailDensity, t0: float, t1: float, t2: float) -> "TailQuery":
        """Query with ``alpha0`` taken as the right derivative of rho at t0."""
        return cls(t0, t1, t2, d.right_derivative(t0))


@dataclass(frozen=True)
class BoundReport:
    lhs: float
    rhs: float
    satisfied: bool
    log_concave: bool


def theorem1_bound_check(q: TailQuery, d: TailDensity, atol: float = 0.0) -> BoundReport:
    """Compare the conditional tail with the log-concave bound exp(-alpha0 (t2 - t1))."""
    lhs = conditional_tail(d, q.t1, q.t2)
    rhs = math.exp(-q.alpha0 * (q.t2 - q.t1))
    return BoundReport(lhs=lhs, rhs=rhs, satisfied=lhs <= rhs + atol, log_concave=d.log_concave)
