"""Solvers for finite-sum objectives ``phi = (1/m) sum_i phi_i``.

All solvers share :class:`ObjectiveOracle` and emit a :class:`RunRecord`.
Row ``k`` of a record describes ``x_k``; its ``cum_evals`` counts the
single-experiment gradient evaluations that produced the first ``k`` steps
(line-search trial points are not counted).
"""

from __future__ import annotations

import csv
import hashlib
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .sampling import DATA_AVERAGING, WITHOUT_REPLACEMENT, SamplePlan, as_generator, draw

Evaluation = tuple[float, np.ndarray]


class ObjectiveOracle:
    """Access to ``phi``, ``phi_i`` and sample averages of a finite sum.

    ``batch(indices, x)`` must return the mean value and gradient over a
    sorted index multiset. ``averaged(x, W)`` is optional and evaluates the
    data-averaged least-squares estimate for a weight matrix ``W``.
    """

    def __init__(self, m: int, batch: Callable[[np.ndarray, np.ndarray], Evaluation], averaged=None):
        if m < 1:
            raise ValueError("oracle needs at least one subfunction")
        self.m = m
        self._batch = batch
        self._averaged = averaged

    def batch(self, indices, x) -> Evaluation:
        idx = np.sort(np.asarray(indices, dtype=int))
        f, g = self._batch(idx, x)
        return float(f), np.asarray(g, dtype=float)

    def full(self, x) -> Evaluation:
        return self.batch(np.arange(self.m), x)

    def single(self, x, i: int) -> Evaluation:
        return self.batch([i], x)

    def sampled(self, x, plan: SamplePlan, rng) -> tuple[float, np.ndarray, np.ndarray]:
        sample = draw(plan, self.m, rng)
        if plan.kind == DATA_AVERAGING:
            if self._averaged is None:
                raise ValueError("oracle does not support data averaging")
            f, g = self._averaged(x, sample)
            return float(f), np.asarray(g, dtype=float), sample
        f, g = self.batch(sample, x)
        return f, g, sample

    @classmethod
    def from_functions(cls, funcs: Sequence[Callable[[np.ndarray], Evaluation]]) -> "ObjectiveOracle":
        """Oracle over a list of callables ``x -> (phi_i, grad phi_i)``."""

        def batch(idx, x):
            f, g = 0.0, 0.0
            for i in idx:
                fi, gi = funcs[i](x)
                f, g = f + fi, g + np.asarray(gi, dtype=float)
            return f / len(idx), g / len(idx)

        return cls(len(funcs), batch)


# ---------------------------------------------------------------------------
# run records

COLUMNS = ("iter", "phi", "grad_norm", "model_error", "cum_evals", "wall_ms", "phi_kind", "phi_full", "x_hash")


def _hash(x: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(x, dtype=float).tobytes()).hexdigest()[:16]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


@dataclass
class RunRecord:
    solver: str
    rows: list[dict] = field(default_factory=list)
    x: np.ndarray | None = None
    status: str = "max-iter"
    message: str = ""
    _t0: float = field(default_factory=time.perf_counter, repr=False)

    def append(self, k, x, phi, grad, cum_evals, phi_kind, monitor=None):
        row = {
            "iter": k,
            "phi": float(phi),
            "grad_norm": float(np.linalg.norm(grad)),
            "model_error": None,
            "cum_evals": int(cum_evals),
            "wall_ms": 1e3 * (time.perf_counter() - self._t0),
            "phi_kind": phi_kind,
            "phi_full": None,
            "x_hash": _hash(x),
        }
        if monitor is not None:
            extra = monitor(x)
            row["model_error"] = extra.get("model_error")
            row["phi_full"] = extra.get("phi_full")
        if self.rows and row["cum_evals"] < self.rows[-1]["cum_evals"]:
            raise AssertionError("cumulative evaluation counter decreased")
        self.rows.append(row)
        self.x = np.array(x, dtype=float)

    def column(self, name: str) -> np.ndarray:
        return np.array([np.nan if r[name] is None else r[name] for r in self.rows], dtype=float)

    def to_csv(self, path, wall_time: bool = True):
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(COLUMNS)
            for r in self.rows:
                vals = dict(r)
                if not wall_time:
                    vals["wall_ms"] = 0.0
                out.writerow([_fmt(vals[c]) for c in COLUMNS])


def read_run_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for key in ("phi", "grad_norm", "model_error", "wall_ms", "phi_full"):
            r[key] = float(r[key]) if r.get(key) not in (None, "") else None
        r["iter"] = int(r["iter"])
        r["cum_evals"] = int(r["cum_evals"])
    return rows


# ---------------------------------------------------------------------------
# step policies


@dataclass(frozen=True)
class StepPolicy:
    """Step lengths ``alpha_k``.

    ``fixed``: alpha. ``passes``: alpha / (1 + floor(k / m)), constant within
    each pass over the data. ``harmonic``: alpha / (k + offset), which meets
    the infinite-travel and square-summable conditions.
    """

    kind: str = "fixed"
    alpha: float = 1.0
    offset: float = 1.0

    def __post_init__(self):
        if self.kind not in ("fixed", "passes", "harmonic"):
            raise ValueError(f"unknown step policy {self.kind!r}")
        if not self.alpha > 0 or not self.offset > 0:
            raise ValueError("step parameters must be positive")

    def step(self, k: int, m: int = 1) -> float:
        if self.kind == "fixed":
            return self.alpha
        if self.kind == "passes":
            return self.alpha / (1 + k // m)
        return self.alpha / (k + self.offset)


# ---------------------------------------------------------------------------
# L-BFGS machinery


class LbfgsMemory:
    """Limited-memory inverse-Hessian approximation with a curvature guard."""

    def __init__(self, size: int = 4, curvature: float = 1e-10):
        self.size = size
        self.curvature = curvature
        self.pairs: deque = deque(maxlen=max(size, 1))
        self.rejected = 0

    def __len__(self):
        return len(self.pairs) if self.size > 0 else 0

    def clear(self):
        self.pairs.clear()

    def update(self, dx: np.ndarray, dg: np.ndarray) -> bool:
        if self.size == 0:
            return False
        sy = float(dx @ dg)
        if not sy > self.curvature * np.linalg.norm(dx) * np.linalg.norm(dg):
            self.rejected += 1
            return False
        self.pairs.append((dx.copy(), dg.copy(), 1.0 / sy))
        return True

    def direction(self, g: np.ndarray, scale0: float) -> np.ndarray:
        """``-H g`` by the two-loop recursion; ``scale0`` is used with empty memory."""
        if len(self) == 0:
            return -scale0 * g
        q = g.copy()
        alphas = []
        for s, y, rho in reversed(self.pairs):
            a = rho * (s @ q)
            q -= a * y
            alphas.append(a)
        s, y, _ = self.pairs[-1]
        q *= (s @ y) / (y @ y)
        for (s, y, rho), a in zip(self.pairs, reversed(alphas)):
            b = rho * (y @ q)
            q += (a - b) * s
        return -q


class LineSearchError(RuntimeError):
    pass


def armijo(evaluate, x, f, g, p, c1: float = 1e-4, shrink: float = 0.5, max_backtracks: int = 30):
    """Backtracking from a unit step; returns ``(alpha, x_new, f_new, g_new)``."""
    slope = float(g @ p)
    if not slope < 0:
        raise LineSearchError(f"not a descent direction (slope {slope:g})")
    alpha = 1.0
    for _ in range(max_backtracks + 1):
        x_new = x + alpha * p
        f_new, g_new = evaluate(x_new)
        if np.isfinite(f_new) and f_new <= f + c1 * alpha * slope:
            return alpha, x_new, f_new, g_new
        alpha *= shrink
    raise LineSearchError(f"no sufficient decrease after {max_backtracks} backtracks")


def _first_scale(g, step0):
    gn = float(np.linalg.norm(g))
    if step0 is None or gn == 0:
        return 1.0
    return step0 / gn


def _quasi_newton(oracle, x0, sizes, max_iter, rng, memory, step0, gtol, monitor, step, name):
    """Shared loop for full and growing-sample quasi-Newton iterations."""
    gen = as_generator(rng) if rng is not None else None
    m = oracle.m
    record = RunRecord(name)
    mem = LbfgsMemory(memory)
    x = np.array(x0, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("initial point must be finite")

    def sample_for(k):
        s = sizes(k)
        if s >= m and gen is None:
            return np.arange(m)
        return np.sort(draw(SamplePlan(WITHOUT_REPLACEMENT, s), m, gen))

    idx = sample_for(0)
    f, g = oracle.batch(idx, x)
    kind = "full" if idx.size == m else "sampled"
    record.append(0, x, f, g, 0, kind, monitor)
    g0_norm = float(np.linalg.norm(g))
    scale0 = _first_scale(g, step0)
    cum = 0
    last = None  # (x, sample, f, g) from the accepted line-search point
    for k in range(max_iter):
        if np.linalg.norm(g) <= gtol * max(1.0, g0_norm):
            record.status = "converged"
            break
        p = mem.direction(g, scale0)
        if not float(g @ p) < 0:
            mem.clear()
            p = -scale0 * g
        evaluate = lambda z, idx=idx: oracle.batch(idx, z)  # noqa: E731
        try:
            if step is None:
                _, x_new, f_new, g_new = armijo(evaluate, x, f, g, p)
            else:
                x_new = x + step * p
                f_new, g_new = evaluate(x_new)
        except LineSearchError as exc:
            record.status, record.message = "line-search-failure", f"iteration {k}: {exc}"
            break
        cum += idx.size
        last = (idx, f_new, g_new)
        idx = sample_for(k + 1)
        if np.array_equal(idx, last[0]):
            f_next, g_next = f_new, g_new
        else:
            f_next, g_next = oracle.batch(idx, x_new)
        mem.update(x_new - x, g_next - g)
        x, f, g = x_new, f_next, g_next
        kind = "full" if idx.size == m else "sampled"
        record.append(k + 1, x, f, g, cum, kind, monitor)
    return record


def lbfgs(
    oracle: ObjectiveOracle,
    x0,
    max_iter: int = 50,
    gtol: float = 1e-8,
    memory: int = 4,
    step0: float | None = None,
    monitor=None,
) -> RunRecord:
    """Full-gradient L-BFGS with Armijo backtracking.

    ``step0`` sets the length of the first trial step (the memory is empty
    then); ``gtol`` is relative to the initial gradient norm.
    """
    m = oracle.m
    return _quasi_newton(oracle, x0, lambda k: m, max_iter, None, memory, step0, gtol, monitor, None, "lbfgs")


def growing_sample(
    oracle: ObjectiveOracle,
    x0,
    rng,
    max_iter: int = 50,
    s0: int = 1,
    schedule: Sequence[int] | None = None,
    memory: int = 4,
    step0: float | None = None,
    step: float | None = None,
    gtol: float = 0.0,
    monitor=None,
) -> RunRecord:
    """Quasi-Newton iterations on sample averages whose size grows.

    By default ``s_{k+1} = min(m, s_k + 1)`` starting from ``s0``; an explicit
    ``schedule`` of sizes overrides this. Samples are redrawn without
    replacement each iteration. ``step`` replaces the line search with a
    fixed step (e.g. ``1/L``); ``memory=0`` gives plain gradient steps.
    """
    m = oracle.m
    if schedule is not None:
        sched = [int(min(m, max(1, s))) for s in schedule]
        sizes = lambda k: sched[min(k, len(sched) - 1)]  # noqa: E731
    else:
        if not 1 <= s0 <= m:
            raise ValueError(f"initial sample size must lie in [1, {m}]")
        sizes = lambda k: min(m, s0 + k)  # noqa: E731
    return _quasi_newton(
        oracle, x0, sizes, max_iter, rng, memory, step0, gtol, monitor, step, "growing-sample"
    )


def stochastic_gradient(
    oracle: ObjectiveOracle, x0, plan: SamplePlan, policy: StepPolicy, max_iter: int, rng, monitor=None
) -> RunRecord:
    """``x_{k+1} = x_k - alpha_k grad phi_S(x_k)`` with a fresh sample each iteration."""
    gen = as_generator(rng)
    record = RunRecord("stochastic-gradient")
    x = np.array(x0, dtype=float)
    for k in range(max_iter + 1):
        f, g, _ = oracle.sampled(x, plan, gen)
        record.append(k, x, f, g, plan.size * k, "sampled", monitor)
        if k == max_iter:
            break
        x = x - policy.step(k, oracle.m) * g
    return record


def incremental_gradient(
    oracle: ObjectiveOracle, x0, policy: StepPolicy, max_iter: int, rng, cyclic: bool = False, monitor=None
) -> RunRecord:
    """``x_{k+1} = x_k - alpha_k grad phi_{i_k}(x_k)``, ``i_k`` uniform (or cyclic)."""
    gen = as_generator(rng)
    m = oracle.m
    record = RunRecord("incremental-gradient")
    x = np.array(x0, dtype=float)
    for k in range(max_iter + 1):
        i = k % m if cyclic else int(gen.integers(0, m))
        f, g = oracle.single(x, i)
        record.append(k, x, f, g, k, "single", monitor)
        if k == max_iter:
            break
        x = x - policy.step(k, m) * g
    return record
