"""Misfit of an acquisition as a finite sum over experiments."""

from __future__ import annotations

from collections import Counter
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .. import helmholtz as hz
from .. import misfit
from ..optimize import ObjectiveOracle
from ..sampling import PopulationView

GRANULARITIES = ("pair", "source")


class FWIObjective:
    """``phi(x) = (1/m) sum_i rho(r_i(x))`` over (source, frequency) pairs or sources.

    Only the observed data are visible here; clean data and corruption masks
    stay with the harness diagnostics. Per-frequency work (one factorization
    shared by all sources) may run on ``workers`` threads; partial results are
    always reduced in frequency order, so the output does not depend on
    scheduling. ``active`` (boolean, one entry per node) zeroes the gradient
    of parameters held fixed, such as a known water layer.
    """

    def __init__(
        self,
        acq: hz.Acquisition,
        penalty: misfit.Penalty,
        granularity: str = "pair",
        workers: int = 1,
        active: np.ndarray | None = None,
    ):
        if acq.data is None:
            raise ValueError("objective needs observed data")
        if granularity not in GRANULARITIES:
            raise ValueError(f"granularity must be one of {GRANULARITIES}")
        self.acq = acq
        self.penalty = penalty
        self.granularity = granularity
        self.workers = max(1, int(workers))
        if active is not None:
            active = np.asarray(active, dtype=bool).ravel()
            if active.size != acq.grid.size:
                raise ValueError("active mask must have one entry per grid node")
        self.active = active
        nf = acq.n_frequencies
        self.m = acq.n_sources * nf if granularity == "pair" else acq.n_sources

    def pairs(self, i: int) -> list[tuple[int, int]]:
        nf = self.acq.n_frequencies
        if self.granularity == "pair":
            return [(i // nf, i % nf)]
        return [(i, f) for f in range(nf)]

    def _map(self, fn, items):
        if self.workers == 1 or len(items) < 2:
            return [fn(it) for it in items]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(fn, items))

    def _model(self, x):
        x = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(x)) or np.any(x <= 0):
            return None
        return hz.SlownessModel(self.acq.grid, x)

    def _frequency_term(self, model, f, sources, weights):
        acq = self.acq
        system = hz.assemble(model, acq.frequencies[f])
        U = hz.solve(system, acq.source_matrix(sources, f))
        R = acq.data[sources, f].T - acq.restrict(U)
        values = np.array([misfit.value(self.penalty, R[:, j]) for j in range(len(sources))])
        Y = misfit.influence(self.penalty, R) * weights
        V = hz.solve_adjoint(system, acq.inject(Y))
        return float(values @ weights), hz.adjoint_state_gradient(system, U, V)

    def batch(self, indices, x):
        """Mean value and gradient over an index multiset."""
        model = self._model(x)
        n = self.acq.grid.size
        if model is None:
            return np.inf, np.zeros(n)
        counts = Counter()
        for i in np.asarray(indices, dtype=int):
            for pair in self.pairs(int(i)):
                counts[pair] += 1
        tasks = []
        for f in range(self.acq.n_frequencies):
            sources = sorted(s for (s, ff) in counts if ff == f)
            if sources:
                tasks.append((f, sources, np.array([counts[(s, f)] for s in sources], dtype=float)))
        parts = self._map(lambda t: self._frequency_term(model, *t), tasks)
        total_f, total_g = 0.0, np.zeros(n)
        for fv, gv in parts:
            total_f += fv
            total_g += gv
        k = len(indices)
        return total_f / k, self._masked(total_g / k)

    def _masked(self, g):
        return g if self.active is None else np.where(self.active, g, 0.0)

    def averaged(self, x, W):
        """Data-averaged least-squares estimate ``(1/(m s)) sum_j ||R w_j||^2`` and gradient."""
        if self.granularity != "source":
            raise ValueError("data averaging needs source granularity (one operator per experiment)")
        if self.penalty.kind != "least-squares":
            raise ValueError("data averaging is only valid for the least-squares misfit")
        model = self._model(x)
        n = self.acq.grid.size
        if model is None:
            return np.inf, np.zeros(n)
        W = np.asarray(W, dtype=float)
        acq = self.acq
        scale = 1.0 / (self.m * W.shape[1])

        def term(f):
            system = hz.assemble(model, acq.frequencies[f])
            Q = acq.source_matrix(range(acq.n_sources), f) @ W
            D = acq.data[:, f, :].T @ W
            U = hz.solve(system, Q)
            R = D - acq.restrict(U)
            V = hz.solve_adjoint(system, acq.inject(2.0 * scale * R))
            return scale * float(np.sum(np.abs(R) ** 2)), hz.adjoint_state_gradient(system, U, V)

        parts = self._map(term, list(range(acq.n_frequencies)))
        total_f, total_g = 0.0, np.zeros(n)
        for fv, gv in parts:
            total_f += fv
            total_g += gv
        return total_f, self._masked(total_g)

    def residuals(self, x) -> np.ndarray:
        """All residuals ``d - F(x) q`` with shape (sources, frequencies, receivers)."""
        model = hz.SlownessModel(self.acq.grid, x)
        return self.acq.data - predict(model, self.acq)

    def oracle(self) -> ObjectiveOracle:
        averaged = self.averaged if self.granularity == "source" and self.penalty.kind == "least-squares" else None
        return ObjectiveOracle(self.m, self.batch, averaged)

    def population(self) -> PopulationView:
        return PopulationView(
            m=self.m,
            evaluate=lambda i, x: self.batch([i], x),
            evaluate_batch=self.batch,
            evaluate_averaged=self.averaged if self.granularity == "source" else None,
            penalty_kind=self.penalty.kind,
            shared_operator=self.granularity == "source",
        )


def predict(model: hz.SlownessModel, acq: hz.Acquisition) -> np.ndarray:
    """Predicted data for every (source, frequency, receiver)."""
    out = np.empty(acq.data_shape, dtype=complex)
    for f in range(acq.n_frequencies):
        system = hz.assemble(model, acq.frequencies[f])
        U = hz.solve(system, acq.source_matrix(range(acq.n_sources), f))
        out[:, f, :] = acq.restrict(U).T
    return out
