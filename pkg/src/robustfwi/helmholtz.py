"""Frequency-domain 2D scalar Helmholtz modelling.

The discrete operator is

    A_w(x) u = [w^2 x + Laplacian] u = q

on a uniform grid with a 5-point Laplacian. Every node carries the full
stencil; neighbours that fall outside the grid are replaced by ghost values
eliminated through a first-order Sommerfeld (Robin) condition
``du/dn - i w sqrt(x) u = 0``, which shifts the diagonal of boundary rows
by ``(1 + i w h sqrt(x)) / h^2`` per missing neighbour.

Grid vectors are stored depth-fastest: node ``(iz, ix)`` has flat index
``ix * nz + iz``, i.e. a C-ordered array of shape ``(nx, nz)``.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class SolverError(RuntimeError):
    """Raised when a Helmholtz factorization fails."""

    def __init__(self, omega: float, message: str):
        super().__init__(f"factorization failed at omega={omega!r} rad/s: {message}")
        self.omega = omega


@dataclass(frozen=True)
class Grid2D:
    nz: int
    nx: int
    h: float

    def __post_init__(self):
        if self.nz < 3 or self.nx < 3:
            raise ValueError(f"grid needs at least 3x3 nodes, got nz={self.nz}, nx={self.nx}")
        if not self.h > 0:
            raise ValueError(f"grid spacing must be positive, got h={self.h}")

    @property
    def size(self) -> int:
        return self.nz * self.nx

    def index(self, iz: int, ix: int) -> int:
        if not (0 <= iz < self.nz and 0 <= ix < self.nx):
            raise ValueError(f"node ({iz}, {ix}) outside {self.nz}x{self.nx} grid")
        return ix * self.nz + iz

    def ghost_counts(self) -> np.ndarray:
        """Number of out-of-grid stencil neighbours for every node."""
        iz = np.arange(self.nz)
        ix = np.arange(self.nx)
        cz = (iz == 0).astype(int) + (iz == self.nz - 1)
        cx = (ix == 0).astype(int) + (ix == self.nx - 1)
        return (cx[:, None] + cz[None, :]).ravel()

    def to_array(self, vec: np.ndarray) -> np.ndarray:
        """Reshape a flat grid vector to ``(nz, nx)`` (depth down the rows)."""
        return np.asarray(vec).reshape(self.nx, self.nz).T


@dataclass(frozen=True)
class SlownessModel:
    """Squared slowness (s^2/m^2) on a grid."""

    grid: Grid2D
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).ravel()
        if values.size != self.grid.size:
            raise ValueError(f"model has {values.size} values, grid needs {self.grid.size}")
        if not np.all(np.isfinite(values)):
            raise ValueError("model contains non-finite values")
        if not np.all(values > 0):
            raise ValueError("squared slowness must be strictly positive")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_velocity(cls, grid: Grid2D, velocity) -> "SlownessModel":
        return cls(grid, 1.0 / np.asarray(velocity, dtype=float).ravel() ** 2)

    def with_values(self, values) -> "SlownessModel":
        return SlownessModel(self.grid, values)


@dataclass(frozen=True)
class Acquisition:
    """Sources, receivers, frequencies and (optionally) observed data.

    ``source_weights`` has shape ``(n_sources, n_frequencies)``; ``data`` has
    shape ``(n_sources, n_frequencies, n_receivers)``.
    """

    grid: Grid2D
    source_positions: np.ndarray
    source_weights: np.ndarray
    receivers: np.ndarray
    frequencies: np.ndarray
    data: np.ndarray | None = None

    def __post_init__(self):
        src = np.asarray(self.source_positions, dtype=int).ravel()
        rec = np.asarray(self.receivers, dtype=int).ravel()
        omegas = np.asarray(self.frequencies, dtype=float).ravel()
        weights = np.asarray(self.source_weights, dtype=complex)
        if weights.ndim == 0:
            weights = np.full((src.size, omegas.size), complex(weights))
        for name, pos in (("source", src), ("receiver", rec)):
            if pos.size and (pos.min() < 0 or pos.max() >= self.grid.size):
                raise ValueError(f"{name} position outside grid")
        if np.any(omegas <= 0):
            raise ValueError("angular frequencies must be positive")
        if weights.shape != (src.size, omegas.size):
            raise ValueError(f"source weights must have shape {(src.size, omegas.size)}, got {weights.shape}")
        object.__setattr__(self, "source_positions", src)
        object.__setattr__(self, "receivers", rec)
        object.__setattr__(self, "frequencies", omegas)
        object.__setattr__(self, "source_weights", weights)
        if self.data is not None:
            data = np.asarray(self.data, dtype=complex)
            if data.shape != self.data_shape:
                raise ValueError(f"data must have shape {self.data_shape}, got {data.shape}")
            object.__setattr__(self, "data", data)

    @property
    def n_sources(self) -> int:
        return self.source_positions.size

    @property
    def n_frequencies(self) -> int:
        return self.frequencies.size

    @property
    def n_receivers(self) -> int:
        return self.receivers.size

    @property
    def data_shape(self) -> tuple[int, int, int]:
        return (self.n_sources, self.n_frequencies, self.n_receivers)

    def source_vector(self, source_index: int, frequency_index: int) -> np.ndarray:
        q = np.zeros(self.grid.size, dtype=complex)
        q[self.source_positions[source_index]] = self.source_weights[source_index, frequency_index]
        return q

    def source_matrix(self, source_indices: Sequence[int], frequency_index: int) -> np.ndarray:
        """Right-hand sides for several sources at one frequency, one per column."""
        idx = np.asarray(source_indices, dtype=int)
        q = np.zeros((self.grid.size, idx.size), dtype=complex)
        q[self.source_positions[idx], np.arange(idx.size)] = self.source_weights[idx, frequency_index]
        return q

    def restrict(self, wavefield: np.ndarray) -> np.ndarray:
        """Apply the receiver restriction P (works column-wise on 2D input)."""
        return np.asarray(wavefield)[self.receivers]

    def inject(self, receiver_values: np.ndarray) -> np.ndarray:
        """Apply P^T: spread receiver values back onto the grid."""
        receiver_values = np.asarray(receiver_values, dtype=complex)
        out = np.zeros((self.grid.size,) + receiver_values.shape[1:], dtype=complex)
        np.add.at(out, self.receivers, receiver_values)
        return out

    def with_data(self, data) -> "Acquisition":
        return Acquisition(
            self.grid, self.source_positions, self.source_weights, self.receivers, self.frequencies, data
        )


@dataclass
class HelmholtzSystem:
    """Assembled A_w(x) with a lazily computed, cached sparse LU factorization.

    Once factorized, the system is read-only and solves may run concurrently.
    """

    omega: float
    matrix: sp.csc_matrix
    model: SlownessModel
    factorizations: int = 0
    _lu: object = field(default=None, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def factorize(self):
        if self._lu is None:
            with self._lock:
                if self._lu is None:
                    try:
                        lu = spla.splu(self.matrix)
                    except RuntimeError as exc:
                        raise SolverError(self.omega, str(exc)) from exc
                    diag = np.abs(lu.U.diagonal())
                    if diag.min() <= 1e3 * np.finfo(float).eps * diag.max():
                        raise SolverError(self.omega, "matrix is numerically singular")
                    self.factorizations += 1
                    self._lu = lu
        return self._lu

    def jacobian_diagonal(self) -> np.ndarray:
        """d A_kk / d x_k; A depends on x only through its diagonal."""
        grid = self.model.grid
        ghosts = grid.ghost_counts()
        return self.omega**2 + ghosts * (1j * self.omega / (2.0 * grid.h * np.sqrt(self.model.values)))


def assemble(model: SlownessModel, omega: float) -> HelmholtzSystem:
    if not omega > 0:
        raise ValueError(f"omega must be positive, got {omega}")
    grid = model.grid
    nz, nx, h = grid.nz, grid.nx, grid.h
    n = grid.size
    idx = np.arange(n).reshape(nx, nz)
    ghosts = grid.ghost_counts()

    diag = omega**2 * model.values + (-4.0 + ghosts * (1.0 + 1j * omega * h * np.sqrt(model.values))) / h**2
    inv_h2 = 1.0 / h**2
    # depth neighbours (z fastest) and lateral neighbours
    rows = [idx[:, :-1].ravel(), idx[:, 1:].ravel(), idx[:-1, :].ravel(), idx[1:, :].ravel()]
    cols = [idx[:, 1:].ravel(), idx[:, :-1].ravel(), idx[1:, :].ravel(), idx[:-1, :].ravel()]
    r = np.concatenate([np.arange(n)] + rows)
    c = np.concatenate([np.arange(n)] + cols)
    v = np.concatenate([diag] + [np.full(a.size, inv_h2, dtype=complex) for a in rows])
    matrix = sp.csc_matrix((v, (r, c)), shape=(n, n))
    return HelmholtzSystem(omega=float(omega), matrix=matrix, model=model)


def _check_rhs(system: HelmholtzSystem, rhs) -> np.ndarray:
    rhs = np.asarray(rhs, dtype=complex)
    if rhs.shape[0] != system.matrix.shape[0]:
        raise ValueError(f"rhs has {rhs.shape[0]} rows, system has {system.matrix.shape[0]}")
    return rhs


def solve(system: HelmholtzSystem, rhs) -> np.ndarray:
    """Solve ``A u = rhs``; ``rhs`` may hold several right-hand sides as columns."""
    rhs = _check_rhs(system, rhs)
    if not np.any(rhs):
        return np.zeros_like(rhs)
    return system.factorize().solve(rhs)


def solve_adjoint(system: HelmholtzSystem, rhs) -> np.ndarray:
    """Solve ``A^* v = rhs`` with the conjugate-transpose operator."""
    rhs = _check_rhs(system, rhs)
    if not np.any(rhs):
        return np.zeros_like(rhs)
    return system.factorize().solve(rhs, trans="H")


def _system(model, acq, frequency_index, system):
    if system is None:
        return assemble(model, acq.frequencies[frequency_index])
    if system.omega != acq.frequencies[frequency_index]:
        raise ValueError("system frequency does not match the requested frequency index")
    return system


def forward(model, acq: Acquisition, source_index: int, frequency_index: int, system=None) -> np.ndarray:
    """Predicted receiver data ``P A^{-1} q`` for one (source, frequency) pair."""
    system = _system(model, acq, frequency_index, system)
    return acq.restrict(solve(system, acq.source_vector(source_index, frequency_index)))


def residual(model, acq: Acquisition, source_index: int, frequency_index: int, system=None) -> np.ndarray:
    if acq.data is None:
        raise ValueError("acquisition carries no observed data")
    return acq.data[source_index, frequency_index] - forward(model, acq, source_index, frequency_index, system)


def gradient_contribution(
    model, acq: Acquisition, source_index: int, frequency_index: int, penalty_gradient_vector, system=None
) -> np.ndarray:
    """Adjoint-state gradient of ``rho(d - P A^{-1} q)`` with respect to x.

    ``penalty_gradient_vector`` is the penalty influence at the residual,
    packed as ``d rho/d Re r + i d rho/d Im r``.
    """
    system = _system(model, acq, frequency_index, system)
    u = solve(system, acq.source_vector(source_index, frequency_index))
    v = solve_adjoint(system, acq.inject(penalty_gradient_vector))
    return adjoint_state_gradient(system, u, v)


def adjoint_state_gradient(system: HelmholtzSystem, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``Re(conj(v) * dA/dx * u)``; columns of ``u``/``v`` are summed."""
    prod = np.conj(v) * u
    if prod.ndim == 2:
        prod = prod.sum(axis=1)
    return np.real(system.jacobian_diagonal() * prod)
