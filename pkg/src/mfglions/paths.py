"""Time grids, Brownian increments, particle path storage and discounted norms."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

__all__ = [
    "TimeGrid",
    "PathBundle",
    "NormEstimate",
    "sample_brownian",
    "discount_weights",
    "discounted_sq_norm",
    "default_horizon",
    "write_series_csv",
]


def default_horizon(r: float) -> float:
    """Truncation horizon used when none is configured: max(40, 8/r)."""
    return max(40.0, 8.0 / r)


@dataclass(frozen=True)
class TimeGrid:
    T: float
    dt: float

    def __post_init__(self):
        if not (self.T > 0 and self.dt > 0):
            raise ValueError("T and dt must be positive")
        M = int(round(self.T / self.dt))
        if M < 1:
            raise ValueError("grid needs at least one step")
        if abs(M * self.dt - self.T) > 1e-12 * max(1.0, self.T):
            raise ValueError(f"T={self.T} is not an integer multiple of dt={self.dt}")

    @property
    def M(self) -> int:
        return int(round(self.T / self.dt))

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.M + 1) * self.dt

    def node(self, t: float) -> int:
        """Index of the node closest to time t."""
        k = int(round(t / self.dt))
        if not 0 <= k <= self.M:
            raise ValueError(f"t={t} outside [0, {self.T}]")
        return k


def sample_brownian(grid: TimeGrid, N: int, seed: int) -> np.ndarray:
    """Brownian increments, shape (N, M), each row N(0, dt) distributed.

    Particle i draws from its own stream keyed by (seed, i), so a particle's
    increments do not depend on N or on the order of generation.
    """
    if N < 1:
        raise ValueError("need at least one particle")
    return sample_brownian_tm(grid, N, seed).T


def sample_brownian_tm(grid: TimeGrid, N: int, seed: int, start: int = 0) -> np.ndarray:
    """Time-major variant of :func:`sample_brownian`, shape (M, N).

    ``start`` offsets the particle keys, which gives independent draws for a
    second population without touching the first.
    """
    M = grid.M
    out = np.empty((N, M))
    sq = np.sqrt(grid.dt)
    for i in range(N):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(start + i,)))
        out[i] = rng.standard_normal(M)
    out *= sq
    return np.ascontiguousarray(out.T)


def discount_weights(grid: TimeGrid, K: float) -> np.ndarray:
    """Trapezoidal weights for int_0^T e^{-Kt} g(t) dt on the grid nodes."""
    w = np.exp(-K * grid.times) * grid.dt
    w[0] *= 0.5
    w[-1] *= 0.5
    return w


class NormEstimate(NamedTuple):
    value: float
    tail_bound: float


def discounted_sq_norm(path, K: float, grid: TimeGrid) -> NormEstimate:
    """E int_0^inf e^{-Kt} |v_t|^2 dt, truncated at T.

    ``path`` is either one deterministic series (M+1,) or particle paths
    (N, M+1); the expectation is the particle average.  The tail bound is
    e^{-KT} sup_t E|v_t|^2 / K, i.e. the contribution of [T, inf) if the
    second moment stayed at its largest observed level.
    """
    if not K > 0:
        raise ValueError("K must be positive")
    v = np.asarray(path, dtype=float)
    if v.shape[-1] != grid.M + 1:
        raise ValueError(f"path has {v.shape[-1]} nodes, grid has {grid.M + 1}")
    second = v * v if v.ndim == 1 else np.mean(v * v, axis=0)
    value = float(np.dot(discount_weights(grid, K), second))
    tail = float(np.exp(-K * grid.T) * np.max(second) / K)
    return NormEstimate(value, tail)


@dataclass
class PathBundle:
    """Particle paths of one forward-backward system.

    Arrays are stored time-major (node, particle); ``X``, ``Y``, ``Z`` and
    ``dB`` return particle-major views of shape (N, M+1) / (N, M).
    """

    grid: TimeGrid
    x: np.ndarray
    y: np.ndarray
    db: np.ndarray
    z_fn: Callable[[], np.ndarray] | None = None
    _z: np.ndarray | None = field(default=None, repr=False)

    @property
    def N(self) -> int:
        return self.x.shape[1]

    @property
    def X(self) -> np.ndarray:
        return self.x.T

    @property
    def Y(self) -> np.ndarray:
        return self.y.T

    @property
    def z(self) -> np.ndarray:
        if self._z is None:
            if self.z_fn is None:
                raise ValueError("bundle carries no Z information")
            self._z = self.z_fn()
        return self._z

    @property
    def Z(self) -> np.ndarray:
        return self.z.T

    @property
    def dB(self) -> np.ndarray:
        return self.db.T

    def integrated_z(self) -> np.ndarray:
        """int_0^t Z_s ds at every node, left-point rule, shape (M+1, N)."""
        z = self.z
        out = np.zeros_like(self.x)
        np.cumsum(z[:-1] * self.grid.dt, axis=0, out=out[1:])
        return out

    def martingale_se(self, r: float) -> float:
        """Standard error band of a Y_0 estimate from the martingale part.

        sqrt(sum_k e^{-2 r t_k} E[Z_k^2] dt / N): the Monte Carlo error of
        the plain particle average of discounted increments int e^{-rt} Z dB.
        """
        z = self.z[:-1]
        t = self.grid.times[:-1]
        w = np.exp(-2.0 * r * t) * self.grid.dt
        ez2 = np.einsum("kn,kn->k", z, z) / z.shape[1]  # no (M, N) temporary
        return float(np.sqrt(np.dot(w, ez2) / self.N))

    def summary(self) -> np.ndarray:
        """Columns t, mean X, var X, mean Y, mean Z."""
        cols = [self.grid.times, self.x.mean(axis=1), self.x.var(axis=1), self.y.mean(axis=1)]
        try:
            cols.append(self.z.mean(axis=1))
        except ValueError:
            cols.append(np.full(self.grid.M + 1, np.nan))
        return np.column_stack(cols)


def write_series_csv(bundle: PathBundle, path, every: int = 1) -> None:
    rows = bundle.summary()[::every]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "mean_x", "var_x", "mean_y", "mean_z"])
        for row in rows:
            w.writerow([f"{v:.12g}" for v in row])
