"""Equilibrium and representative-player systems of the mean field game.

Equilibrium:      dX = dH_y(X, L_X, Y) dt + dB,  dY = -[dH_x(X, L_X, Y) - r Y] dt + Z dB,  X_0 = xi
Representative:   same coefficients with L_X frozen from the equilibrium, X_0 = x.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from ..errors import InvalidParameterError
from ..measure import EmpiricalMeasure
from ..model import HamiltonianModel
from ..paths import PathBundle, TimeGrid, discount_weights, sample_brownian_tm
from .engine import RegressionField, chunk_map, picard_solve, regress_z

__all__ = [
    "SolverConfig",
    "EquilibriumSolution",
    "ValueEstimate",
    "solve_equilibrium",
    "solve_representative",
    "solve_representatives",
    "value_v",
    "flow_measures",
]


@dataclass(frozen=True)
class SolverConfig:
    grid: TimeGrid
    N: int = 10_000
    seed: int = 0
    basis_degree: int = 3
    picard_tol: float = 1e-5
    max_iters: int = 60
    theta: float = 0.5  # measure-flow relaxation
    field_theta: float = 0.5  # relaxation of the regression field between sweeps
    anderson_memory: int = 10  # past sweeps used to mix the field (0: plain damping)
    lambda_steps: tuple | None = None
    K: float | None = None  # norm weight; None means "use the model's r"
    n_tilde: int = 256  # tilde subsample for non-flat measure derivatives
    batch_size: int = 4  # members solved together in batched experiments
    workers: int = 1
    terminal: str = "zero"  # or "bootstrap"

    def __post_init__(self):
        if not self.picard_tol > 0:
            raise InvalidParameterError("picard_tol must be positive")
        if self.N < self.basis_degree + 2:
            raise InvalidParameterError("need N >= basis_degree + 2 particles")
        if self.basis_degree < 1:
            raise InvalidParameterError("basis_degree must be >= 1")
        if not (0 < self.theta <= 1 and 0 < self.field_theta <= 1):
            raise InvalidParameterError("theta and field_theta must lie in (0, 1]")
        if self.anderson_memory < 0:
            raise InvalidParameterError("anderson_memory must be >= 0")
        if self.max_iters < 1 or self.batch_size < 1 or self.workers < 1 or self.n_tilde < 1:
            raise InvalidParameterError("counts must be positive")
        if self.K is not None and not self.K > 0:
            raise InvalidParameterError("K must be positive")
        if self.terminal not in ("zero", "bootstrap"):
            raise InvalidParameterError("terminal must be 'zero' or 'bootstrap'")
        if self.lambda_steps is not None:
            steps = tuple(float(s) for s in self.lambda_steps)
            if not steps or steps[-1] != 1.0 or any(b <= a for a, b in zip((0.0,) + steps, steps)):
                raise InvalidParameterError("lambda_steps must increase strictly from above 0 to 1")
            object.__setattr__(self, "lambda_steps", steps)

    def norm_K(self, r: float) -> float:
        return self.K if self.K is not None else r

    def brownian(self) -> np.ndarray:
        """Time-major increments (M, N) for this config's seed."""
        return sample_brownian_tm(self.grid, self.N, self.seed)


def flow_measures(sorted_flow: np.ndarray) -> list[EmpiricalMeasure]:
    return [EmpiricalMeasure(row) for row in sorted_flow]


class _EquilibriumSystem:
    n_members = 1
    sigma = 1.0
    coupled = False

    def __init__(self, model: HamiltonianModel, xi: np.ndarray, theta: float, terminal_fn=None):
        self.model = model
        self.xi = xi
        self.theta = theta
        self.flow = None  # sorted atoms per node, damped across sweeps
        self.mu = None
        self.terminal_fn = terminal_fn

    def initial(self):
        return self.xi[None, :].copy()

    def regressors(self, k, x):
        return x, ()

    def _measure(self, k, x):
        if self.mu is None:
            # first sweep: plain interacting-particle law
            return EmpiricalMeasure(x[0])
        return self.mu[k]

    def drift(self, k, x, y):
        return self.model.dH_y(x, self._measure(k, x), y)

    def driver(self, k, x, y_next):
        return self.model.dH_x(x, self.mu[k], y_next) - self.model.r * y_next

    def terminal(self, x):
        if self.terminal_fn is None:
            return np.zeros_like(x)
        return self.terminal_fn(x)

    def after_forward(self, x):
        new = np.sort(x[:, 0, :], axis=1)
        if self.flow is None:
            self.flow = new
        else:
            self.flow = self.theta * new + (1.0 - self.theta) * self.flow
        self.mu = flow_measures(self.flow)


class _RepresentativeSystem:
    sigma = 1.0
    coupled = False

    def __init__(self, model, xs, mu, N, terminal_fn=None):
        self.model = model
        self.xs = np.asarray(xs, dtype=float)
        self.n_members = self.xs.size
        self.mu = mu
        self.N = N
        self.terminal_fn = terminal_fn

    def initial(self):
        return np.repeat(self.xs[:, None], self.N, axis=1)

    def regressors(self, k, x):
        return x, ()

    def drift(self, k, x, y):
        return self.model.dH_y(x, self.mu[k], y)

    def driver(self, k, x, y_next):
        return self.model.dH_x(x, self.mu[k], y_next) - self.model.r * y_next

    def terminal(self, x):
        if self.terminal_fn is None:
            return np.zeros_like(x)
        return self.terminal_fn(x)


@dataclass
class EquilibriumSolution:
    model: HamiltonianModel
    config: SolverConfig
    xi: np.ndarray
    bundle: PathBundle
    flow: np.ndarray  # (M+1, N) sorted atoms of L_{X_t}
    field: RegressionField
    diagnostics: dict = field(default_factory=dict)
    _mu: list | None = field(default=None, repr=False)

    @property
    def measure_flow(self) -> list[EmpiricalMeasure]:
        if self._mu is None:
            self._mu = flow_measures(self.flow)
        return self._mu

    @property
    def grid(self) -> TimeGrid:
        return self.bundle.grid

    @property
    def y0_slope(self) -> float:
        """Least-squares slope of Y_0 against X_0."""
        x0, y0 = self.bundle.x[0], self.bundle.y[0]
        vx = np.var(x0)
        if vx == 0:
            return float("nan")
        return float(np.mean((x0 - x0.mean()) * (y0 - y0.mean())) / vx)


def _tail(grid, K, second):
    return float(math.exp(-K * grid.T) * np.max(second) / K)


def _bootstrap_terminal(fld: RegressionField, grid: TimeGrid):
    # Stationary bootstrap: reuse the field from the middle of the horizon,
    # where the truncation error has died out, as terminal data at T.
    kmid = grid.M // 2
    sub = fld.node(kmid)

    def g(x):
        return sub.eval(0, x)

    return g


def solve_equilibrium(model: HamiltonianModel, xi_samples, config: SolverConfig, db=None) -> EquilibriumSolution:
    """Particle solution of the equilibrium system with a damped measure flow."""
    xi = np.asarray(xi_samples, dtype=float).reshape(-1)
    if xi.size == 0:
        raise InvalidParameterError("xi_samples is empty")
    if xi.size != config.N:
        if xi.size == 1:
            xi = np.full(config.N, xi[0])
        else:
            raise InvalidParameterError(f"got {xi.size} initial samples for N={config.N} particles")
    grid = config.grid
    if db is None:
        db = config.brownian()
    K = config.norm_K(model.r)

    def run(terminal_fn, field0):
        system = _EquilibriumSystem(model, xi, config.theta, terminal_fn)
        res = picard_solve(
            system,
            grid,
            db[:, None, :],
            degree=config.basis_degree,
            theta=config.field_theta,
            memory=config.anderson_memory,
            tol=config.picard_tol,
            max_iters=config.max_iters,
            K=K,
            field0=field0,
            where="equilibrium",
        )
        return system, res

    system, res = run(None, None)
    sweeps = [res.history]
    if config.terminal == "bootstrap":
        system, res = run(_bootstrap_terminal(res.field, grid), res.field)
        sweeps.append(res.history)

    x, y = res.x[:, 0, :], res.y[:, 0, :]
    flow = np.sort(x, axis=1)

    second = np.mean(x * x, axis=1) + np.mean(y * y, axis=1)
    diag = {
        "iterations": res.iterations,
        "residuals": [h for s in sweeps for h in s],
        "tail_bound": _tail(grid, K, second),
        "flow_gap": float(np.sqrt(np.mean((flow - system.flow) ** 2))),
    }
    # Z is regressed against the final flow (the one representatives see),
    # so the relaxed flow of the last sweep can be released
    terminal_fn = system.terminal_fn
    del system

    def zfn():
        zsys = _EquilibriumSystem(model, xi, config.theta, terminal_fn)
        zsys.mu = flow_measures(flow)
        return regress_z(zsys, grid, x[:, None, :], y[:, None, :], db[:, None, :], config.basis_degree)[:, 0, :]

    bundle = PathBundle(grid, x, y, db, zfn)
    return EquilibriumSolution(model, config, xi, bundle, flow, res.field, diag)


def solve_representatives(model, xs, eq: EquilibriumSolution, config: SolverConfig | None = None):
    """Representative systems started at each x in ``xs``, sharing eq's noise.

    Returns a list of (system, PicardResult) pairs, one per batch of
    ``config.batch_size`` starting points.  Each batch is warm-started from
    the equilibrium decoupling field; batches run concurrently when
    config.workers > 1.
    """
    config = config or eq.config
    if config.grid != eq.grid:
        raise InvalidParameterError("representative and equilibrium grids differ")
    xs = np.atleast_1d(np.asarray(xs, dtype=float))
    grid = eq.grid
    N = eq.bundle.N
    db = eq.bundle.db[:, None, :]
    K = config.norm_K(model.r)
    term = None
    if config.terminal == "bootstrap":
        term = _bootstrap_terminal(eq.field, grid)
    mu = eq.measure_flow

    def run(sl):
        chunk = xs[sl]
        system = _RepresentativeSystem(model, chunk, mu, N, term)
        res = picard_solve(
            system,
            grid,
            db,
            degree=config.basis_degree,
            theta=config.field_theta,
            memory=config.anderson_memory,
            tol=config.picard_tol,
            max_iters=config.max_iters,
            K=K,
            field0=eq.field,
            where=f"representative x={chunk.tolist()}",
        )
        return [(system, res)]

    return chunk_map(run, xs.size, config.batch_size, config.workers)


def _rep_bundle(eq, system, res, b, degree):
    grid = eq.grid
    db = eq.bundle.db

    def zfn():
        sub = _RepresentativeSystem(system.model, system.xs[b : b + 1], system.mu, system.N, system.terminal_fn)
        return regress_z(sub, grid, res.x[:, b : b + 1], res.y[:, b : b + 1], db[:, None, :], degree)[:, 0, :]

    return PathBundle(grid, res.x[:, b, :], res.y[:, b, :], db, zfn)


def solve_representative(model, x, eq: EquilibriumSolution, config: SolverConfig | None = None):
    """(bundle, y0) for the representative system started at x.

    y0 = Y_0^{x, xi} is the value of the decoupling function V(x, L_xi).
    With a sequence of starting points, returns a list of such pairs.
    """
    config = config or eq.config
    scalar = np.ndim(x) == 0
    parts = solve_representatives(model, x, eq, config)
    out = []
    for system, res in parts:
        for b in range(system.n_members):
            bundle = _rep_bundle(eq, system, res, b, config.basis_degree)
            out.append((bundle, float(np.mean(res.y[0, b]))))
    return out[0] if scalar else out


class ValueEstimate(NamedTuple):
    value: float
    tail_bound: float


def value_v(model, x, eq: EquilibriumSolution, rep_bundle: PathBundle, config: SolverConfig | None = None) -> ValueEstimate:
    """V(x, mu) = E int e^{-rt} F(X^x_t, L_{X_t}, Y^x_t) dt along representative paths."""
    grid = eq.grid
    if rep_bundle.grid != grid:
        raise InvalidParameterError("bundle and equilibrium grids differ")
    if not np.allclose(rep_bundle.x[0], x):
        raise InvalidParameterError("representative bundle does not start at x")
    mu = eq.measure_flow
    run = np.array([np.mean(model.running_cost_F(rep_bundle.x[k], mu[k], rep_bundle.y[k])) for k in range(grid.M + 1)])
    w = discount_weights(grid, model.r)
    return ValueEstimate(float(np.dot(w, run)), _tail(grid, model.r, np.abs(run)))
