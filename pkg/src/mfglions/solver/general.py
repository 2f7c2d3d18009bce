"""General infinite-horizon FBSDE mode: lambda-continuation and the frozen map.

    dX = G(t, X, Y, L_(X, A)) dt + sigma dB,   dY = -F(t, X, Y, L_(X, A)) dt + Z dB,   X_0 = xi

The family at level lambda replaces (G, F) by
    lambda G - kappa (1 - lambda) Y + phi,   lambda F + kappa (1 - lambda) X + psi,
and the frozen map Phi at level lambda0 with step delta adds the exogenous
sources delta (G(x, y) + kappa y) and delta (F(x, y) - kappa x) evaluated on
frozen input paths (x, y).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, NamedTuple

import numpy as np

from ..errors import InvalidConstantsError, InvalidParameterError, NoConvergenceError
from ..model import HamiltonianModel
from ..paths import PathBundle, TimeGrid, discount_weights
from .engine import RegressionField, picard_solve, regress_z
from .mfg import SolverConfig

__all__ = [
    "JointLaw",
    "GeneralFbsdeProblem",
    "PhiOutput",
    "ContinuationResult",
    "delta0",
    "lambda_ladder",
    "lq_cast_problem",
    "frozen_map_phi",
    "continuation_solve",
    "contraction_ratios",
    "pair_sq_norm",
]


class JointLaw:
    """Empirical law of (X_t, A_t), one per member: arrays of shape (B, N)."""

    __slots__ = ("x", "a", "__dict__")

    def __init__(self, x, a):
        self.x = x
        self.a = a

    @cached_property
    def mean_x(self) -> np.ndarray:
        return self.x.mean(axis=-1, keepdims=True)

    @cached_property
    def mean_a(self) -> np.ndarray:
        return self.a.mean(axis=-1, keepdims=True)


Coef = Callable[[float, np.ndarray, np.ndarray, JointLaw], np.ndarray]


def delta0(kappa: float, K: float, ell: float) -> float:
    """Continuation step bound (2 kappa - K) / (3 kappa + 11 ell)."""
    if not 2.0 * kappa - K > 0:
        raise InvalidConstantsError(f"need kappa > K/2, got kappa={kappa}, K={K}")
    if not ell > 0:
        raise InvalidConstantsError("ell must be positive")
    return (2.0 * kappa - K) / (3.0 * kappa + 11.0 * ell)


def lambda_ladder(kappa: float, K: float, ell: float, steps=None) -> list[float]:
    """Increasing levels ending at 1 whose increments do not exceed delta0."""
    d0 = delta0(kappa, K, ell)
    if steps is not None:
        steps = [float(s) for s in steps]
        prev = 0.0
        for s in steps:
            if s - prev > d0 + 1e-12:
                raise InvalidParameterError(f"lambda step {s - prev:.4g} exceeds delta0 = {d0:.4g}")
            prev = s
        return steps
    n = math.ceil(1.0 / d0 - 1e-12)
    return [min(1.0, (j + 1) * d0) if j < n - 1 else 1.0 for j in range(n)]


@dataclass
class GeneralFbsdeProblem:
    G: Coef
    F_driver: Coef
    sigma: float
    xi: np.ndarray
    K: float
    ell: float
    kappa: float
    A: np.ndarray | None = None  # (M+1, N) exogenous paths, default zero

    def __post_init__(self):
        self.xi = np.asarray(self.xi, dtype=float).reshape(-1)
        if not self.K > 0:
            raise InvalidConstantsError("K must be positive")
        if not self.kappa > self.K / 2:
            raise InvalidConstantsError(f"monotonicity constant kappa={self.kappa} must exceed K/2={self.K / 2}")
        if not self.ell > 0:
            raise InvalidConstantsError("ell must be positive")

    @property
    def delta0(self) -> float:
        return delta0(self.kappa, self.K, self.ell)

    def a_path(self, M: int) -> np.ndarray:
        if self.A is None:
            return np.zeros((M + 1, 1, self.xi.size))
        A = np.asarray(self.A, dtype=float)
        if A.shape != (M + 1, self.xi.size):
            raise InvalidParameterError(f"A has shape {A.shape}, expected {(M + 1, self.xi.size)}")
        return A[:, None, :]


def lq_cast_problem(model: HamiltonianModel, xi, K: float | None = None) -> GeneralFbsdeProblem:
    """The equilibrium system of an LQ model written as a general problem.

    G = -y, F = alpha x + beta E[X] - r y.  With K = r the monotonicity
    constant is min(alpha, 1) (for beta >= 0) and the Lipschitz constant is
    max(alpha, 1 + r, |beta|).
    """
    if model.name not in ("lq",):
        raise InvalidParameterError("lq_cast_problem needs an LQ model")
    a, b, r = model.params["alpha"], model.params["beta"], model.r
    K = r if K is None else K
    if b < 0:
        raise InvalidParameterError("the monotonicity constant below assumes beta >= 0")
    kappa = min(a, 1.0) - abs(r - K) / 2.0

    def G(t, x, y, law):
        return -y

    def F(t, x, y, law):
        return a * x + b * law.mean_x - r * y

    return GeneralFbsdeProblem(G, F, 1.0, xi, K, max(a, 1.0 + r, abs(b)), kappa)


class _LevelSystem:
    """Level-lambda0 system with frozen delta-sources, B members."""

    coupled = False

    def __init__(self, problem, grid, lam, delta, frozen, phi, psi, B):
        self.p = problem
        self.grid = grid
        self.lam = lam
        self.delta = delta
        self.B = self.n_members = B
        self.sigma = problem.sigma
        self.A = problem.a_path(grid.M)
        self.fx, self.fy = frozen if frozen is not None else (None, None)
        self.phi, self.psi = phi, psi
        N = problem.xi.size
        self._zero = np.zeros((B, N))

    def initial(self):
        return np.broadcast_to(self.p.xi, (self.B, self.p.xi.size)).copy()

    def _fr(self, k):
        if self.fx is None:
            return self._zero, self._zero
        return np.broadcast_to(self.fx[k], self._zero.shape), np.broadcast_to(self.fy[k], self._zero.shape)

    def regressors(self, k, x):
        # Y is regressed on X_t alone.  The frozen inputs used here are
        # functions of a reference state that stays close to X_t, so adding
        # them as regressors makes the fit unidentifiable off the data and
        # the forward pass diverges; the exogenous A_t (independent of X) is
        # kept as an auxiliary column.
        if self.p.A is not None:
            return x, [np.broadcast_to(self.A[k], x.shape)]
        return x, ()

    def _law(self, k, x):
        return JointLaw(x, np.broadcast_to(self.A[k], x.shape))

    def drift(self, k, x, y):
        t = k * self.grid.dt
        kap, lam = self.p.kappa, self.lam
        out = lam * self.p.G(t, x, y, self._law(k, x)) - kap * (1.0 - lam) * y
        if self.delta and self.fx is not None:
            fx, fy = self._fr(k)
            out = out + self.delta * (self.p.G(t, fx, fy, self._law(k, fx)) + kap * fy)
        if self.phi is not None:
            out = out + self.phi[k]
        return out

    def driver(self, k, x, y_next):
        t = k * self.grid.dt
        kap, lam = self.p.kappa, self.lam
        out = lam * self.p.F_driver(t, x, y_next, self._law(k, x)) + kap * (1.0 - lam) * x
        if self.delta and self.fx is not None:
            fx, fy = self._fr(k)
            out = out + self.delta * (self.p.F_driver(t, fx, fy, self._law(k, fx)) - kap * fx)
        if self.psi is not None:
            out = out + self.psi[k]
        return out

    def terminal(self, x):
        return np.zeros_like(x)


class PhiOutput(NamedTuple):
    x: np.ndarray  # (M+1, B, N)
    y: np.ndarray
    field: RegressionField
    iterations: int


def _as_members(a, M):
    a = np.asarray(a, dtype=float)
    return a[:, None, :] if a.ndim == 2 else a


def frozen_map_phi(
    problem: GeneralFbsdeProblem,
    frozen,
    lambda0: float,
    delta: float,
    config: SolverConfig,
    db: np.ndarray | None = None,
    phi=None,
    psi=None,
    field0: RegressionField | None = None,
) -> PhiOutput:
    """Apply the frozen map: solve level lambda0 with the delta-sources of ``frozen``.

    ``frozen`` is a pair of paths (x, y), each (M+1, N) or (M+1, B, N) for B
    inputs solved side by side with common noise; None means no frozen
    input (delta-terms absent).  The level-lambda0 system is solved by
    warm-started Picard iteration rather than by the inductive construction.
    """
    if not 0.0 <= lambda0 < 1.0:
        raise InvalidParameterError("lambda0 must lie in [0, 1)")
    if delta < 0 or (delta > problem.delta0 + 1e-12 and frozen is not None):
        raise InvalidParameterError(f"delta must lie in [0, delta0={problem.delta0:.4g}]")
    grid = config.grid
    M = grid.M
    if frozen is not None:
        fx, fy = (_as_members(a, M) for a in frozen)
        if fx.shape[0] != M + 1 or fx.shape != fy.shape:
            raise InvalidParameterError("frozen paths do not match the grid")
        B = fx.shape[1]
        frozen = (fx, fy)
    else:
        B = 1
    phi = None if phi is None else _as_members(phi, M)
    psi = None if psi is None else _as_members(psi, M)
    if db is None:
        db = config.brownian()
    system = _LevelSystem(problem, grid, lambda0, delta, frozen, phi, psi, B)
    res = picard_solve(
        system,
        grid,
        db[:, None, :] if db.ndim == 2 else db,
        degree=config.basis_degree,
        n_aux=int(problem.A is not None),
        theta=config.field_theta,
        memory=config.anderson_memory,
        tol=config.picard_tol,
        max_iters=config.max_iters,
        K=problem.K,
        field0=field0,
        where=f"frozen map at lambda={lambda0:g}",
    )
    return PhiOutput(res.x, res.y, res.field, res.iterations)


def pair_sq_norm(x, y, K: float, grid: TimeGrid) -> np.ndarray:
    """||x||_K^2 + ||y||_K^2 per member for (M+1, B, N) paths."""
    w = discount_weights(grid, K)
    return np.einsum("k,kb->b", w, np.mean(x * x, axis=-1) + np.mean(y * y, axis=-1))


@dataclass
class ContinuationResult:
    bundle: PathBundle
    ladder: list
    outer_iterations: list  # frozen-map iterations per lambda step
    residuals: list  # per step, the fixed-point residual history
    contraction_ratios: list  # per step, successive residual ratios (squared norms)


def continuation_solve(problem: GeneralFbsdeProblem, config: SolverConfig, db=None, outer_max: int = 50) -> ContinuationResult:
    """Solve the problem by continuation from the explicitly solvable lambda = 0 system."""
    grid = config.grid
    if problem.xi.size != config.N:
        raise InvalidParameterError("xi size does not match config.N")
    if db is None:
        db = config.brownian()
    ladder = lambda_ladder(problem.kappa, problem.K, problem.ell, config.lambda_steps)
    outer_tol = config.picard_tol * 10.0
    base = frozen_map_phi(problem, None, 0.0, 0.0, config, db)
    x, y, fld = base.x, base.y, base.field
    prev = 0.0
    iters, hist, ratios = [], [], []
    for j, lam in enumerate(ladder):
        delta = lam - prev
        step_hist = []
        for it in range(1, outer_max + 1):
            out = frozen_map_phi(problem, (x[:, 0], y[:, 0]), prev, delta, config, db, field0=fld)
            res = float(np.sqrt(pair_sq_norm(out.x - x, out.y - y, problem.K, grid)[0]))
            x, y, fld = out.x, out.y, out.field
            step_hist.append(res)
            if res < outer_tol:
                break
        else:
            raise NoConvergenceError(
                f"frozen-map iteration did not converge at lambda step {j} ({prev:g} -> {lam:g}); residual {res:.3g}",
                history=step_hist,
                where=f"lambda step {j}",
            )
        iters.append(it)
        hist.append(step_hist)
        ratios.append([(b / a) ** 2 for a, b in zip(step_hist, step_hist[1:]) if a > 0])
        prev = lam
    # the last fixed point solves level 1: a plain level-1 solve from it is the final output
    final_sys = _LevelSystem(problem, grid, 1.0, 0.0, None, None, None, 1)

    def zfn():
        return regress_z(final_sys, grid, x, y, db[:, None, :], config.basis_degree)[:, 0, :]

    bundle = PathBundle(grid, x[:, 0, :], y[:, 0, :], db, zfn)
    return ContinuationResult(bundle, ladder, iters, hist, ratios)


def contraction_ratios(
    problem: GeneralFbsdeProblem,
    config: SolverConfig,
    n_pairs: int = 10,
    seed: int = 0,
    lambda0: float = 0.0,
    delta: float | None = None,
    db=None,
):
    """Empirical ||Phi(u) - Phi(u')||^2_K / ||u - u'||^2_K over random input pairs.

    Inputs are random affine images u = (a X0 + b Y0 + c, d X0 + e Y0 + f)
    of the level-lambda0 reference solution (X0, Y0), so they are adapted,
    square integrable and share the base noise.
    """
    grid = config.grid
    if db is None:
        db = config.brownian()
    delta = problem.delta0 if delta is None else delta
    ref = frozen_map_phi(problem, None, lambda0, 0.0, config, db)
    X0, Y0 = ref.x[:, 0, :], ref.y[:, 0, :]
    rng = np.random.default_rng(seed)
    coefs = rng.normal(size=(2 * n_pairs, 6))
    ratios = []
    for s in range(0, 2 * n_pairs, 2 * config.batch_size):
        cb = coefs[s : s + 2 * config.batch_size]
        fx = np.stack([c[0] * X0 + c[1] * Y0 + c[2] for c in cb], axis=1)
        fy = np.stack([c[3] * X0 + c[4] * Y0 + c[5] for c in cb], axis=1)
        out = frozen_map_phi(problem, (fx, fy), lambda0, delta, config, db, field0=ref.field)
        num = pair_sq_norm(out.x[:, 0::2] - out.x[:, 1::2], out.y[:, 0::2] - out.y[:, 1::2], problem.K, grid)
        den = pair_sq_norm(fx[:, 0::2] - fx[:, 1::2], fy[:, 0::2] - fy[:, 1::2], problem.K, grid)
        ratios.extend((num / den).tolist())
    return ratios
