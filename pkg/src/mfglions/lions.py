"""Variational systems and the Lions derivative of the decoupling function.

Every system here is linear in its unknowns and runs along frozen base
paths: the equilibrium X^xi and representative paths X^{x,xi}.  The tilde
expectations E~[g(Theta_t, Theta~_t) W~_t] are particle averages over an
independent copy of the ensemble; with shared noise the copy is the
ensemble itself.

Each system is handed to the same Picard engine as the nonlinear ones.  The
decoupling field is regressed on the base state (primary regressor) with
the system's own state as auxiliary column, so for a linear system
Y = a(t, X) W + b(t, X) is represented exactly up to the polynomial degree.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameterError, ZeroProbabilityAtomError
from .model import HamiltonianModel
from .paths import PathBundle, discount_weights
from .solver.engine import chunk_map, picard_solve, regress_z
from .solver.mfg import (
    EquilibriumSolution,
    SolverConfig,
    solve_equilibrium,
    solve_representative,
    value_v,
)

__all__ = [
    "VariationalBundle",
    "NablaBundle",
    "tilde_mean",
    "solve_delta_equilibrium",
    "solve_delta_representative",
    "solve_nabla_discrete",
    "lions_field",
    "value_directional",
    "fd_check",
    "FdCheckReport",
]


# ---------------------------------------------------------------------------
# tilde expectations


def tilde_mean(fn, model: HamiltonianModel, xo, mu, yo, xt, wt, n_tilde: int = 256, chunk: int = 2048):
    """E~[fn(x, mu, y, X~) W~] for each outer particle.

    xo, yo: outer arguments (B, N); xt, wt: tilde samples (B, Nt).
    When the model's measure derivatives are flat (free of x~, though they
    may still depend on x and y) the average factorises into fn times the
    mean of wt; otherwise it is a pairwise average over the first
    ``n_tilde`` tilde samples.  The result broadcasts against (B, N).
    """
    xt = np.atleast_2d(xt)
    wt = np.atleast_2d(wt)
    if model.flat_mu:
        g = np.asarray(fn(xo, mu, yo, xt[:, :1]), dtype=float)
        return g * wt.mean(axis=1, keepdims=True)
    xs = xt[:, :n_tilde, None].transpose(0, 2, 1)  # (B, 1, n)
    ws = wt[:, :n_tilde, None].transpose(0, 2, 1)
    B = max(xo.shape[0], xt.shape[0])
    N = xo.shape[1]
    out = np.empty((B, N))
    for s in range(0, N, chunk):
        sl = slice(s, s + chunk)
        g = fn(xo[:, sl, None], mu, yo[:, sl, None], xs)
        out[:, sl] = np.mean(g * ws, axis=2)
    return out


# ---------------------------------------------------------------------------
# bundles


@dataclass
class VariationalBundle(PathBundle):
    """Solution (dX, dY, dZ) of a variational system, time-major storage."""

    eta: np.ndarray | None = None

    @property
    def dX(self) -> np.ndarray:
        return self.X

    @property
    def dY(self) -> np.ndarray:
        return self.Y

    @property
    def dZ(self) -> np.ndarray:
        return self.Z


@dataclass
class NablaBundle:
    """Paths of the nabla systems for one atom or one x~.

    own/star: the pair of the two-dimensional system (own perturbation
    started at 1, star started at 0); total: the composite system along the
    representative paths, whose Y_0 is the Lions derivative.
    """

    own: PathBundle
    star: PathBundle
    total: PathBundle
    tag: dict = field(default_factory=dict)

    @property
    def dmu(self) -> float:
        return float(np.mean(self.total.y[0]))


# ---------------------------------------------------------------------------
# linear systems


class _Base:
    """Frozen base paths plus model coefficients for the linear systems."""

    def __init__(self, model, flow, bx, by, slope_field):
        self.model = model
        self.slope_field = slope_field  # decoupling field of the base system
        self.mu = flow  # list of EmpiricalMeasure per node
        self.bx = bx  # (M+1, B, N) base X per member
        self.by = by

    def coeffs(self, k):
        m, mu = self.model, self.mu[k]
        x, y = self.bx[k], self.by[k]
        return m.dH_xy(x, mu, y), m.dH_yy(x, mu, y), m.dH_xx(x, mu, y)


class _LinearSystem:
    """dW = [hxy W + hyy V + src_y] dt,  dV = -[hxx W + hxy V - r V + src_x] dt + Z dB.

    ``sources(k, w)`` returns (src_y, src_x) arrays broadcastable to (B, N);
    subclasses implement it.  Extra per-particle regressors (indicators) can
    be given in ``features`` (list of (B, N) arrays).
    """

    sigma = 0.0
    primary_sigma = 1.0  # the base paths carry the Brownian noise
    coupled = False

    def __init__(self, base: _Base, w0, features=()):
        self.base = base
        self.w0 = np.asarray(w0, dtype=float)
        self.n_members = self.w0.shape[0]
        self.features = list(features)
        self._cache_k = None
        self._slope_k = None

    @property
    def n_aux(self):
        return len(self.features)

    def initial(self):
        return self.w0.copy()

    def regressors(self, k, w):
        return self.base.bx[k], self.features

    def known_slope(self, k):
        # The homogeneous part of every system here is the linearisation of
        # the base FBSDE under its frozen flow, whose decoupling is Y = u(t, X);
        # hence V = du/dx (t, X) W + (source part), and only the source part
        # is left to the regression.  This also keeps W out of the design,
        # where it would be collinear with the intercept whenever W is the
        # same for all particles (eta constant, all paths from one point).
        if self._slope_k != k:
            self._slope = self.base.slope_field.deriv(k, self.base.bx[k])
            self._slope_k = k
        return self._slope

    def _c(self, k):
        if self._cache_k != k:
            self._cache = self.base.coeffs(k)
            self._cache_k = k
        return self._cache

    def sources(self, k, w):
        raise NotImplementedError

    def drift(self, k, w, v):
        hxy, hyy, _ = self._c(k)
        sy, _ = self.sources(k, w)
        return hxy * w + hyy * v + sy

    def driver(self, k, w, v_next):
        hxy, _, hxx = self._c(k)
        _, sx = self.sources(k, w)
        return hxx * w + hxy * v_next - self.base.model.r * v_next + sx


class _SelfCoupled(_LinearSystem):
    """Sources E~[dH_.mu(X, mu, Y, X~) W~] over the member's own ensemble."""

    def __init__(self, base, w0, n_tilde, features=()):
        super().__init__(base, w0, features)
        self.n_tilde = n_tilde

    def sources(self, k, w):
        m, mu = self.base.model, self.base.mu[k]
        x, y = self.base.bx[k], self.base.by[k]
        sy = tilde_mean(m.dH_ymu, m, x, mu, y, x, w, self.n_tilde)
        sx = tilde_mean(m.dH_xmu, m, x, mu, y, x, w, self.n_tilde)
        return sy, sx


class _Exogenous(_LinearSystem):
    """Sources from tilde ensembles fixed in advance: a list of (xt, wt) paths."""

    def __init__(self, base, w0, tilde, n_tilde, features=()):
        super().__init__(base, w0, features)
        self.tilde = tilde  # list of (xt (M+1, B, Nt), wt (M+1, B, Nt))
        self.n_tilde = n_tilde

    def sources(self, k, w):
        m, mu = self.base.model, self.base.mu[k]
        x, y = self.base.bx[k], self.base.by[k]
        sy = 0.0
        sx = 0.0
        for xt, wt in self.tilde:
            sy = sy + tilde_mean(m.dH_ymu, m, x, mu, y, xt[k], wt[k], self.n_tilde)
            sx = sx + tilde_mean(m.dH_xmu, m, x, mu, y, xt[k], wt[k], self.n_tilde)
        return sy, sx


class _PairSystem(_LinearSystem):
    """Two-dimensional system of a discrete atom: members (own, star).

    own runs along X^{x_i, xi} with its tilde terms scaled by p_i; star runs
    along X^xi with its tilde terms switched off on {xi = x_i}.  Both tilde
    terms average own * g(., X~^{x_i,xi}) + star * g(., X~^xi).
    """

    coupled = True

    def __init__(self, base, p, ind, n_tilde):
        w0 = np.zeros(base.bx.shape[1:])
        w0[0] = 1.0
        feats = [np.stack([np.zeros_like(ind), ind])]
        super().__init__(base, w0, feats)
        self.p = p
        self.ind = ind  # (N,) indicator of xi != x_i
        self.n_tilde = n_tilde

    def sources(self, k, w):
        m, mu = self.base.model, self.base.mu[k]
        x, y = self.base.bx[k], self.base.by[k]
        sy = np.zeros((2, 1)) if m.flat_mu else np.zeros_like(x)
        sx = np.zeros_like(sy)
        for j in range(2):
            xt = np.broadcast_to(x[j], x.shape)
            wt = np.broadcast_to(w[j], x.shape)
            sy = sy + tilde_mean(m.dH_ymu, m, x, mu, y, xt, wt, self.n_tilde)
            sx = sx + tilde_mean(m.dH_xmu, m, x, mu, y, xt, wt, self.n_tilde)
        scale = np.stack([np.full(x.shape[1], self.p), self.ind])
        return sy * scale, sx * scale


def _solve(system, eq: EquilibriumSolution, config: SolverConfig, where: str):
    grid = eq.grid
    return picard_solve(
        system,
        grid,
        eq.bundle.db[:, None, :],
        degree=config.basis_degree,
        n_aux=system.n_aux,
        theta=config.field_theta,
        memory=config.anderson_memory,
        tol=config.picard_tol,
        max_iters=config.max_iters,
        K=config.norm_K(eq.model.r),
        where=where,
    )


class _MemberView:
    """Single-member view of a solved linear system, for the Z regression."""

    n_members = 1

    def __init__(self, system, b):
        self.system, self.b = system, b

    def regressors(self, k, w):
        prim, aux = self.system.regressors(k, w)
        b = self.b
        pick = lambda a: a[b : b + 1] if np.ndim(a) == 2 and a.shape[0] > 1 else a
        return prim[b : b + 1], [w] + [pick(f) for f in aux]


def _vbundle(eq, system, res, b, degree, eta=None):
    grid, db = eq.grid, eq.bundle.db
    x, y = res.x[:, b, :], res.y[:, b, :]
    view = _MemberView(system, b)

    def zfn():
        return regress_z(view, grid, x[:, None, :], y[:, None, :], db[:, None, :], degree)[:, 0, :]

    return VariationalBundle(grid, x, y, db, zfn, eta=eta)


# ---------------------------------------------------------------------------
# public operations


def _eq_base(eq, B):
    bx = np.broadcast_to(eq.bundle.x[:, None, :], (eq.grid.M + 1, B, eq.bundle.N))
    by = np.broadcast_to(eq.bundle.y[:, None, :], bx.shape)
    return _Base(eq.model, eq.measure_flow, bx, by, eq.field)


def solve_delta_equilibrium(eq: EquilibriumSolution, eta_samples, config: SolverConfig | None = None):
    """Variational equilibrium system started at dX_0 = eta.

    ``eta_samples`` is (N,) or (B, N) for several directions solved side by
    side; index j of eta belongs to particle j of eq.  Returns one
    VariationalBundle or a list of them.
    """
    config = config or eq.config
    eta = np.asarray(eta_samples, dtype=float)
    if eta.ndim and eta.shape[-1] not in (1, eq.bundle.N):
        raise InvalidParameterError(f"eta has {eta.shape[-1]} samples for N={eq.bundle.N}")
    single = eta.ndim <= 1
    eta = np.atleast_2d(np.broadcast_to(eta, eta.shape[:-1] + (eq.bundle.N,)) if eta.ndim else np.full(eq.bundle.N, float(eta)))
    if eta.shape[-1] != eq.bundle.N:
        raise InvalidParameterError(f"eta has {eta.shape[-1]} samples for N={eq.bundle.N}")
    eq.measure_flow  # build the shared measure list before any worker starts

    def run(sl):
        chunk = eta[sl]
        sys_ = _SelfCoupled(_eq_base(eq, chunk.shape[0]), chunk, config.n_tilde)
        res = _solve(sys_, eq, config, "delta equilibrium")
        return [_vbundle(eq, sys_, res, b, config.basis_degree, chunk[b]) for b in range(chunk.shape[0])]

    out = chunk_map(run, eta.shape[0], config.batch_size, config.workers)
    return out[0] if single else out


def _rep_paths(model, x, eq, config):
    """Representative base paths at each x: arrays (M+1, B, N) for x and y."""
    pairs = solve_representative(model, list(np.atleast_1d(x)), eq, config)
    bx = np.stack([b.x for b, _ in pairs], axis=1)
    by = np.stack([b.y for b, _ in pairs], axis=1)
    return bx, by, [y0 for _, y0 in pairs]


def solve_delta_representative(x: float, eq: EquilibriumSolution, delta_eq, config: SolverConfig | None = None, rep=None):
    """Variational representative system along X^{x, xi}, dX_0 = 0.

    ``delta_eq`` is a VariationalBundle (or a list, one per direction).
    ``rep`` optionally supplies the representative base paths (bx, by) with
    shapes (M+1, N).  Returns (bundle, dY0) or a list of such pairs.
    """
    config = config or eq.config
    single = isinstance(delta_eq, PathBundle)
    deltas = [delta_eq] if single else list(delta_eq)
    if rep is None:
        bx, by, _ = _rep_paths(eq.model, [x], eq, config)
        rx, ry = bx[:, 0], by[:, 0]
    else:
        rx, ry = rep
    eq.measure_flow

    def run(sl):
        chunk = deltas[sl]
        B = len(chunk)
        out = []
        bx = np.broadcast_to(rx[:, None, :], (rx.shape[0], B, rx.shape[1]))
        by = np.broadcast_to(ry[:, None, :], bx.shape)
        xt = np.broadcast_to(eq.bundle.x[:, None, :], (rx.shape[0], B, eq.bundle.N))
        wt = np.stack([d.x for d in chunk], axis=1)
        sys_ = _Exogenous(_Base(eq.model, eq.measure_flow, bx, by, eq.field), np.zeros((B, rx.shape[1])), [(xt, wt)], config.n_tilde)
        res = _solve(sys_, eq, config, f"delta representative x={x}")
        for b in range(B):
            vb = _vbundle(eq, sys_, res, b, config.basis_degree, chunk[b].eta)
            out.append((vb, float(np.mean(res.y[0, b]))))
        return out

    out = chunk_map(run, len(deltas), config.batch_size, config.workers)
    return out[0] if single else out


def _atoms(xi, tol=0.0):
    vals, inv, cnt = np.unique(xi, return_inverse=True, return_counts=True)
    return vals, inv, cnt / xi.size


def solve_nabla_discrete(x: float, eq: EquilibriumSolution, atom_index: int, config: SolverConfig | None = None, rep_x=None):
    """Lions derivative at atom x_i of a discrete initial law.

    Solves the two-dimensional (own, star) system and the composite system
    along X^{x, xi}.  Returns (NablaBundle, dmu) with dmu the derivative at
    the atom.  The atom probability p_i is the empirical frequency of x_i
    among the equilibrium particles.
    """
    config = config or eq.config
    vals, inv, probs = _atoms(eq.xi)
    if vals.size > max(64, eq.xi.size // 4):
        raise InvalidParameterError("initial law does not look discrete (too many distinct atoms)")
    if not 0 <= atom_index < vals.size:
        raise ZeroProbabilityAtomError(f"atom index {atom_index} has zero probability (law has {vals.size} atoms)")
    xi_i, p_i = float(vals[atom_index]), float(probs[atom_index])
    if p_i <= 0:
        raise ZeroProbabilityAtomError(f"atom {xi_i} has zero probability")
    model = eq.model
    N = eq.bundle.N
    same = math.isclose(x, xi_i)
    bx_i, by_i, _ = _rep_paths(model, [xi_i] + ([] if same else [x]), eq, config)
    # pair along (X^{x_i, xi}, X^xi)
    bx = np.stack([bx_i[:, 0], eq.bundle.x], axis=1)
    by = np.stack([by_i[:, 0], eq.bundle.y], axis=1)
    ind = (eq.xi != xi_i).astype(float)
    pair = _PairSystem(_Base(model, eq.measure_flow, bx, by, eq.field), p_i, ind, config.n_tilde)
    pres = _solve(pair, eq, config, f"nabla pair x_i={xi_i}")
    # composite along X^{x, xi}
    rx, ry = (bx_i[:, 0], by_i[:, 0]) if same else (bx_i[:, 1], by_i[:, 1])
    tot = _Exogenous(
        _Base(model, eq.measure_flow, rx[:, None, :], ry[:, None, :], eq.field),
        np.zeros((1, N)),
        [(bx[:, 0:1], pres.x[:, 0:1]), (bx[:, 1:2], pres.x[:, 1:2])],
        config.n_tilde,
    )
    tres = _solve(tot, eq, config, f"nabla total x={x}")
    deg = config.basis_degree
    nb = NablaBundle(
        _vbundle(eq, pair, pres, 0, deg),
        _vbundle(eq, pair, pres, 1, deg),
        _vbundle(eq, tot, tres, 0, deg),
        {"kind": "discrete", "x": float(x), "atom": xi_i, "p": p_i, "iterations": [pres.iterations, tres.iterations]},
    )
    return nb, nb.dmu


def lions_field(
    x: float,
    eq: EquilibriumSolution,
    xtilde_grid,
    config: SolverConfig | None = None,
    return_bundles=False,
    return_se=False,
):
    """psi(x, L_xi, x~) for every x~ in the grid via the continuous systems.

    For each x~: the first-variation system along X^{x~, xi} (started at 1,
    no tilde terms), then the equilibrium-side system (started at 0, tilde
    terms over the first one and itself), then the composite system along
    X^{x, xi} whose Y_0 is psi.  Grid points are solved in batches of
    config.batch_size and do not interact; with config.workers > 1 the
    batches run concurrently on the read-only base solution.

    With ``return_se`` the martingale standard error of each psi value is
    returned as well: (psi, se), or (psi, se, bundles) with both flags.
    """
    config = config or eq.config
    grid_pts = np.atleast_1d(np.asarray(xtilde_grid, dtype=float))
    model = eq.model
    N = eq.bundle.N
    rx_all, ry_all, _ = _rep_paths(model, [x], eq, config)
    rx, ry = rx_all[:, 0], ry_all[:, 0]
    eq.measure_flow

    def run(sl):
        pts = grid_pts[sl]
        B = pts.size
        deg = config.basis_degree
        bx, by, _ = _rep_paths(model, pts, eq, config)
        # first variation along X^{x~, xi}
        pa1 = _Exogenous(_Base(model, eq.measure_flow, bx, by, eq.field), np.ones((B, N)), [], config.n_tilde)
        r1 = _solve(pa1, eq, config, f"first variation x~={pts.tolist()}")
        w1 = r1.x
        if return_bundles:
            keep1 = [_vbundle(eq, pa1, r1, b, deg) for b in range(B)]
        # at desk scale every (M+1, B, N) array is hundreds of MB: drop
        # each stage's paths as soon as later stages no longer need them
        del pa1, r1, by
        # equilibrium side: exogenous tilde over pa1 plus self coupling
        pa2 = _Pa2System(_eq_base(eq, B), np.zeros((B, N)), (bx, w1), config.n_tilde)
        r2 = _solve(pa2, eq, config, f"equilibrium side x~={pts.tolist()}")
        w2 = r2.x
        if return_bundles:
            keep2 = [_vbundle(eq, pa2, r2, b, deg) for b in range(B)]
        del pa2, r2
        ex = np.broadcast_to(eq.bundle.x[:, None, :], w2.shape)
        tot = _Exogenous(
            _Base(model, eq.measure_flow, np.broadcast_to(rx[:, None, :], (rx.shape[0], B, N)), np.broadcast_to(ry[:, None, :], (rx.shape[0], B, N)), eq.field),
            np.zeros((B, N)),
            [(bx, w1), (ex, w2)],
            config.n_tilde,
        )
        r3 = _solve(tot, eq, config, f"composite x={x}")
        out = []
        for b in range(B):
            nb = None
            if return_bundles:
                nb = NablaBundle(
                    keep1[b],
                    keep2[b],
                    _vbundle(eq, tot, r3, b, deg),
                    {"kind": "continuous", "x": float(x), "xtilde": float(pts[b])},
                )
            se = _vbundle(eq, tot, r3, b, deg).martingale_se(model.r) if return_se else None
            out.append((float(np.mean(r3.y[0, b])), se, nb))
        return out

    res = chunk_map(run, grid_pts.size, config.batch_size, config.workers)
    psi = np.array([v for v, _, _ in res])
    out = (psi,)
    if return_se:
        out += (np.array([se for _, se, _ in res]),)
    if return_bundles:
        out += ([nb for _, _, nb in res],)
    return out[0] if len(out) == 1 else out


class _Pa2System(_LinearSystem):
    """Equilibrium-side system: tilde terms over (pa1 on X^{x~}) and itself."""

    def __init__(self, base, w0, ext, n_tilde):
        super().__init__(base, w0)
        self.ext = ext  # (bx, wx) each (M+1, B, N)
        self.n_tilde = n_tilde
        self._ek = None

    def sources(self, k, w):
        m, mu = self.base.model, self.base.mu[k]
        x, y = self.base.bx[k], self.base.by[k]
        if self._ek is None or self._ek[0] != k:
            ex, ew = self.ext
            e = (
                tilde_mean(m.dH_ymu, m, x, mu, y, ex[k], ew[k], self.n_tilde),
                tilde_mean(m.dH_xmu, m, x, mu, y, ex[k], ew[k], self.n_tilde),
            )
            self._ek = (k, e)
        ey, exs = self._ek[1]
        sy = ey + tilde_mean(m.dH_ymu, m, x, mu, y, x, w, self.n_tilde)
        sx = exs + tilde_mean(m.dH_xmu, m, x, mu, y, x, w, self.n_tilde)
        return sy, sx


# ---------------------------------------------------------------------------
# value function sensitivity and finite-difference checks


def value_directional(x: float, eq: EquilibriumSolution, delta_eq: VariationalBundle, delta_rep: VariationalBundle, config=None, rep_bundle: PathBundle | None = None) -> float:
    """Directional derivative of V(x, .) along eta.

    Discounted integral of dF_x dX + dF_y dY + E~[dF_mu(., X~^xi) dX~^xi]
    along the representative paths, where F = H - y dH_y.
    """
    config = config or eq.config
    model = eq.model
    if rep_bundle is None:
        rep_bundle, _ = solve_representative(model, x, eq, config)
    mu = eq.measure_flow
    M = eq.grid.M
    run = np.empty(M + 1)
    for k in range(M + 1):
        xr, yr = rep_bundle.x[k][None], rep_bundle.y[k][None]
        a = model.dF_x(xr, mu[k], yr) * delta_rep.x[k] + model.dF_y(xr, mu[k], yr) * delta_rep.y[k]
        t = tilde_mean(model.dF_mu, model, xr, mu[k], yr, eq.bundle.x[k][None], delta_eq.x[k][None], config.n_tilde)
        run[k] = float(np.mean(a + t))
    return float(np.dot(discount_weights(eq.grid, model.r), run))


@dataclass
class FdCheckReport:
    x: float
    deltas: list
    quotients: list
    e_psi_eta: float
    gaps: list
    trend_slope: float  # log-log slope of |gap| against delta
    value_quotients: list = field(default_factory=list)
    value_directional: float | None = None
    common_random_numbers: bool = True

    def as_dict(self) -> dict:
        return {
            "x": self.x,
            "rows": [
                {"delta": d, "quotient": q, "e_psi_eta": self.e_psi_eta, "gap": g}
                for d, q, g in zip(self.deltas, self.quotients, self.gaps)
            ],
            "trend_slope": self.trend_slope,
            "value_quotients": self.value_quotients,
            "value_directional": self.value_directional,
            "common_random_numbers": self.common_random_numbers,
        }


def _trend(deltas, gaps):
    d = np.log(np.asarray(deltas))
    g = np.log(np.maximum(np.abs(np.asarray(gaps)), 1e-300))
    if d.size < 2:
        return float("nan")
    return float(np.polyfit(d, g, 1)[0])


def fd_check(x: float, model: HamiltonianModel, xi_samples, eta_samples, deltas, config: SolverConfig, with_value=False) -> FdCheckReport:
    """Finite-difference quotients of the decoupling function along eta.

    For each delta the equilibrium and representative systems are re-solved
    at xi + delta eta with the same Brownian increments (common random
    numbers) and compared against E[psi eta] as computed by the variational
    pipeline (delta equilibrium followed by delta representative).
    """
    deltas = [float(d) for d in deltas]
    if any(d <= 0 for d in deltas) or any(b >= a for a, b in zip(deltas, deltas[1:])):
        raise InvalidParameterError("deltas must be positive and decreasing")
    xi = np.asarray(xi_samples, dtype=float)
    eta = np.broadcast_to(np.asarray(eta_samples, dtype=float), xi.shape).copy()
    db = config.brownian()
    eq = solve_equilibrium(model, xi, config, db=db)
    rep, y0 = solve_representative(model, x, eq, config)
    d_eq = solve_delta_equilibrium(eq, eta, config)
    d_rep, dy0 = solve_delta_representative(x, eq, d_eq, config, rep=(rep.x, rep.y))
    v_dir = None
    v0 = None
    if with_value:
        v0 = value_v(model, x, eq, rep, config).value
        v_dir = value_directional(x, eq, d_eq, d_rep, config, rep)
    quots, vq = [], []
    for d in deltas:
        eq_d = solve_equilibrium(model, xi + d * eta, config, db=db)
        rep_d, y0_d = solve_representative(model, x, eq_d, config)
        quots.append((y0_d - y0) / d)
        if with_value:
            vq.append((value_v(model, x, eq_d, rep_d, config).value - v0) / d)
    gaps = [q - dy0 for q in quots]
    return FdCheckReport(float(x), deltas, quots, dy0, gaps, _trend(deltas, gaps), vq, v_dir)
