"""Regression Monte Carlo Picard engine for forward-backward systems.

All solvers in the package reduce to the same numerical scheme.  Paths are
stored time-major with shape (M+1, B, N): B "members" (independent systems
solved side by side, or the components of one coupled system) of N
particles each.  Each member carries its own decoupling field

    Y_k = S_k X_k + u_k(primary_k, aux_k),

a least-squares polynomial in the standardised primary regressor plus
auxiliary columns aux * z^j, and an optional known slope S_k supplied by
the system (used by linear systems whose decoupling slope is available in
closed form from the base solution).  One Picard sweep is

    backward:  Y_k <- E[Y_{k+1} + F_k dt - sigma dB_k d_x u_{k+1} | F_k]   (regression)
    forward:   X_{k+1} = X_k + G_k dt + sigma dB_k  with Y_k = u_k(X_k)

The dB term is a martingale control variate: it has zero conditional mean
and removes most of the one-step noise from the regression target.  The
backward image of the current field is mixed with the previous fields by
Anderson acceleration (relaxation theta, bounded memory), per member unless
the members are coupled.  The sweep residual is ||X_new - X_old||_K^2 plus
the Gram-weighted coefficient change, which equals ||u_new - u_old||_K^2
on the current paths.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from ..errors import NoConvergenceError, RegressionSingularError
from ..paths import TimeGrid, discount_weights

__all__ = [
    "FBSystem",
    "RegressionField",
    "PicardResult",
    "picard_solve",
    "build_design",
    "batched_lstsq",
    "regress_z",
    "chunk_map",
]


def chunk_map(fn, n: int, size: int, workers: int = 1) -> list:
    """Apply fn to consecutive slices of range(n) of length ``size``.

    Each call returns a list; the lists are concatenated in slice order.
    The slicing depends on ``size`` only, so results are the same for every
    worker count.  With workers > 1 slices run on a thread pool (numpy
    releases the GIL in the heavy kernels).
    """
    slices = [slice(s, min(s + size, n)) for s in range(0, n, size)]
    if workers <= 1 or len(slices) <= 1:
        parts = [fn(sl) for sl in slices]
    else:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(fn, slices))
    return [v for part in parts for v in part]


class FBSystem(Protocol):
    """What the engine needs from a forward-backward system.

    Arrays passed in and out have shape (B, N) unless noted.
    Optional attributes: ``primary_sigma`` (noise loading of the primary
    regressor, used by the control variate; defaults to ``sigma``),
    ``known_slope(k) -> (B, N)`` (see the module docstring), ``terminal(x)``
    and ``after_forward(x)`` (called with the full path array after each
    forward pass).
    """

    n_members: int
    sigma: float | np.ndarray  # scalar or (B, 1)
    coupled: bool  # members interact, so they converge jointly

    def initial(self) -> np.ndarray: ...

    def regressors(self, k: int, x: np.ndarray) -> tuple[np.ndarray, Sequence[np.ndarray]]: ...

    def drift(self, k: int, x: np.ndarray, y: np.ndarray) -> np.ndarray: ...

    def driver(self, k: int, x: np.ndarray, y_next: np.ndarray) -> np.ndarray: ...


def build_design(primary, aux, degree, shift=None, scale=None):
    """Design tensor (B, P, N) with columns z^0..z^d, a z^0..a z^(d-1) per aux.

    ``shift``/``scale`` standardise the primary regressor; when omitted they
    are the per-member sample mean and standard deviation.
    """
    primary = np.asarray(primary, dtype=float)
    B, N = primary.shape
    if shift is None:
        shift = primary.mean(axis=1)
        scale = primary.std(axis=1)
        scale = np.where(scale > 1e-12 * (1.0 + np.abs(shift)), scale, 1.0)
    z = (primary - shift[:, None]) / scale[:, None]
    P = degree + 1 + len(aux) * degree
    D = np.empty((B, P, N))
    D[:, 0] = 1.0
    for j in range(1, degree + 1):
        np.multiply(D[:, j - 1], z, out=D[:, j])
    col = degree + 1
    for a in aux:
        a = np.broadcast_to(a, (B, N))
        for j in range(degree):
            np.multiply(a, D[:, j], out=D[:, col])
            col += 1
    return D, shift, scale


def batched_lstsq(D: np.ndarray, target: np.ndarray, rcond: float = 1e-10, ridge: float = 0.0) -> np.ndarray:
    """Least-squares coefficients (B, P) for D^T c ~ target, per member.

    Normal equations with unit-diagonal rescaling and an eigenvalue cutoff;
    exactly collinear columns (for instance all powers of a constant
    regressor) get the minimum-norm solution instead of an error.  ``ridge``
    adds a Tikhonov term to the rescaled normal equations.
    """
    B, P, N = D.shape
    if N < P:
        raise RegressionSingularError(f"{N} samples cannot determine {P} regression coefficients")
    multi = target.ndim == 3  # (B, R, N): several targets on one design
    G = D @ D.transpose(0, 2, 1)
    rhs = D @ (target.transpose(0, 2, 1) if multi else target[:, :, None])
    if not (np.all(np.isfinite(G)) and np.all(np.isfinite(rhs))):
        raise RegressionSingularError("non-finite entries in the regression design or target")
    s = np.sqrt(np.einsum("bii->bi", G))
    s = np.where(s > 0, s, 1.0)
    Gn = G / (s[:, :, None] * s[:, None, :])
    if ridge:
        Gn = Gn + ridge * np.eye(P)
    w, V = np.linalg.eigh(Gn)
    cut = rcond * np.maximum(w[:, -1:], 1e-300)
    inv = np.where(w > cut, 1.0 / np.where(w > cut, w, 1.0), 0.0)
    proj = V.transpose(0, 2, 1) @ (rhs / s[:, :, None])
    coef = (V @ (inv[:, :, None] * proj)) / s[:, :, None]
    return coef.transpose(0, 2, 1) if multi else coef[:, :, 0]


def _predict(coef, D):
    return np.einsum("bp,bpn->bn", coef, D)


def _horner(c, z):
    """Value and z-derivative of sum_j c[:, j] z^j, c of shape (B, J)."""
    v = np.broadcast_to(c[:, -1:], z.shape).copy()
    dv = np.zeros_like(z)
    for j in range(c.shape[1] - 2, -1, -1):
        dv *= z
        dv += v
        v *= z
        v += c[:, j : j + 1]
    return v, dv


def _zrange(primary, shift, scale):
    z = (primary - shift[:, None]) / scale[:, None]
    return z.min(axis=1), z.max(axis=1)


@dataclass
class RegressionField:
    """Per-node regression coefficients of a decoupling field."""

    degree: int
    shift: np.ndarray  # (M+1, B)
    scale: np.ndarray  # (M+1, B)
    coef: np.ndarray  # (M+1, B, P)
    lo: np.ndarray | None = None  # (M+1, B) fitted range of the standardised regressor
    hi: np.ndarray | None = None

    def __post_init__(self):
        if self.lo is None:
            self.lo = np.full(self.shift.shape, -np.inf)
            self.hi = np.full(self.shift.shape, np.inf)

    @classmethod
    def zeros(cls, M: int, B: int, degree: int, n_aux: int) -> "RegressionField":
        P = degree + 1 + n_aux * degree
        return cls(degree, np.zeros((M + 1, B)), np.ones((M + 1, B)), np.zeros((M + 1, B, P)))

    def copy(self) -> "RegressionField":
        return RegressionField(
            self.degree, self.shift.copy(), self.scale.copy(), self.coef.copy(), self.lo.copy(), self.hi.copy()
        )

    def _sl(self, sl) -> "RegressionField":
        return RegressionField(self.degree, self.shift[sl], self.scale[sl], self.coef[sl], self.lo[sl], self.hi[sl])

    @property
    def n_aux(self) -> int:
        return (self.coef.shape[-1] - self.degree - 1) // max(self.degree, 1)

    def eval(self, k: int, primary, aux=()) -> np.ndarray:
        """Field at node k; continued linearly outside the fitted range.

        Polynomial fits are only trusted where there was data.  Beyond the
        range a cubic can turn a restoring drift into an explosive one, so
        the field is extended by its tangent line at the range ends.
        """
        d = self.degree
        c = self.coef[k]
        z = (np.asarray(primary, dtype=float) - self.shift[k][:, None]) / self.scale[k][:, None]
        zc = np.clip(z, self.lo[k][:, None], self.hi[k][:, None])
        val, der = _horner(c[:, : d + 1], zc)
        for i, a in enumerate(aux):
            v2, d2 = _horner(c[:, d + 1 + i * d : d + 1 + (i + 1) * d], zc)
            val += a * v2
            der += a * d2
        return val + (z - zc) * der

    def deriv(self, k: int, primary) -> np.ndarray:
        """d/dprimary of the aux-free part at node k, consistent with eval."""
        d = self.degree
        z = (np.asarray(primary, dtype=float) - self.shift[k][:, None]) / self.scale[k][:, None]
        zc = np.clip(z, self.lo[k][:, None], self.hi[k][:, None])
        _, der = _horner(self.coef[k][:, : d + 1], zc)
        return der / self.scale[k][:, None]

    def member(self, b: int) -> "RegressionField":
        return self._sl((slice(None), slice(b, b + 1)))

    def node(self, k: int) -> "RegressionField":
        return self._sl(slice(k, k + 1))

    def tile(self, B: int) -> "RegressionField":
        """Broadcast a single-member field to B members."""
        if self.coef.shape[1] != 1:
            raise ValueError("only a single-member field can be tiled")
        return RegressionField(
            self.degree,
            np.repeat(self.shift, B, axis=1),
            np.repeat(self.scale, B, axis=1),
            np.repeat(self.coef, B, axis=1),
            np.repeat(self.lo, B, axis=1),
            np.repeat(self.hi, B, axis=1),
        )

    def with_aux(self, n_aux: int) -> "RegressionField":
        """Same field with extra (zero-coefficient) auxiliary columns."""
        P = self.degree + 1 + n_aux * self.degree
        coef = np.zeros(self.coef.shape[:2] + (P,))
        coef[..., : self.degree + 1] = self.coef[..., : self.degree + 1]
        return RegressionField(self.degree, self.shift.copy(), self.scale.copy(), coef, self.lo.copy(), self.hi.copy())


@dataclass
class PicardResult:
    x: np.ndarray  # (M+1, B, N)
    y: np.ndarray  # (M+1, B, N), equal to the field on the final paths
    field: RegressionField
    history: list = field(default_factory=list)  # max-over-members residual per sweep
    member_history: list = field(default_factory=list)  # per-member residuals per sweep
    iterations: int = 0
    converged: np.ndarray | None = None


def _forward(system, grid, db, fld, x, y, wts):
    """Forward pass; writes x, y in place, returns per-member ||dX||^2_K."""
    M, dt = grid.M, grid.dt
    B = system.n_members
    sig = system.sigma
    known = hasattr(system, "known_slope")
    dx2 = np.zeros(B)
    new = system.initial()
    dx2 += wts[0] * np.mean((new - x[0]) ** 2, axis=1)
    x[0] = new
    for k in range(M):
        prim, aux = system.regressors(k, x[k])
        y[k] = fld.eval(k, prim, aux)
        if known:
            y[k] += system.known_slope(k) * x[k]
        nxt = x[k] + system.drift(k, x[k], y[k]) * dt
        if np.any(sig):
            nxt += sig * db[k]
        dx2 += wts[k + 1] * np.mean((nxt - x[k + 1]) ** 2, axis=1)
        x[k + 1] = nxt
    y[M] = system.terminal(x[M]) if hasattr(system, "terminal") else 0.0
    if not np.all(np.isfinite(dx2)):
        raise NoConvergenceError("forward pass diverged (non-finite paths)")
    if hasattr(system, "after_forward"):
        system.after_forward(x)
    return dx2


def _dprimary(coef, shift, scale, degree, primary, aux):
    """Derivative of a fitted node polynomial in the primary regressor."""
    z = (primary - shift[:, None]) / scale[:, None]
    _, der = _horner(coef[:, : degree + 1], z)
    for i, a in enumerate(aux):
        if degree > 1:
            _, d2 = _horner(coef[:, degree + 1 + i * degree : degree + 1 + (i + 1) * degree], z)
            der = der + a * d2
    return der / scale[:, None]


def _backward(system, grid, x, y, degree, db, ridge=0.0):
    """Undamped regression recursion along the current paths.

    Returns the Picard image of the field in the data standardisation of
    this sweep, with the per-node Gram matrices (B, P, P) / N.

    The one-step targets carry a martingale control: the noise part
    psig * du/dprimary * dB_k of u_{k+1}(X_{k+1}) is subtracted, with the
    derivative taken at the pre-noise point X_{k+1} - psig dB_k so the
    conditional mean is untouched.  Without it the in-sample mean of the
    increments leaks into every intercept and accumulates over the horizon.
    """
    M, dt = grid.M, grid.dt
    B = system.n_members
    psig = getattr(system, "primary_sigma", system.sigma)
    use_cv = db is not None and np.any(psig)
    known = hasattr(system, "known_slope")
    out = None
    yb = y[M]
    nxt = None  # (coef, shift, scale, primary, aux) at node k+1
    for k in range(M - 1, -1, -1):
        target = yb + system.driver(k, x[k], yb) * dt
        if use_cv and nxt is not None:
            c1, sh1, sc1, p1, a1 = nxt
            dbk = db[k]
            target = target - psig * dbk * _dprimary(c1, sh1, sc1, degree, p1 - psig * dbk, a1)
        if known:
            sk = system.known_slope(k) * x[k]
            target = target - sk
        prim, aux = system.regressors(k, x[k])
        D, sh, sc = build_design(prim, aux, degree)
        if out is None:
            P = D.shape[1]
            out = RegressionField(degree, np.zeros((M + 1, B)), np.ones((M + 1, B)), np.zeros((M + 1, B, P)))
            out.lo[M], out.hi[M] = -np.inf, np.inf
            gram = np.zeros((M, B, P, P))
        coef = batched_lstsq(D, target, ridge=ridge)
        yb = _predict(coef, D)
        if known:
            yb = yb + sk
        out.coef[k], out.shift[k], out.scale[k] = coef, sh, sc
        out.lo[k], out.hi[k] = _zrange(prim, sh, sc)
        gram[k] = D @ D.transpose(0, 2, 1) / D.shape[-1]
        nxt = (coef, sh, sc, np.asarray(prim, dtype=float), [np.broadcast_to(a, prim.shape) for a in aux])
    out.shift[M], out.scale[M] = out.shift[M - 1], out.scale[M - 1]
    return out, gram


def _shift_matrix(a, b, n):
    """T with sum_j c_j (a z + b)^j = sum_i (T c)_i z^i, batched over a, b."""
    T = np.zeros(a.shape + (n, n))
    for j in range(n):
        for i in range(j + 1):
            T[..., i, j] = math.comb(j, i) * a**i * b ** (j - i)
    return T


def _rebase(coef, degree, old_shift, old_scale, new_shift, new_scale):
    """Re-express coefficients (M+1, B, P) in a new standardisation, exactly."""
    a = new_scale / old_scale
    b = (new_shift - old_shift) / old_scale
    out = np.empty_like(coef)
    d = degree
    T = _shift_matrix(a, b, d + 1)
    out[..., : d + 1] = np.einsum("...ij,...j->...i", T, coef[..., : d + 1])
    if coef.shape[-1] > d + 1:
        Ta = T[..., :d, :d]
        for s in range(d + 1, coef.shape[-1], d):
            out[..., s : s + d] = np.einsum("...ij,...j->...i", Ta, coef[..., s : s + d])
    return out


def _gram_root(gram, wts):
    """L (M, B, P, P) with |L v|^2 = sum_k w_k v^T gram_k v."""
    w, V = np.linalg.eigh(gram)
    w = np.sqrt(np.clip(w, 0.0, None) * wts[: gram.shape[0], None, None])
    return w[..., :, None] * V.transpose(0, 1, 3, 2)


def _wnorm2(L, v):
    """Per-member weighted squared norm of coefficient arrays v (M, B, P)."""
    u = np.einsum("kbij,kbj->kbi", L, v)
    return np.sum(u * u, axis=(0, 2))


class _Anderson:
    """Type-II Anderson mixing on coefficient arrays (M, B, P).

    ``joint`` solves one mixing problem for all members (coupled systems);
    otherwise each member mixes only with its own history.
    """

    def __init__(self, memory, beta, joint):
        self.m, self.beta, self.joint = memory, beta, joint
        self.c, self.f = [], []
        self.age = None  # per-member count of usable history entries

    def rebase(self, fn):
        self.c = [fn(v) for v in self.c]
        self.f = [fn(v) for v in self.f]

    def reset(self, mask=None):
        """Forget the history of the members in ``mask`` (all if None)."""
        if self.age is None:
            return
        if mask is None or self.joint:
            self.age[:] = 0
        else:
            self.age[mask] = 0

    def step(self, c, f, L):
        beta = self.beta
        B = c.shape[1]
        if self.age is None:
            self.age = np.zeros(B, dtype=int)
        self.c.append(c.copy())
        self.f.append(f.copy())
        self.age += 1
        if len(self.c) > self.m + 1:
            self.c.pop(0)
            self.f.pop(0)
        np.minimum(self.age, len(self.c), out=self.age)
        nxt = c + beta * f
        if len(self.c) < 2 or self.m == 0:
            return nxt
        dC = [b - a for a, b in zip(self.c[:-1], self.c[1:])]
        dF = [b - a for a, b in zip(self.f[:-1], self.f[1:])]
        lw = lambda v: np.einsum("kbij,kbj->kbi", L, v)
        A = np.stack([lw(v) for v in dF], axis=-1)  # (M, B, P, m)
        r = lw(f)
        if self.joint:
            groups = [(slice(None), int(self.age.min()))]
        else:
            groups = [(slice(b, b + 1), int(self.age[b])) for b in range(B)]
        for g, age in groups:
            # only differences between entries recorded since the last reset
            use = min(age - 1, A.shape[-1])
            if use < 1:
                continue
            off = A.shape[-1] - use
            Am = A[:, g, :, off:].reshape(-1, use)
            rm = r[:, g].reshape(-1)
            scale = np.sqrt(np.sum(Am * Am, axis=0))
            ok = scale > 1e-14 * (1.0 + np.sqrt(rm @ rm))
            if not np.any(ok):
                continue
            gam = np.zeros(use)
            gam[ok] = np.linalg.lstsq(Am[:, ok] / scale[ok], rm, rcond=1e-10)[0] / scale[ok]
            for j, gj in enumerate(gam):
                nxt[:, g] -= gj * (dC[off + j][:, g] + beta * dF[off + j][:, g])
        return nxt


def picard_solve(
    system,
    grid: TimeGrid,
    db: np.ndarray,
    *,
    degree: int = 3,
    n_aux: int = 0,
    theta: float = 0.5,
    memory: int = 10,
    ridge: float = 0.0,
    tol: float = 1e-6,
    max_iters: int = 50,
    K: float = 0.1,
    field0: RegressionField | None = None,
    where: str | None = None,
    raise_on_failure: bool = True,
) -> PicardResult:
    """Fixed-point iteration on the decoupling field until the residual < tol.

    Each sweep computes the Picard image of the field by an undamped
    backward regression along the current paths, then mixes it with the
    previous iterates (Anderson mixing with ``memory`` past sweeps and
    relaxation ``theta``; memory=0 is plain damped Picard) and runs the
    forward pass with the result.  Long horizons need the mixing: a shift
    of the field's level moves the paths by a persistent offset whose
    discounted effect on Y is of order 1/r, which plain damping cannot
    contract.

    ``db`` has shape (M, B, N) or (M, 1, N) (members share the noise).
    Uncoupled members mix and freeze individually, so a member's result does
    not depend on its batch mates.  The residual is the K-weighted norm of
    the path change of the last forward pass plus that of the field update.
    """
    if not 0 < theta <= 1:
        raise ValueError("damping theta must lie in (0, 1]")
    M = grid.M
    B = system.n_members
    x0 = system.initial()
    N = x0.shape[-1]
    x = np.empty((M + 1, B, N))
    x[:] = x0  # placeholder path; overwritten by the first forward pass
    y = np.zeros((M + 1, B, N))
    fld = field0 if field0 is not None else RegressionField.zeros(M, B, degree, n_aux)
    if fld.coef.shape[1] != B:
        fld = fld.tile(B)
    fld = fld.copy()
    wts = discount_weights(grid, K)
    dx2 = _forward(system, grid, db, fld, x, y, wts)

    coupled = bool(getattr(system, "coupled", False))
    mixer = _Anderson(memory, theta, coupled)
    history, member_hist = [], []
    active = np.ones(B, dtype=bool)
    best = np.full(B, np.inf)
    it = 0
    for it in range(1, max_iters + 1):
        img, gram = _backward(system, grid, x, y, degree, db, ridge)
        osh, osc = fld.shift.copy(), fld.scale.copy()
        reb = lambda v: _rebase(v, degree, osh[:M], osc[:M], img.shift[:M], img.scale[:M])
        c = reb(fld.coef[:M])
        mixer.rebase(reb)
        f = img.coef[:M] - c
        L = _gram_root(gram, wts)
        res = np.sqrt(dx2 + _wnorm2(L, f))
        member_hist.append(res.copy())
        if not np.all(np.isfinite(res)):
            history.append(float("nan"))
            break
        if coupled:
            history.append(float(np.max(res)))
            done = np.full(B, history[-1] < tol)
        else:
            history.append(float(np.max(res[active])))
            done = res < tol
        # a residual far above the best so far means the mixing history is
        # stale; restart it from a plain relaxation step
        mixer.reset(res > 10.0 * best)
        best = np.minimum(best, res)
        nxt = mixer.step(c, f, L)
        keep = ~active | done
        active &= ~done
        new = img.copy()
        new.coef[:M] = nxt
        new.coef[M] = 0.0
        # frozen members keep their old field bit for bit, so a member's result
        # does not depend on how long its batch mates keep iterating
        for name in ("coef", "shift", "scale", "lo", "hi"):
            getattr(new, name)[:, keep] = getattr(fld, name)[:, keep]
        fld = new
        if not np.any(active):
            _forward(system, grid, db, fld, x, y, wts)
            break
        dx2 = _forward(system, grid, db, fld, x, y, wts)
    conv = ~active
    if raise_on_failure and not np.all(conv):
        raise NoConvergenceError(
            f"Picard iteration did not reach tol={tol:g} in {max_iters} sweeps"
            f" (last residual {history[-1]:.3g})" if history else "no sweeps run",
            history=history,
            where=where,
        )
    return PicardResult(x, y, fld, history, member_hist, it, conv)


def regress_z(system, grid: TimeGrid, x, y, db, degree: int) -> np.ndarray:
    """Z_k as the regression of (Y_{k+1} - Y_k) dB_k / dt on the node-k design.

    Y_k is known at time k, so subtracting it leaves the conditional mean
    unchanged and removes the O(Y / sqrt(dt)) noise of the plain target.
    The driver term of the residual is left out: it shifts the conditional
    mean only at O(dt).
    """
    M, dt = grid.M, grid.dt
    z = np.zeros_like(x)
    for k in range(M):
        prim, aux = system.regressors(k, x[k])
        D, _, _ = build_design(prim, aux, degree)
        tgt = (y[k + 1] - y[k]) * np.broadcast_to(db[k], y[k + 1].shape) / dt
        z[k] = _predict(batched_lstsq(D, tgt), D)
    z[M] = z[M - 1]
    return z
