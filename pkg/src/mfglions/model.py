"""Hamiltonian models and their checks.

A model is the bundle of callables the forward-backward systems consume:
H(x, mu, y) and its first and second derivatives in x and y, plus the
measure derivatives dH_mu, dH_xmu, dH_ymu, which take the extra point
x~ at which the Lions derivative is evaluated.  All callables are
vectorised: x, y (and x~) are numpy arrays that broadcast against each
other, mu is a single :class:`EmpiricalMeasure`.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import InvalidParameterError, NoRealRootError
from .measure import EmpiricalMeasure

__all__ = [
    "HamiltonianModel",
    "AssumptionReport",
    "make_lq_model",
    "make_cubic_model",
    "make_sine_coupled_model",
    "make_model",
    "lq_riccati",
    "verify_assumptions",
    "check_derivatives",
    "default_measure_family",
]

Fn3 = Callable[..., np.ndarray]


def _const(c, *args):
    return np.broadcast_to(np.float64(c), np.broadcast(*args).shape)


@dataclass(frozen=True)
class HamiltonianModel:
    r: float
    H: Fn3
    dH_x: Fn3
    dH_y: Fn3
    dH_xx: Fn3
    dH_xy: Fn3
    dH_yy: Fn3
    dH_mu: Fn3
    dH_xmu: Fn3
    dH_ymu: Fn3
    alpha_hat: Fn3 | None = None
    # Optional primitives of the control problem: drift b(x, mu, a) and
    # running cost f(x, mu, a).  Only used by the minimality spot check.
    drift_b: Fn3 | None = None
    cost_f: Fn3 | None = None
    # True when the measure derivatives do not depend on x~; tilde
    # expectations then collapse to a product of means.
    flat_mu: bool = False
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.r > 0:
            raise InvalidParameterError("discount r must be positive")

    def running_cost_F(self, x, mu, y):
        """F = H - y dH_y, the optimised running cost."""
        return self.H(x, mu, y) - y * self.dH_y(x, mu, y)

    def dF_x(self, x, mu, y):
        return self.dH_x(x, mu, y) - y * self.dH_xy(x, mu, y)

    def dF_y(self, x, mu, y):
        return -y * self.dH_yy(x, mu, y)

    def dF_mu(self, x, mu, y, xt):
        return self.dH_mu(x, mu, y, xt) - y * self.dH_ymu(x, mu, y, xt)


def make_lq_model(alpha: float, beta: float, r: float) -> HamiltonianModel:
    """b(x, mu, a) = a, f = a^2/2 + (alpha/2) x^2 + beta x mean(mu).

    Minimising a y + a^2/2 gives a = -y, hence
    H(x, mu, y) = -y^2/2 + (alpha/2) x^2 + beta x mean(mu).
    """
    if not alpha > 0:
        raise InvalidParameterError("alpha must be positive")
    if not r > 0:
        raise InvalidParameterError("r must be positive")
    a, b = float(alpha), float(beta)

    def H(x, mu, y):
        return -0.5 * y * y + 0.5 * a * x * x + b * x * mu.mean

    return HamiltonianModel(
        r=float(r),
        H=H,
        dH_x=lambda x, mu, y: a * x + b * mu.mean + 0.0 * y,
        dH_y=lambda x, mu, y: -y + 0.0 * x,
        dH_xx=lambda x, mu, y: _const(a, x, y),
        dH_xy=lambda x, mu, y: _const(0.0, x, y),
        dH_yy=lambda x, mu, y: _const(-1.0, x, y),
        dH_mu=lambda x, mu, y, xt: b * x + 0.0 * (y + xt),
        dH_xmu=lambda x, mu, y, xt: _const(b, x, y, xt),
        dH_ymu=lambda x, mu, y, xt: _const(0.0, x, y, xt),
        alpha_hat=lambda x, mu, y: -y + 0.0 * x,
        drift_b=lambda x, mu, act: act + 0.0 * x,
        cost_f=lambda x, mu, act: 0.5 * act * act + 0.5 * a * x * x + b * x * mu.mean,
        flat_mu=True,
        name="lq",
        params={"alpha": a, "beta": b, "r": float(r)},
    )


def make_cubic_model(alpha: float, beta: float, r: float, eps: float) -> HamiltonianModel:
    """LQ model with the extra running cost (eps/2) x mean(mu)^2.

    The value 𝒱 then depends nonlinearly on the mean of mu, which makes
    finite-difference quotients in the measure direction show a trend in
    the step size.  Derivatives stay bounded on bounded mean ranges.
    """
    base = make_lq_model(alpha, beta, r)
    a, b, e = float(alpha), float(beta), float(eps)

    def H(x, mu, y):
        m = mu.mean
        return -0.5 * y * y + 0.5 * a * x * x + b * x * m + 0.5 * e * x * m * m

    def cost_f(x, mu, act):
        m = mu.mean
        return 0.5 * act * act + 0.5 * a * x * x + b * x * m + 0.5 * e * x * m * m

    return HamiltonianModel(
        r=base.r,
        H=H,
        dH_x=lambda x, mu, y: a * x + b * mu.mean + 0.5 * e * mu.mean**2 + 0.0 * y,
        dH_y=base.dH_y,
        dH_xx=base.dH_xx,
        dH_xy=base.dH_xy,
        dH_yy=base.dH_yy,
        dH_mu=lambda x, mu, y, xt: (b + e * mu.mean) * x + 0.0 * (y + xt),
        dH_xmu=lambda x, mu, y, xt: _const(b + e * mu.mean, x, y, xt),
        dH_ymu=base.dH_ymu,
        alpha_hat=base.alpha_hat,
        drift_b=base.drift_b,
        cost_f=cost_f,
        flat_mu=True,
        name="cubic",
        params={"alpha": a, "beta": b, "r": base.r, "eps": e},
    )


def make_sine_coupled_model(alpha: float, beta: float, r: float) -> HamiltonianModel:
    """f = a^2/2 + (alpha/2) x^2 + beta x E_mu[sin].

    Its measure derivatives depend on x~ (dH_xmu = beta cos x~), so tilde
    expectations cannot be factorised.  Used to exercise the pairwise path.
    """
    if not alpha > 0 or not r > 0:
        raise InvalidParameterError("alpha and r must be positive")
    a, b = float(alpha), float(beta)

    def msin(mu):
        return mu.__dict__.setdefault("_mean_sin", mu.expect(np.sin))

    return HamiltonianModel(
        r=float(r),
        H=lambda x, mu, y: -0.5 * y * y + 0.5 * a * x * x + b * x * msin(mu),
        dH_x=lambda x, mu, y: a * x + b * msin(mu) + 0.0 * y,
        dH_y=lambda x, mu, y: -y + 0.0 * x,
        dH_xx=lambda x, mu, y: _const(a, x, y),
        dH_xy=lambda x, mu, y: _const(0.0, x, y),
        dH_yy=lambda x, mu, y: _const(-1.0, x, y),
        dH_mu=lambda x, mu, y, xt: b * x * np.cos(xt) + 0.0 * y,
        dH_xmu=lambda x, mu, y, xt: b * np.cos(xt) + 0.0 * (x + y),
        dH_ymu=lambda x, mu, y, xt: _const(0.0, x, y, xt),
        alpha_hat=lambda x, mu, y: -y + 0.0 * x,
        drift_b=lambda x, mu, act: act + 0.0 * x,
        cost_f=lambda x, mu, act: 0.5 * act * act + 0.5 * a * x * x + b * x * msin(mu),
        flat_mu=False,
        name="sine",
        params={"alpha": a, "beta": b, "r": float(r)},
    )


_KINDS = {
    "lq": (make_lq_model, ("alpha", "beta", "r")),
    "cubic": (make_cubic_model, ("alpha", "beta", "r", "eps")),
    "sine": (make_sine_coupled_model, ("alpha", "beta", "r")),
}


def make_model(kind: str, **params) -> HamiltonianModel:
    """Build a registered model from its config name and parameters."""
    try:
        factory, names = _KINDS[kind]
    except KeyError:
        raise InvalidParameterError(f"unknown model kind {kind!r}; known: {sorted(_KINDS)}") from None
    missing = [n for n in names if n not in params]
    extra = sorted(set(params) - set(names))
    if missing or extra:
        raise InvalidParameterError(f"model {kind!r}: missing {missing}, unexpected {extra}")
    return factory(**{n: float(params[n]) for n in names})


def lq_riccati(alpha: float, beta: float, r: float) -> tuple[float, float]:
    """Coefficients of the stationary ansatz Y = p X + q mean.

    p is the positive root of p^2 + r p - alpha = 0 and q the root of
    q^2 + sqrt(r^2 + 4 alpha) q - beta = 0 of smaller magnitude.
    """
    if not alpha > 0 or not r > 0:
        raise InvalidParameterError("alpha and r must be positive")
    s = math.sqrt(r * r + 4.0 * alpha)
    disc = s * s + 4.0 * beta
    if disc < 0:
        raise NoRealRootError(f"q-equation has no real root (discriminant {disc:.3g})")
    p = 0.5 * (s - r)
    # 2*beta / (s + sqrt(disc)) equals (-s + sqrt(disc))/2 without cancellation
    q = 2.0 * beta / (s + math.sqrt(disc))
    return p, q


def default_measure_family() -> list[EmpiricalMeasure]:
    """Dirac masses, a symmetric two-point law and Gaussian quantiles."""
    u = (np.arange(64) + 0.5) / 64
    from scipy.stats import norm

    return [
        EmpiricalMeasure.dirac(0.0),
        EmpiricalMeasure.dirac(1.0),
        EmpiricalMeasure.dirac(-1.0),
        EmpiricalMeasure([-1.0, 1.0]),
        EmpiricalMeasure(norm.ppf(u)),
        EmpiricalMeasure(0.5 + 2.0 * norm.ppf(u)),
    ]


@dataclass
class AssumptionReport:
    lambda1: float
    lambda2: float
    lambda3: float
    margin: float
    passed: bool
    violations: list = field(default_factory=list)
    box: dict = field(default_factory=dict)
    n_points: int = 0

    def as_dict(self) -> dict:
        return {
            "lambda1": self.lambda1,
            "lambda2": self.lambda2,
            "lambda3": self.lambda3,
            "margin": self.margin,
            "passed": self.passed,
            "violations": [{"point": list(p), "condition": c} for p, c in self.violations],
            "box": self.box,
            "n_points": self.n_points,
        }


def _lattice(lo: float, hi: float, step: float) -> np.ndarray:
    # Points of step*Z inside [lo, hi]; anchoring at 0 makes the point set of
    # a box a subset of the point set of any larger box.
    first = math.ceil(lo / step - 1e-9)
    last = math.floor(hi / step + 1e-9)
    pts = np.arange(first, last + 1) * step
    if pts.size == 0:
        pts = np.array([0.5 * (lo + hi)])
    return pts


def verify_assumptions(
    model: HamiltonianModel,
    box: dict | None = None,
    samples: int = 4,
    measures: list[EmpiricalMeasure] | None = None,
    max_violations: int = 20,
) -> AssumptionReport:
    """Empirical check of the convexity/coupling bounds on a sample box.

    ``box`` maps "x", "y", "xt" to (lo, hi) ranges.  Sample points are the
    lattice (1/samples) Z^3 restricted to the box, evaluated against every
    measure of ``measures``.  The tightest constants observed are reported:
    lambda1 = min(-dH_yy, dH_xx), lambda2 = max(|dH_xmu|, |dH_ymu|),
    lambda3 = max(|dH_xx|, |dH_yy|, |dH_xy|).
    """
    if samples < 1:
        raise InvalidParameterError("samples must be >= 1")
    box = dict(box or {"x": (-3.0, 3.0), "y": (-3.0, 3.0), "xt": (-3.0, 3.0)})
    for key in ("x", "y", "xt"):
        lo, hi = box[key]
        if not lo <= hi:
            raise InvalidParameterError(f"empty box range for {key}")
    measures = measures if measures is not None else default_measure_family()
    step = 1.0 / samples
    gx, gy, gt = (_lattice(*box[k], step) for k in ("x", "y", "xt"))
    X, Yg = np.meshgrid(gx, gy, indexing="ij")
    X, Yg = X.ravel(), Yg.ravel()
    X3, Y3, T3 = (a.ravel() for a in np.meshgrid(gx, gy, gt, indexing="ij"))

    lam1 = math.inf
    lam2 = 0.0
    lam3 = 0.0
    violations = []

    def flag(mask, pts, cond):
        for p in zip(*(a[mask] for a in pts)):
            if len(violations) >= max_violations:
                return
            violations.append((tuple(float(v) for v in p), cond))

    for j, mu in enumerate(measures):
        hyy = np.broadcast_to(model.dH_yy(X, mu, Yg), X.shape)
        hxx = np.broadcast_to(model.dH_xx(X, mu, Yg), X.shape)
        hxy = np.broadcast_to(model.dH_xy(X, mu, Yg), X.shape)
        hxm = np.broadcast_to(model.dH_xmu(X3, mu, Y3, T3), X3.shape)
        hym = np.broadcast_to(model.dH_ymu(X3, mu, Y3, T3), X3.shape)
        for arr, name in ((hyy, "dH_yy"), (hxx, "dH_xx"), (hxy, "dH_xy")):
            bad = ~np.isfinite(arr)
            flag(bad, (X, Yg), f"{name} not finite (measure {j})")
        flag(hyy >= 0, (X, Yg), f"dH_yy >= 0: no lambda1 > 0 (measure {j})")
        flag(hxx <= 0, (X, Yg), f"dH_xx <= 0: no lambda1 > 0 (measure {j})")
        lam1 = min(lam1, float(np.min(-hyy)), float(np.min(hxx)))
        lam2 = max(lam2, float(np.max(np.abs(hxm))), float(np.max(np.abs(hym))))
        lam3 = max(lam3, float(np.max(np.abs(hxx))), float(np.max(np.abs(hyy))), float(np.max(np.abs(hxy))))

    margin = (-lam1 + 2.0 * lam2) - (-model.r / 2.0)
    if not margin < 0:
        violations.append(((), f"-lambda1 + 2 lambda2 = {-lam1 + 2 * lam2:.6g} not < -r/2 = {-model.r / 2:.6g}"))
    passed = not violations and lam1 > 0 and margin < 0
    return AssumptionReport(
        lambda1=lam1,
        lambda2=lam2,
        lambda3=lam3,
        margin=margin,
        passed=passed,
        violations=violations,
        box={k: list(map(float, v)) for k, v in box.items()},
        n_points=int(X3.size * len(measures)),
    )


def check_derivatives(model: HamiltonianModel, points=None, mu=None, h: float = 1e-4) -> dict:
    """Finite-difference audit of the model's derivative callables.

    Returns the largest relative error (scaled by max(1, |reference|)) for
    each check.  ``minimality`` is the largest amount by which H exceeds
    b(a) y + f(a) over actions a near alpha_hat (should be <= 0).
    """
    if points is None:
        g = np.linspace(-2.0, 2.0, 5)
        points = np.array(list(itertools.product(g, g)))
    mu = mu if mu is not None else EmpiricalMeasure([-0.5, 0.25, 1.0])
    x, y = points[:, 0], points[:, 1]

    def rel(a, b):
        a, b = np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float))
        return float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b))))

    H = model.H
    out = {
        "dH_x": rel((H(x + h, mu, y) - H(x - h, mu, y)) / (2 * h), model.dH_x(x, mu, y)),
        "dH_y": rel((H(x, mu, y + h) - H(x, mu, y - h)) / (2 * h), model.dH_y(x, mu, y)),
        "dH_xx": rel((model.dH_x(x + h, mu, y) - model.dH_x(x - h, mu, y)) / (2 * h), model.dH_xx(x, mu, y)),
        "dH_yy": rel((model.dH_y(x, mu, y + h) - model.dH_y(x, mu, y - h)) / (2 * h), model.dH_yy(x, mu, y)),
        "dH_xy": rel((model.dH_x(x, mu, y + h) - model.dH_x(x, mu, y - h)) / (2 * h), model.dH_xy(x, mu, y)),
        "dH_yx": rel((model.dH_y(x + h, mu, y) - model.dH_y(x - h, mu, y)) / (2 * h), model.dH_xy(x, mu, y)),
        "F": float(np.max(np.abs(model.running_cost_F(x, mu, y) - (H(x, mu, y) - y * model.dH_y(x, mu, y))))),
    }
    # Measure derivatives: moving atom j by +-h changes a functional of mu by
    # w_j * (Lions derivative at that atom) * h to first order.
    mu_errs = {"dH_mu": 0.0, "dH_xmu": 0.0, "dH_ymu": 0.0}
    for j in range(mu.size):
        shift = np.zeros(mu.size)
        shift[j] = h
        up = EmpiricalMeasure(mu.atoms + shift, None if mu.uniform else mu.weights)
        dn = EmpiricalMeasure(mu.atoms - shift, None if mu.uniform else mu.weights)
        wj = mu.weights[j]
        xt = mu.atoms[j]
        fd = (H(x, up, y) - H(x, dn, y)) / (2 * h * wj)
        mu_errs["dH_mu"] = max(mu_errs["dH_mu"], rel(fd, model.dH_mu(x, mu, y, xt)))
        fd = (model.dH_x(x, up, y) - model.dH_x(x, dn, y)) / (2 * h * wj)
        mu_errs["dH_xmu"] = max(mu_errs["dH_xmu"], rel(fd, model.dH_xmu(x, mu, y, xt)))
        fd = (model.dH_y(x, up, y) - model.dH_y(x, dn, y)) / (2 * h * wj)
        mu_errs["dH_ymu"] = max(mu_errs["dH_ymu"], rel(fd, model.dH_ymu(x, mu, y, xt)))
    out.update(mu_errs)
    if model.alpha_hat is not None and model.drift_b is not None and model.cost_f is not None:
        a_hat = model.alpha_hat(x, mu, y)
        worst = -math.inf
        for da in np.linspace(-0.5, 0.5, 11):
            act = a_hat + da
            val = model.drift_b(x, mu, act) * y + model.cost_f(x, mu, act)
            worst = max(worst, float(np.max(H(x, mu, y) - val)))
        out["minimality"] = worst
    return out
