"""Experiments behind the CLI subcommands.

Each ``run_*`` function takes a RunConfig and returns an Outcome: a JSON
summary, extra artifacts (file name -> text) and a pass flag (None when the
experiment has no oracle).  Nothing here reads clocks or the environment, so
a fixed (config, seed) always yields the same bytes.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .. import __version__
from ..errors import ConfigError
from ..lions import fd_check, lions_field, solve_delta_equilibrium, solve_delta_representative, solve_nabla_discrete
from ..measure import EmpiricalMeasure, discretize_grid, wasserstein_1d
from ..model import lq_riccati
from ..solver import (
    continuation_solve,
    contraction_ratios,
    lq_cast_problem,
    solve_equilibrium,
    solve_representative,
    value_v,
)
from .config import RunConfig

__all__ = [
    "Outcome",
    "UniquenessReport",
    "ConvergenceReport",
    "draw_xi",
    "draw_eta",
    "provenance",
    "to_json",
    "run_solve",
    "run_lions",
    "run_fdcheck",
    "run_uniqueness",
    "run_validate_lq",
    "run_convergence",
    "weak_uniqueness_test",
    "discretization_convergence",
]

# spawn keys of the auxiliary random streams; particle noise uses 1-tuples
_XI_KEY = (1, 0)
_ETA_KEY = (2, 0)


def _rng(seed: int, key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def draw_xi(spec: dict, N: int, seed: int) -> np.ndarray:
    """N samples of the initial law described by ``spec`` (see McSection)."""
    law = spec["law"]
    rng = _rng(seed, _XI_KEY)
    if law == "normal":
        return spec["mean"] + spec["std"] * rng.standard_normal(N)
    if law == "dirac":
        return np.full(N, float(spec["value"]))
    if law == "uniform":
        return rng.uniform(spec["low"], spec["high"], N)
    if law == "atoms":
        return rng.choice(np.asarray(spec["atoms"], dtype=float), size=N, p=np.asarray(spec["probs"], dtype=float))
    raise ConfigError(f"unknown law {law!r}")


def draw_eta(spec: dict, xi: np.ndarray, seed: int) -> np.ndarray:
    """Direction samples aligned with the particles of xi."""
    kind = spec["kind"]
    if kind == "const":
        return np.full(xi.size, float(spec["value"]))
    if kind == "normal":
        return spec["mean"] + spec["std"] * _rng(seed, _ETA_KEY).standard_normal(xi.size)
    if kind == "indicator":
        return (xi == float(spec["atom"])).astype(float)
    raise ConfigError(f"unknown eta kind {kind!r}")


def _clean(v):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(v, dict):
        return {str(k): _clean(u) for k, u in v.items()}
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_clean(u) for u in v]
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else None
    return v


def to_json(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def provenance(cfg: RunConfig) -> dict:
    return {"config_hash": cfg.hash(), "seed": cfg.mc.seed, "version": __version__}


@dataclass
class Outcome:
    summary: dict
    files: dict = field(default_factory=dict)  # name -> text
    passed: bool | None = None


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([f"{v:.12g}" if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def _series_csv(bundle, every: int) -> str:
    rows = bundle.summary()[::every]
    return _csv(["t", "mean_x", "var_x", "mean_y", "mean_z"], [[float(v) for v in r] for r in rows])


def _lq_pq(model):
    if model.name != "lq":
        return None
    return lq_riccati(model.params["alpha"], model.params["beta"], model.r)


def _rel(a, b):
    return abs(a - b) / abs(b) if b != 0 else abs(a - b)


def _base(cfg: RunConfig, seed: int | None = None, xi=None):
    """(model, solver config, xi, equilibrium) for the configured problem."""
    model = cfg.model.build()
    sc = cfg.solver_config(seed=seed)
    if xi is None:
        xi = draw_xi(cfg.mc.xi, sc.N, sc.seed)
    eq = solve_equilibrium(model, xi, sc)
    return model, sc, xi, eq


# ---------------------------------------------------------------------------
# solve


def run_solve(cfg: RunConfig) -> Outcome:
    if cfg.solver.mode == "general":
        return _solve_general(cfg)
    model, sc, xi, eq = _base(cfg)
    h = cfg.experiment.h
    xs = [float(v) for v in cfg.experiment.x]
    starts = [v for x in xs for v in (x, x - h, x + h)]
    reps = solve_representative(model, starts, eq, sc)
    pq = _lq_pq(model)
    rows = []
    for j, x in enumerate(xs):
        (b0, y0), (bm, _), (bp, _) = reps[3 * j : 3 * j + 3]
        v0 = value_v(model, x, eq, b0, sc)
        vm = value_v(model, x - h, eq, bm, sc).value
        vp = value_v(model, x + h, eq, bp, sc).value
        grad = (vp - vm) / (2.0 * h)
        row = {
            "x": x,
            "y0": y0,
            "value_v": v0.value,
            "value_tail_bound": v0.tail_bound,
            "dV_dx_central": grad,
            "gradient_rel_gap": _rel(grad, y0),
        }
        if pq is not None:
            row["y0_oracle"] = pq[0] * x + pq[1] * float(np.mean(xi))
            row["y0_rel_gap"] = _rel(y0, row["y0_oracle"])
        rows.append(row)
    metrics = {
        "mode": "mfg",
        "y0": rows[0]["y0"],
        "value_v": rows[0]["value_v"],
        "contraction_ratios": None,  # general mode only
        "y0_slope": eq.y0_slope,
        "iterations": eq.diagnostics["iterations"],
        "residuals": eq.diagnostics["residuals"],
        "tail_bound": eq.diagnostics["tail_bound"],
        "flow_gap": eq.diagnostics["flow_gap"],
        "representatives": rows,
    }
    if pq is not None:
        metrics["oracle"] = {"p": pq[0], "q": pq[1], "slope_rel_gap": _rel(eq.y0_slope, pq[0])}
    return Outcome(metrics, {"series.csv": _series_csv(eq.bundle, cfg.experiment.series_every)})


def _solve_general(cfg: RunConfig) -> Outcome:
    model = cfg.model.build()
    sc = cfg.solver_config()
    xi = draw_xi(cfg.mc.xi, sc.N, sc.seed)
    try:
        problem = lq_cast_problem(model, xi, cfg.norm.K)
    except ValueError as exc:
        raise ConfigError(f"general mode: {exc}") from None
    db = sc.brownian()
    cont = continuation_solve(problem, sc, db=db)
    ratios = contraction_ratios(problem, sc, n_pairs=cfg.experiment.n_pairs, seed=sc.seed, db=db)
    b = cont.bundle
    x0, y0 = b.x[0], b.y[0]
    vx = float(np.var(x0))
    slope = float(np.mean((x0 - x0.mean()) * (y0 - y0.mean())) / vx) if vx > 0 else float("nan")
    metrics = {
        "mode": "general",
        "y0": float(np.mean(y0)),
        "value_v": None,  # the general problem carries no running cost
        "y0_slope": slope,
        "ladder": cont.ladder,
        "delta0": problem.delta0,
        "iterations": cont.outer_iterations,
        "residuals": cont.residuals,
        "continuation_ratios": cont.contraction_ratios,
        "contraction_ratios": ratios,
        "max_contraction_ratio": max(ratios),
    }
    pq = _lq_pq(model)
    if pq is not None:
        metrics["oracle"] = {"p": pq[0], "q": pq[1], "slope_rel_gap": _rel(slope, pq[0])}
    return Outcome(metrics, {"series.csv": _series_csv(b, cfg.experiment.series_every)})


# ---------------------------------------------------------------------------
# lions field and finite differences


def run_lions(cfg: RunConfig) -> Outcome:
    model, sc, xi, eq = _base(cfg)
    x = float(cfg.experiment.x[0])
    grid = np.asarray(cfg.experiment.xtilde, dtype=float)
    psi, se = lions_field(x, eq, grid, sc, return_se=True)
    rows = [{"xtilde": float(a), "psi": float(v), "se": float(s)} for a, v, s in zip(grid, psi, se)]
    metrics = {"x": x, "psi": rows, "eq_iterations": eq.diagnostics["iterations"]}
    passed = None
    pq = _lq_pq(model)
    if pq is not None:
        q = pq[1]
        gap = float(np.max(np.abs(psi - q)))
        band = 0.02 * abs(q) + 3.0 * float(np.max(se))
        passed = gap <= band
        metrics["oracle"] = {"q": q, "max_abs_gap": gap, "band": band, "passed": passed}
    text = _csv(["xtilde", "psi"], [[float(a), float(v)] for a, v in zip(grid, psi)])
    return Outcome(metrics, {"psi.csv": text}, passed)


def fd_floor(picard_tol: float, delta: float) -> float:
    """Noise floor of a common-random-numbers quotient: solver tolerance over delta."""
    return picard_tol / delta


def run_fdcheck(cfg: RunConfig) -> Outcome:
    model = cfg.model.build()
    sc = cfg.solver_config()
    xi = draw_xi(cfg.mc.xi, sc.N, sc.seed)
    eta = draw_eta(cfg.experiment.eta, xi, sc.seed)
    x = float(cfg.experiment.x[0])
    rep = fd_check(x, model, xi, eta, cfg.experiment.deltas, sc, with_value=cfg.experiment.with_value)
    report = rep.as_dict()
    floors = [fd_floor(sc.picard_tol, d) for d in rep.deltas]
    for row, fl in zip(report["rows"], floors):
        row["floor"] = fl
    gaps = [abs(g) for g in rep.gaps]
    # the gap must shrink with delta until it reaches the noise floor
    monotone = all(b <= max(a, fl) for a, b, fl in zip(gaps, gaps[1:], floors[1:]))
    report["monotone_to_floor"] = monotone
    pq = _lq_pq(model)
    if pq is not None:
        scale = max(abs(rep.e_psi_eta), pq[1] * float(np.sqrt(np.mean(eta * eta))))
        report["max_rel_gap"] = max(gaps) / scale if scale > 0 else max(gaps)
        passed = all(g <= 0.03 * scale + fl for g, fl in zip(gaps, floors))
    else:
        passed = monotone
    report["passed"] = passed
    report["provenance"] = provenance(cfg)
    return Outcome(report, {"fdcheck.json": to_json(report)}, passed)


# ---------------------------------------------------------------------------
# weak uniqueness


@dataclass
class UniquenessReport:
    checkpoints: list
    w1_xy: dict  # "X", "Y", "int_Z" -> W1 distance per checkpoint
    tolerance: float
    passed: bool
    seeds: tuple = ()

    def as_dict(self) -> dict:
        return {
            "checkpoints": self.checkpoints,
            "w1": self.w1_xy,
            "tolerance": self.tolerance,
            "passed": self.passed,
            "seeds": list(self.seeds),
        }


def _checkpoint_laws(cfg: RunConfig, seed: int, checkpoints):
    model = cfg.model.build()
    sc = cfg.solver_config(seed=seed)
    xi = draw_xi(cfg.mc.xi, sc.N, seed)
    if cfg.solver.mode == "general":
        problem = lq_cast_problem(model, xi, cfg.norm.K)
        bundle = continuation_solve(problem, sc).bundle
    else:
        bundle = solve_equilibrium(model, xi, sc).bundle
    ks = [sc.grid.node(t) for t in checkpoints]
    iz = bundle.integrated_z()
    out = {
        "X": [bundle.x[k].copy() for k in ks],
        "Y": [bundle.y[k].copy() for k in ks],
        "int_Z": [iz[k].copy() for k in ks],
    }
    return out


def weak_uniqueness_test(cfg: RunConfig, seed_a: int, seed_b: int) -> UniquenessReport:
    """Compare the laws of (X, Y, int Z) under two independent set-ups.

    Each set-up re-draws xi from the configured law and uses its own noise
    stream.  The band 3/sqrt(N) is the Monte Carlo scale of W1 between two
    independent empirical laws of N samples.
    """
    cps = [float(t) for t in cfg.experiment.checkpoints]
    la = _checkpoint_laws(cfg, seed_a, cps)
    lb = la if seed_b == seed_a else _checkpoint_laws(cfg, seed_b, cps)
    w1 = {
        name: [wasserstein_1d(1, EmpiricalMeasure(a), EmpiricalMeasure(b)) for a, b in zip(la[name], lb[name])]
        for name in ("X", "Y", "int_Z")
    }
    tol = 3.0 / math.sqrt(cfg.mc.N)
    passed = all(d <= tol for v in w1.values() for d in v)
    return UniquenessReport(cps, w1, tol, passed, (seed_a, seed_b))


def run_uniqueness(cfg: RunConfig) -> Outcome:
    seed_b = cfg.experiment.seed_b if cfg.experiment.seed_b is not None else cfg.mc.seed + 1
    rep = weak_uniqueness_test(cfg, cfg.mc.seed, seed_b)
    d = rep.as_dict()
    d["provenance"] = provenance(cfg)
    return Outcome(d, {"uniqueness.json": to_json(d)}, rep.passed)


# ---------------------------------------------------------------------------
# discretization convergence


@dataclass
class ConvergenceReport:
    x: float
    xtilde: list
    psi_continuous: list
    rows: list  # per n: {"n", "psi", "gap"}
    floor: float
    non_increasing: bool

    def as_dict(self) -> dict:
        return {
            "x": self.x,
            "xtilde": self.xtilde,
            "psi_continuous": self.psi_continuous,
            "rows": self.rows,
            "floor": self.floor,
            "non_increasing": self.non_increasing,
        }


def discretization_convergence(cfg: RunConfig, n_list=None) -> ConvergenceReport:
    """Sup-gap between psi of the discretized laws and psi of the continuous law.

    For each n the samples of xi are mapped to their grid cells, the
    equilibrium is re-solved on the same noise, and psi_n(x~) is computed at
    the atom containing each x~ of the experiment grid.
    """
    n_list = [int(n) for n in (cfg.experiment.n_list if n_list is None else n_list)]
    if any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ConfigError("n_list must be increasing")
    model, sc, xi, eq = _base(cfg)
    x = float(cfg.experiment.x[0])
    grid = np.asarray(cfg.experiment.xtilde, dtype=float)
    psi_c = lions_field(x, eq, grid, sc)
    del eq
    db = sc.brownian()
    rows = []
    for n in n_list:
        xi_n = discretize_grid(xi, n)
        eq_n = solve_equilibrium(model, xi_n, sc, db=db)
        atoms = np.unique(xi_n)
        cells = discretize_grid(grid, n)
        psi_n = []
        for c in cells:
            hit = np.flatnonzero(atoms == c)
            if hit.size == 0:
                psi_n.append(float("nan"))  # no particle in the cell of x~
                continue
            psi_n.append(solve_nabla_discrete(x, eq_n, int(hit[0]), sc)[1])
        psi_n = np.asarray(psi_n)
        ok = np.isfinite(psi_n)
        gap = float(np.max(np.abs(psi_n[ok] - psi_c[ok]))) if np.any(ok) else float("nan")
        rows.append({"n": n, "psi": psi_n.tolist(), "gap": gap})
    floor = 1e-3 * float(np.max(np.abs(psi_c))) + 10.0 * sc.picard_tol
    gaps = [r["gap"] for r in rows]
    non_inc = all(b <= max(a, floor) for a, b in zip(gaps, gaps[1:]))
    return ConvergenceReport(x, grid.tolist(), psi_c.tolist(), rows, floor, non_inc)


def run_convergence(cfg: RunConfig) -> Outcome:
    rep = discretization_convergence(cfg)
    d = rep.as_dict()
    passed = rep.non_increasing
    pq = _lq_pq(cfg.model.build())
    if pq is not None:
        # the continuous-law psi itself is checked against the oracle as well
        band = 0.02 * abs(pq[1]) + rep.floor
        d["oracle"] = {"q": pq[1], "max_abs_gap": max(abs(v - pq[1]) for v in rep.psi_continuous), "band": band}
        passed = passed and d["oracle"]["max_abs_gap"] <= band
    d["passed"] = passed
    text = _csv(["n", "gap"], [[r["n"], r["gap"]] for r in rep.rows])
    return Outcome(d, {"convergence.csv": text}, passed)


# ---------------------------------------------------------------------------
# the linear-quadratic oracle suite


def _check(name, value, oracle, tol):
    gap = _rel(value, oracle)
    return {"name": name, "value": value, "oracle": oracle, "rel_gap": gap, "tol": tol, "passed": gap <= tol}


def run_validate_lq(cfg: RunConfig) -> Outcome:
    """Riccati oracles for the equilibrium, representative, gradient and Lions checks."""
    model = cfg.model.build()
    pq = _lq_pq(model)
    if pq is None:
        raise ConfigError("validate-lq needs model.kind = 'lq'")
    p, q = pq
    sc = cfg.solver_config()
    h = cfg.experiment.h
    checks = []

    # equilibrium slope on the configured (spread) initial law
    xi = draw_xi(cfg.mc.xi, sc.N, sc.seed)
    if np.var(xi) == 0:
        raise ConfigError("validate-lq needs an initial law with positive variance")
    eq = solve_equilibrium(model, xi, sc)
    checks.append(_check("equilibrium_slope", eq.y0_slope, p, 0.02))
    psi, se = lions_field(1.0, eq, [-1.0, 0.0, 1.0], sc, return_se=True)
    gap = float(np.max(np.abs(psi - q)))
    band = 0.02 * abs(q) + 3.0 * float(np.max(se))
    checks.append({"name": "lions_field", "value": psi.tolist(), "oracle": q, "abs_gap": gap, "tol": band, "passed": gap <= band})
    del eq

    # representative at x = 1 against Dirac initial laws at 0 and 1
    for m in (0.0, 1.0):
        eq = solve_equilibrium(model, np.full(sc.N, m), sc)
        reps = solve_representative(model, [1.0, 1.0 - h, 1.0 + h], eq, sc)
        y0 = reps[0][1]
        checks.append(_check(f"representative_dirac_{m:g}", y0, p + q * m, 0.02))
        vm = value_v(model, 1.0 - h, eq, reps[1][0], sc).value
        vp = value_v(model, 1.0 + h, eq, reps[2][0], sc).value
        checks.append(_check(f"gradient_identity_dirac_{m:g}", (vp - vm) / (2.0 * h), y0, 0.03))
        if m == 1.0:
            d_eq = solve_delta_equilibrium(eq, np.ones(sc.N), sc)
            checks.append(_check("delta_equilibrium_y0", float(np.mean(d_eq.y[0])), p + q, 0.02))
            _, dy0 = solve_delta_representative(1.0, eq, d_eq, sc, rep=(reps[0][0].x, reps[0][0].y))
            checks.append(_check("delta_representative_y0", dy0, q, 0.02))
        del eq, reps
    passed = all(c["passed"] for c in checks)
    return Outcome({"p": p, "q": q, "checks": checks, "passed": passed}, {}, passed)


RUNNERS = {
    "solve": run_solve,
    "lions": run_lions,
    "fdcheck": run_fdcheck,
    "uniqueness": run_uniqueness,
    "validate-lq": run_validate_lq,
    "convergence": run_convergence,
}
