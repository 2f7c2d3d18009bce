import numpy as np
import pytest

from mfglions.errors import NoConvergenceError, RegressionSingularError
from mfglions.paths import TimeGrid, sample_brownian_tm
from mfglions.solver import RegressionField, batched_lstsq, build_design, chunk_map, picard_solve, solve_representative
from mfglions.solver.engine import _rebase

from conftest import P, small_config


class _OU:
    """dX = -Y dt + dB, dY = -(a X - r Y) dt + Z dB: decoupling slope p."""

    sigma = 1.0
    coupled = False

    def __init__(self, x0, a=1.0, r=0.1):
        self.x0 = np.asarray(x0, dtype=float)
        self.n_members = self.x0.shape[0]
        self.a, self.r = a, r

    def initial(self):
        return self.x0.copy()

    def regressors(self, k, x):
        return x, ()

    def drift(self, k, x, y):
        return -y

    def driver(self, k, x, y_next):
        return self.a * x - self.r * y_next


def test_build_design_columns():
    prim = np.array([[0.0, 1.0, 2.0, 3.0]])
    aux = np.array([[1.0, 1.0, 2.0, 2.0]])
    D, shift, scale = build_design(prim, [aux], 2)
    assert shift[0] == 1.5
    assert D.shape == (1, 5, 4)
    z = (prim - 1.5) / prim.std()
    assert np.allclose(D[0, 1], z[0]) and np.allclose(D[0, 2], z[0] ** 2)
    assert np.allclose(D[0, 3], aux[0]) and np.allclose(D[0, 4], aux[0] * z[0])


def test_batched_lstsq_recovers_polynomials():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(3, 400))
    D = np.stack([np.ones_like(z), z, z * z], axis=1)
    c_true = rng.normal(size=(3, 3))
    target = np.einsum("bp,bpn->bn", c_true, D)
    assert np.allclose(batched_lstsq(D, target), c_true, atol=1e-9)


def test_batched_lstsq_collinear_design_gives_minimum_norm():
    D = np.ones((1, 3, 10))  # every column the same constant
    c = batched_lstsq(D, np.full((1, 10), 3.0))
    assert np.allclose(np.einsum("bp,bpn->bn", c, D), 3.0)
    assert np.allclose(c, 1.0)


def test_batched_lstsq_errors():
    with pytest.raises(RegressionSingularError):
        batched_lstsq(np.ones((1, 4, 3)), np.ones((1, 3)))
    D = np.ones((1, 2, 5))
    D[0, 1, 0] = np.nan
    with pytest.raises(RegressionSingularError):
        batched_lstsq(D, np.ones((1, 5)))


def test_rebase_is_exact():
    rng = np.random.default_rng(1)
    deg = 3
    coef = rng.normal(size=(2, 4, deg + 1 + deg))
    osh, osc = rng.normal(size=(2, 4)), rng.uniform(0.5, 2, size=(2, 4))
    nsh, nsc = rng.normal(size=(2, 4)), rng.uniform(0.5, 2, size=(2, 4))
    new = _rebase(coef, deg, osh, osc, nsh, nsc)
    old_f = RegressionField(deg, osh, osc, coef)
    new_f = RegressionField(deg, nsh, nsc, new)
    x = rng.normal(size=(4, 50))
    a = rng.normal(size=(4, 50))
    for k in range(2):
        assert np.allclose(old_f.eval(k, x, [a]), new_f.eval(k, x, [a]), rtol=1e-10, atol=1e-10)


def test_field_extrapolates_along_tangent():
    coef = np.zeros((1, 1, 4))
    coef[0, 0] = [0.0, 0.0, 0.0, 1.0]  # z^3
    f = RegressionField(3, np.zeros((1, 1)), np.ones((1, 1)), coef, np.full((1, 1), -1.0), np.full((1, 1), 1.0))
    x = np.array([[0.5, 2.0, -3.0]])
    assert np.allclose(f.eval(0, x), [[0.125, 1.0 + 3.0 * 1.0, -1.0 - 3.0 * 2.0]])
    assert np.allclose(f.deriv(0, x), [[0.75, 3.0, 3.0]])


def test_field_derivative_matches_finite_difference():
    rng = np.random.default_rng(2)
    f = RegressionField(3, rng.normal(size=(1, 2)), rng.uniform(0.5, 2, size=(1, 2)), rng.normal(size=(1, 2, 4)))
    x = rng.normal(size=(2, 20))
    h = 1e-6
    fd = (f.eval(0, x + h) - f.eval(0, x - h)) / (2 * h)
    assert np.allclose(fd, f.deriv(0, x), rtol=1e-6, atol=1e-6)


def test_chunk_map_order_is_independent_of_workers():
    fn = lambda sl: [i * i for i in range(sl.start, sl.stop)]
    want = [i * i for i in range(11)]
    assert chunk_map(fn, 11, 3, 1) == want
    assert chunk_map(fn, 11, 3, 4) == want
    assert chunk_map(fn, 0, 3, 2) == []


def test_picard_solves_the_ou_system():
    g = TimeGrid(10.0, 0.05)
    N = 2000
    db = sample_brownian_tm(g, N, 4)[:, None, :]
    x0 = np.random.default_rng(3).normal(size=(1, N))
    res = picard_solve(_OU(x0), g, db, tol=1e-7, max_iters=60)
    x, y = res.x[0, 0], res.y[0, 0]
    slope = np.polyfit(x, y, 1)[0]
    assert slope == pytest.approx(P, rel=0.01)
    assert res.converged.all()
    # the stored paths are the field evaluated on them
    assert np.allclose(res.field.eval(0, res.x[0]), res.y[0])


def test_picard_failure_carries_history():
    g = TimeGrid(5.0, 0.05)
    db = sample_brownian_tm(g, 300, 4)[:, None, :]
    x0 = np.ones((1, 300))
    with pytest.raises(NoConvergenceError) as info:
        picard_solve(_OU(x0), g, db, tol=1e-12, max_iters=3, where="ou test")
    assert len(info.value.history) == 3 and info.value.where == "ou test"
    res = picard_solve(_OU(x0), g, db, tol=1e-12, max_iters=3, raise_on_failure=False)
    assert not res.converged.any()


def test_batched_members_do_not_see_each_other(lq, eq_normal):
    # a member's result is bit-identical whether solved alone or in a batch
    cfg1 = small_config(batch_size=1)
    cfg3 = small_config(batch_size=3)
    xs = [-1.0, 0.5, 2.0]
    alone = solve_representative(lq, xs, eq_normal, cfg1)
    batch = solve_representative(lq, xs, eq_normal, cfg3)
    for (ba, ya), (bb, yb) in zip(alone, batch):
        assert ya == yb
        assert np.array_equal(ba.y, bb.y)
