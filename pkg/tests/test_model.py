import math

import numpy as np
import pytest

from mfglions.errors import InvalidParameterError, NoRealRootError
from mfglions.measure import EmpiricalMeasure
from mfglions.model import (
    check_derivatives,
    lq_riccati,
    make_cubic_model,
    make_lq_model,
    make_model,
    make_sine_coupled_model,
    verify_assumptions,
)

D0, D1 = EmpiricalMeasure.dirac(0.0), EmpiricalMeasure.dirac(1.0)


def test_lq_hamiltonian_values():
    m = make_lq_model(1, 0.25, 0.1)
    assert m.H(2.0, D0, 1.0) == pytest.approx(1.5)
    assert m.H(1.0, D1, 0.0) == pytest.approx(0.75)


def test_lq_analytic_derivatives():
    m = make_lq_model(1, 0.25, 0.1)
    x, y = np.array([-1.0, 0.3, 2.0]), np.array([0.5, -2.0, 1.0])
    mu = EmpiricalMeasure([0.0, 2.0])
    assert np.allclose(m.dH_y(x, mu, y), -y)
    assert np.allclose(m.dH_yy(x, mu, y), -1.0)
    assert np.allclose(m.dH_xx(x, mu, y), 1.0)
    assert np.allclose(m.dH_xmu(x, mu, y, 5.0), 0.25)
    assert np.allclose(m.dH_ymu(x, mu, y, 5.0), 0.0)
    assert np.allclose(m.alpha_hat(x, mu, y), -y)


def test_beta_zero_has_no_measure_coupling():
    m = make_lq_model(1, 0.0, 0.1)
    x = np.linspace(-2, 2, 7)
    for xt in (-3.0, 0.0, 4.0):
        assert np.all(m.dH_xmu(x, D1, x, xt) == 0.0)
        assert np.all(m.dH_mu(x, D1, x, xt) == 0.0)


def test_lq_dh_mu_is_flat_in_xtilde():
    m = make_lq_model(1, 0.25, 0.1)
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=20), rng.normal(size=20)
    mu = EmpiricalMeasure(rng.normal(size=30))
    for xt in rng.normal(size=5) * 3:
        assert np.allclose(m.dH_mu(x, mu, y, xt), 0.25 * x)


@pytest.mark.parametrize("bad", [(0.0, 0.25, 0.1), (-1.0, 0.25, 0.1), (1.0, 0.25, 0.0), (1.0, 0.25, -0.1)])
def test_lq_model_rejects_bad_parameters(bad):
    with pytest.raises(InvalidParameterError):
        make_lq_model(*bad)


def test_riccati_default_parameters():
    p, q = lq_riccati(1, 0.25, 0.1)
    assert p == pytest.approx(0.95125, abs=5e-6)
    assert q == pytest.approx(0.11790, abs=5e-6)
    assert abs(p * p + 0.1 * p - 1.0) < 1e-12
    assert abs(q * q + math.sqrt(4.01) * q - 0.25) < 1e-12


def test_riccati_beta_zero_and_golden_ratio():
    assert lq_riccati(1, 0, 0.1)[1] == 0.0
    assert lq_riccati(1, 0, 1)[0] == pytest.approx((math.sqrt(5) - 1) / 2, abs=1e-12)


def test_riccati_without_real_root():
    with pytest.raises(NoRealRootError):
        lq_riccati(1.0, -2.0, 0.1)


def test_running_cost_is_h_minus_y_hy():
    rng = np.random.default_rng(1)
    for m in (make_lq_model(1, 0.25, 0.1), make_cubic_model(1, 0.25, 0.1, 0.2), make_sine_coupled_model(1, 0.2, 0.1)):
        x, y = rng.normal(size=50), rng.normal(size=50)
        mu = EmpiricalMeasure(rng.normal(size=40))
        assert np.array_equal(m.running_cost_F(x, mu, y), m.H(x, mu, y) - y * m.dH_y(x, mu, y))
        assert np.array_equal(m.running_cost_F(x, mu, 0.0 * y), m.H(x, mu, 0.0 * y))


@pytest.mark.parametrize(
    "model",
    [make_lq_model(1, 0.25, 0.1), make_cubic_model(1, 0.25, 0.1, 0.2), make_sine_coupled_model(1, 0.2, 0.1)],
    ids=["lq", "cubic", "sine"],
)
def test_derivative_callables_match_finite_differences(model):
    errs = check_derivatives(model)
    for name in ("dH_x", "dH_y", "dH_xx", "dH_yy", "dH_xy", "dH_yx", "dH_mu", "dH_xmu", "dH_ymu"):
        assert errs[name] < 1e-4, (name, errs[name])
    assert errs["F"] == 0.0
    assert errs["minimality"] <= 1e-12


def test_verify_assumptions_default_lq():
    rep = verify_assumptions(make_lq_model(1, 0.25, 0.1))
    assert rep.passed
    assert (rep.lambda1, rep.lambda2, rep.lambda3) == pytest.approx((1.0, 0.25, 1.0))
    assert rep.margin == pytest.approx(-0.45)


@pytest.mark.parametrize("params", [(1, 0.6, 0.1), (1, 0.25, 2.5)])
def test_verify_assumptions_failures(params):
    rep = verify_assumptions(make_lq_model(*params))
    assert not rep.passed
    assert rep.violations


def test_verify_assumptions_cubic_perturbation_passes():
    assert verify_assumptions(make_cubic_model(1, 0.25, 0.1, 0.2)).passed


def test_assumption_report_is_monotone_in_the_box():
    m = make_sine_coupled_model(1, 0.45, 0.1)
    small = verify_assumptions(m, {"x": (-1, 1), "y": (-1, 1), "xt": (-1, 1)})
    big = verify_assumptions(m, {"x": (-3, 3), "y": (-3, 3), "xt": (-3, 3)})
    assert not (big.passed and not small.passed)
    assert big.lambda2 >= small.lambda2 and big.lambda1 <= small.lambda1


def test_make_model_registry():
    m = make_model("lq", alpha=1, beta=0.25, r=0.1)
    assert m.name == "lq" and m.r == 0.1
    with pytest.raises(InvalidParameterError):
        make_model("quartic", alpha=1)
    with pytest.raises(InvalidParameterError):
        make_model("lq", alpha=1, beta=0.25)
