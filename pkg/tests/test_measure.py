import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfglions.measure import (
    DiscretizationSpec,
    EmpiricalMeasure,
    cell_index,
    discretize_grid,
    moment,
    read_measure,
    wasserstein_1d,
    write_measure,
)

atoms = st.lists(st.floats(-50, 50, allow_nan=False), min_size=1, max_size=12)


def test_wasserstein_examples():
    assert wasserstein_1d(2, EmpiricalMeasure.dirac(0.0), EmpiricalMeasure.dirac(1.0)) == pytest.approx(1.0)
    assert wasserstein_1d(1, EmpiricalMeasure([0.0, 1.0]), EmpiricalMeasure([0.5, 0.5])) == pytest.approx(0.5)
    mu = EmpiricalMeasure([0.3, -1.0, 2.0])
    assert wasserstein_1d(2, mu, mu) == 0.0


def test_wasserstein_rejects_other_orders():
    with pytest.raises(ValueError):
        wasserstein_1d(3, EmpiricalMeasure([0.0]), EmpiricalMeasure([1.0]))


def test_wasserstein_weighted_matches_replicated_atoms():
    mu = EmpiricalMeasure([0.0, 1.0], [0.25, 0.75])
    nu = EmpiricalMeasure([0.0, 1.0, 1.0, 1.0])
    other = EmpiricalMeasure([0.2, 3.0, -1.0])
    for p in (1, 2):
        assert wasserstein_1d(p, mu, other) == pytest.approx(wasserstein_1d(p, nu, other))


@settings(max_examples=60, deadline=None)
@given(atoms, atoms, atoms, st.sampled_from([1, 2]))
def test_wasserstein_triangle_inequality(a, b, c, p):
    mu, nu, la = EmpiricalMeasure(a), EmpiricalMeasure(b), EmpiricalMeasure(c)
    assert wasserstein_1d(p, mu, la) <= wasserstein_1d(p, mu, nu) + wasserstein_1d(p, nu, la) + 1e-9


@settings(max_examples=60, deadline=None)
@given(atoms, atoms)
def test_wasserstein_symmetric_and_nonnegative(a, b):
    mu, nu = EmpiricalMeasure(a), EmpiricalMeasure(b)
    d = wasserstein_1d(1, mu, nu)
    assert d >= 0 and d == pytest.approx(wasserstein_1d(1, nu, mu), abs=1e-12)


def test_measure_validation():
    with pytest.raises(ValueError):
        EmpiricalMeasure([])
    with pytest.raises(ValueError):
        EmpiricalMeasure([0.0, np.inf])
    with pytest.raises(ValueError):
        EmpiricalMeasure([0.0, 1.0], [-0.5, 1.5])
    mu = EmpiricalMeasure([0.0, 1.0], [2.0, 2.0])
    assert mu.weights.sum() == pytest.approx(1.0, abs=1e-12)


def test_moments():
    assert moment(EmpiricalMeasure([0.0, 1.0]), 1) == pytest.approx(0.5)
    assert moment(EmpiricalMeasure.dirac(1.7), 3) == pytest.approx(1.7**3)
    assert moment(EmpiricalMeasure([-1.0, 1.0]), 2) == pytest.approx(1.0)


@pytest.mark.parametrize("x,n,i", [(0.7, 2, 1), (-0.1, 2, -1), (0.0, 5, 0), (-2.0, 2, -4), (1.999, 2, 3)])
def test_cell_index_examples(x, n, i):
    assert cell_index(x, n) == i
    lo, hi = DiscretizationSpec(n).cell(i)
    assert lo <= x < hi


@pytest.mark.parametrize("x", [2.0, -2.01, 10.0])
def test_cell_index_out_of_range(x):
    with pytest.raises(ValueError):
        cell_index(x, 2)


def test_discretization_spec_partitions_covered_range():
    spec = DiscretizationSpec(3)
    pts = spec.points
    assert pts[0] == -3.0 and pts[-1] + 1 / 3 == pytest.approx(3.0)
    assert np.allclose(np.diff(pts), 1 / 3)
    with pytest.raises(ValueError):
        DiscretizationSpec(0)


def test_discretize_grid_examples():
    assert np.allclose(discretize_grid([0.73], 2), [0.5])
    assert np.allclose(discretize_grid([-5.0], 2), [-4.0])
    assert np.allclose(discretize_grid([0.2, 0.7, -0.9], 2), [0.0, 0.5, -1.0])
    # literal reading of the formula: the uncovered bands map to 0
    assert np.allclose(discretize_grid([2.5, -3.0, 4.0], 2), [0.0, 0.0, 4.0])


@settings(max_examples=80, deadline=None)
@given(st.floats(-6, 6, allow_nan=False), st.integers(1, 12))
def test_discretize_grid_agrees_with_cell_index(x, n):
    if -n <= x < n:
        assert discretize_grid([x], n)[0] == pytest.approx(cell_index(x, n) / n)


def test_discretization_rms_decreases_and_bounds_w2():
    s = np.random.default_rng(3).standard_normal(20000)
    rms = []
    for n in (2, 4, 8, 16):
        d = discretize_grid(s, n)
        rms.append(float(np.sqrt(np.mean((d - s) ** 2))))
        assert wasserstein_1d(2, EmpiricalMeasure(s), EmpiricalMeasure(d)) <= rms[-1] + 1e-12
    assert all(b < a for a, b in zip(rms, rms[1:]))


def test_measure_file_round_trip(tmp_path):
    mu = EmpiricalMeasure([0.1, -2.5, 3.0])
    write_measure(mu, tmp_path / "u.txt")
    back = read_measure(tmp_path / "u.txt")
    assert back.uniform and np.array_equal(back.atoms, mu.atoms)
    nu = EmpiricalMeasure([0.0, 1.0], [0.3, 0.7])
    write_measure(nu, tmp_path / "w.csv")
    back = read_measure(tmp_path / "w.csv")
    assert np.allclose(back.weights, [0.3, 0.7]) and np.array_equal(back.atoms, nu.atoms)
