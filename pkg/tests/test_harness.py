import json
import math
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfglions.errors import ConfigError
from mfglions.harness import (
    RunConfig,
    discretization_convergence,
    draw_eta,
    draw_xi,
    main,
    parse_config,
    weak_uniqueness_test,
)

TINY = {
    "grid": {"T": 3.0, "dt": 0.05},
    "mc": {"N": 300, "seed": 1},
    "experiment": {"checkpoints": [0.5, 1.5, 3.0], "xtilde": [-1.0, 1.0], "n_list": [4, 8], "deltas": [0.2, 0.1], "series_every": 20},
}


def tiny(**over) -> RunConfig:
    return RunConfig.from_dict(TINY).with_overrides(**over)


def _write_cfg(tmp_path, cfg: RunConfig, name="c.json"):
    p = tmp_path / name
    p.write_text(cfg.dumps())
    return str(p)


@settings(max_examples=30, deadline=None)
@given(
    T=st.floats(10.0, 50.0),
    N=st.integers(10, 10**6),
    seed=st.integers(0, 2**63),
    deg=st.integers(1, 6),
    xs=st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=4),
)
def test_config_round_trip(T, N, seed, deg, xs):
    cfg = RunConfig().with_overrides(
        grid={"T": T, "dt": T / 100}, mc={"N": N, "seed": seed}, solver={"basis_degree": deg}, experiment={"x": xs}
    )
    text = cfg.dumps()
    again = parse_config(text)
    assert again == cfg and again.dumps() == text and again.hash() == cfg.hash()


@pytest.mark.parametrize(
    "data",
    [
        {"grid": {"T": -1.0}},
        {"grid": {"dt": "0.1"}},
        {"mc": {"N": 0}},
        {"mc": {"N": 1.5}},
        {"mc": {"xi": {"law": "cauchy"}}},
        {"mc": {"xi": {"law": "atoms", "atoms": [0, 1], "probs": [0.5, 0.6]}}},
        {"model": {"kind": "lq", "params": {"alpha": -1, "beta": 0, "r": 0.1}}},
        {"model": {"kind": "quartic", "params": {}}},
        {"solver": {"mode": "fast"}},
        {"solver": {"batch_size": 0}},
        {"solver": {"picard_tol": True}},
        {"experiment": {"deltas": [0.1, 0.2]}},
        {"experiment": {"eta": {"kind": "const", "value": "one"}}},
        {"experiment": {"color": "red"}},
        {"grid": {"T": 4.0}},
        {"extra": {}},
        [],
    ],
)
def test_bad_configs_raise(data):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(data)


def test_parse_rejects_bad_json():
    with pytest.raises(ConfigError):
        parse_config("{not json")


def test_hash_ignores_workers_only():
    a = tiny()
    assert a.hash() == tiny(solver={"workers": 3}).hash()
    assert a.hash() != tiny(solver={"batch_size": 2}).hash()
    assert a.hash() != a.with_seed(2).hash()


def test_draws_are_seeded_and_shaped():
    spec = {"law": "atoms", "atoms": [0.0, 1.0], "probs": [0.25, 0.75]}
    a = draw_xi(spec, 4000, 5)
    assert np.array_equal(a, draw_xi(spec, 4000, 5))
    assert set(np.unique(a)) <= {0.0, 1.0} and abs(a.mean() - 0.75) < 0.03
    eta = draw_eta({"kind": "indicator", "atom": 0.0}, a, 5)
    assert np.array_equal(eta, (a == 0.0).astype(float))
    assert np.all(draw_eta({"kind": "const", "value": 2.0}, a, 5) == 2.0)


def test_unknown_subcommand_exits_2_without_artifacts(tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["frobnicate", "--out", str(out)]) == 2
    assert not out.exists()


def test_config_error_exits_2(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"mc": {"N": -3}}')
    assert main(["solve", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    assert main(["solve", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o")]) == 2
    assert main(["solve", "--seed", "-1", "--out", str(tmp_path / "o")]) == 2


def test_non_convergence_exits_3_with_history(tmp_path):
    cfg = tiny(solver={"max_iters": 2, "picard_tol": 1e-12})
    out = tmp_path / "o"
    assert main(["solve", "--config", _write_cfg(tmp_path, cfg), "--out", str(out)]) == 3
    err = json.loads((out / "error.json").read_text())
    assert err["error"] == "numerical" and len(err["history"]) == 2
    assert err["provenance"]["config_hash"] == cfg.hash()


def test_show_config_prints_canonical_text(capsys):
    assert main(["show-config"]) == 0
    assert parse_config(capsys.readouterr().out) == RunConfig()


def _run(tmp_path, cfg, sub, name):
    out = tmp_path / name
    code = main([sub, "--config", _write_cfg(tmp_path, cfg, name + ".json"), "--out", str(out)])
    return code, {f: (out / f).read_bytes() for f in sorted(os.listdir(out))}


def test_solve_is_byte_reproducible_across_runs_and_workers(tmp_path):
    cfg = tiny(experiment={"x": [0.0, 1.0]})
    c1, a = _run(tmp_path, cfg, "solve", "a")
    c2, b = _run(tmp_path, cfg, "solve", "b")
    c3, w = _run(tmp_path, cfg.with_overrides(solver={"workers": 2}), "solve", "w")
    assert c1 == c2 == c3 == 0
    assert set(a) == {"summary.json", "series.csv"}
    assert a == b == w
    s = json.loads(a["summary.json"])
    assert s["subcommand"] == "solve" and s["provenance"]["seed"] == 1


def test_lions_runs_and_reports_oracle(tmp_path):
    code, files = _run(tmp_path, tiny(), "lions", "l")
    assert code == 0 and "psi.csv" in files
    assert files["psi.csv"].decode().count("\n") == 3


def test_uniqueness_identical_seeds_is_exactly_zero():
    cfg = tiny(mc={"N": 100})
    rep = weak_uniqueness_test(cfg, 7, 7)
    assert rep.tolerance == pytest.approx(0.3)
    assert all(d == 0.0 for v in rep.w1_xy.values() for d in v)
    assert rep.passed


def test_uniqueness_two_seeds_within_band():
    rep = weak_uniqueness_test(tiny(mc={"N": 1000}, experiment={"checkpoints": [0.0, 1.0, 2.0]}), 1, 2)
    assert rep.passed, rep.w1_xy
    assert rep.tolerance == pytest.approx(3 / math.sqrt(1000))


def test_convergence_singleton_and_uncoupled():
    # without mean-field coupling psi vanishes for every law, so every gap is ~0
    cfg = tiny(model={"params": {"alpha": 1.0, "beta": 0.0, "r": 0.1}}, experiment={"n_list": [4]})
    rep = discretization_convergence(cfg)
    assert len(rep.rows) == 1 and rep.non_increasing
    assert rep.rows[0]["gap"] < 1e-4
    with pytest.raises(ConfigError):
        discretization_convergence(cfg, n_list=[8, 4])
