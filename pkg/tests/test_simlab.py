import dataclasses
import json
import math

import numpy as np
import pytest

from mixclass import simlab
from mixclass.errors import ConfigurationError
from mixclass.mcmc import McmcConfig

TINY = McmcConfig(n_chains=2, burn_in=100, thin=1, n_kept=150)


def test_all_scenarios_load():
    names = simlab.scenario_names()
    assert len(names) == len(set(names)) >= 10
    for name in names:
        sc = simlab.load_scenario(name)
        np.testing.assert_allclose(sc.P.entries.sum(axis=1), 1.0, atol=1e-12)
        assert sc.known_q.shape == (sc.n_categories, sc.n_categories)
    with pytest.raises(ConfigurationError, match="available"):
        simlab.load_scenario("nope")


def test_ordinal_generator_frequencies():
    sc = simlab.load_scenario("normal_ordinal_a10")
    data, v = simlab.generate(sc, 100_000, 0)
    pi_star = np.bincount(data.v_star, minlength=3) / data.n
    np.testing.assert_allclose(pi_star, [0.215, 0.315, 0.470], atol=0.01)
    for k in range(3):
        emp = np.bincount(data.v_star[v == k], minlength=3) / np.sum(v == k)
        np.testing.assert_allclose(emp, sc.P.entries[k], atol=0.01)
    # within a true category the response is N(alpha0 + alpha1 k, sigma^2)
    for k in range(3):
        yk = data.y[v == k]
        assert abs(yk.mean() - (12.0 + 10.0 * k)) < 4 * 2.0 / math.sqrt(yk.size)


def test_identity_classification_copies_categories():
    sc = dataclasses.replace(simlab.load_scenario("poisson_p25"), P=np.eye(2))
    data, v = simlab.generate(sc, 500, 3)
    np.testing.assert_array_equal(data.v_star, v)


def test_zip_preserves_mean():
    sc = simlab.load_scenario("zip_w10")
    data, v = simlab.generate(sc, 100_000, 0)
    y1 = data.y[v == 1]
    assert y1.mean() == pytest.approx(math.exp(2.2), rel=0.02)
    # the zero fraction exceeds the Poisson one
    assert np.mean(y1 == 0) > 0.09


def test_student_t_variance():
    sc = simlab.load_scenario("student_t_s3.6_df20")
    assert sc.implied_variance() == pytest.approx(4.0, rel=1e-12)
    data, v = simlab.generate(sc, 100_000, 0)
    assert np.var(data.y[v == 2], ddof=1) == pytest.approx(4.0, rel=0.03)


def test_generation_reproducible_and_nondifferential():
    sc = simlab.load_scenario("poisson_p125")
    a, va = simlab.generate(sc, 20_000, 7)
    b, vb = simlab.generate(sc, 20_000, 7)
    c, _ = simlab.generate(sc, 20_000, 8)
    np.testing.assert_array_equal(a.y, b.y)
    np.testing.assert_array_equal(a.v_star, b.v_star)
    assert not np.array_equal(a.y, c.y)
    # given V, the response carries no information about V*
    for k in (0, 1):
        m = va == k
        y0, y1 = a.y[m & (a.v_star == 0)], a.y[m & (a.v_star == 1)]
        se = math.sqrt(y0.var() / y0.size + y1.var() / y1.size)
        assert abs(y0.mean() - y1.mean()) < 4 * se
    with pytest.raises(ConfigurationError):
        simlab.generate(sc, 0, 0)


def test_q_hat_is_stored_verbatim():
    q = simlab.q_hat()
    np.testing.assert_array_equal(q, [[0.84, 0.04, 0.12], [0.10, 0.77, 0.14], [0.02, 0.03, 0.95]])
    sc = simlab.load_scenario("normal_ordinal_a4")
    # the known-Q arm needs a stochastic matrix, so it gets the rows renormalised
    np.testing.assert_allclose(sc.known_q, q / q.sum(axis=1, keepdims=True), atol=1e-15)
    assert q[1].sum() == pytest.approx(1.01)
    # the biased prior has total concentration 60 per row
    np.testing.assert_allclose(sc.prior_variants["biased"].q_alpha(3), 60 * sc.known_q)


def test_derived_known_q_matches_bayes():
    sc = simlab.load_scenario("normal_ordinal_a10")
    joint = np.asarray(sc.pi)[:, None] * sc.P.entries
    np.testing.assert_allclose(sc.known_q, (joint / joint.sum(axis=0)).T, atol=1e-12)


def test_scenario_file_override(tmp_path, monkeypatch):
    doc = json.loads(simlab.DEFAULT_SCENARIO_FILE.read_text())
    doc["scenarios"] = [dict(doc["scenarios"][0], name="mine", seed=5)]
    path = tmp_path / "sc.json"
    path.write_text(json.dumps(doc))
    monkeypatch.setenv(simlab.SCENARIO_ENV, str(path))
    assert simlab.scenario_names() == ["mine"]
    assert simlab.load_scenario("mine").seed == 5


def test_bad_arm_names():
    sc = simlab.load_scenario("poisson_p25")
    for arm in ("oracle", "naive:x", "mixture:nope"):
        with pytest.raises(ConfigurationError):
            simlab.run_cell(sc, 50, 0, arm, TINY)


def test_run_study_resumes_and_rolls_up(tmp_path):
    sc = simlab.load_scenario("poisson_p25")
    out = tmp_path / "study.csv"
    roll = simlab.run_study(sc, ["naive", "mixture"], out, sizes=[200], reps=2, mcmc=TINY)
    rows = simlab.read_study(out)
    assert list(rows[0]) == simlab.STUDY_COLUMNS
    assert {(r["rep"], r["arm"]) for r in rows} == {(str(i), a) for i in range(2) for a in ("naive", "mixture")}
    assert all(r["status"] in ("ok", "rhat_flag") for r in rows)
    first = out.read_text()
    simlab.run_study(sc, ["naive", "mixture"], out, sizes=[200], reps=2, mcmc=TINY)
    assert out.read_text() == first
    simlab.run_study(sc, ["naive", "mixture"], out, sizes=[200], reps=3, mcmc=TINY)
    assert len(simlab.read_study(out)) == len(rows) * 3 // 2
    by = {(r["arm"], r["param"]): r for r in roll}
    naive = by[("naive", "alpha1")]
    assert naive["reps"] == 2 and 0.0 <= naive["coverage"] <= 1.0
    ests = [float(r["estimate"]) for r in rows if r["arm"] == "naive" and r["param"] == "alpha1"]
    assert naive["mean_estimate"] == pytest.approx(np.mean(ests))
    assert (tmp_path / "study.rollup.csv").exists()


def test_error_cells_are_recorded(tmp_path):
    # a single observation leaves every stratum but one empty
    sc = simlab.load_scenario("normal_ordinal_a2")
    out = tmp_path / "err.csv"
    simlab.run_study(sc, ["known_q"], out, sizes=[1], reps=1, mcmc=TINY)
    (row,) = simlab.read_study(out)
    assert row["status"].startswith("error:") or row["status"] in ("ok", "rhat_flag")
    assert simlab.rollup_study(out) is not None


def test_run_cell_same_seed_same_rows():
    sc = simlab.load_scenario("poisson_p25")
    a = simlab.run_cell(sc, 150, 1, "mixture", TINY)
    b = simlab.run_cell(sc, 150, 1, "mixture", TINY)
    strip = lambda rows: [{k: v for k, v in r.items() if k != "seconds"} for r in rows]
    assert strip(a) == strip(b)
