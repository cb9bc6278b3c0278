import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from mixclass.efficiency import (
    EfficiencyReport,
    FisherMatrix,
    asymptotic_covariances,
    binary_normal_theta,
    complete_fisher,
    default_grid,
    expected_fisher,
    parameter_names,
    rasd_surface,
    read_surface_csv,
    schur_block_inverse,
    score,
    theta_to_vector,
    vector_to_theta,
    write_surface_csv,
)
from mixclass.errors import BoundaryError, ConfigurationError
from mixclass.model import GAMMA, NORMAL, POISSON, ConstantGating, Theta


def loglik_one(vec, y, v_star, family=NORMAL, k=2):
    """Independent evaluation of log pi*_{v*} + log sum_j q_{v*j} f_j(y)."""
    th = vector_to_theta(vec, family, k)
    q = th.gating.q.entries[v_star]
    etas = th.alpha0 + th.alpha1 * np.arange(k)
    if family is NORMAL:
        f = stats.norm.pdf(y, etas, th.phi["sigma"])
    elif family is POISSON:
        f = stats.poisson.pmf(y, np.exp(etas))
    else:
        a = th.phi["shape"]
        f = stats.gamma.pdf(y, a, scale=np.exp(etas) / a)
    return math.log(th.pi_star[v_star]) + math.log(float(q @ f))


def fd_gradient(vec, y, v_star, family=NORMAL, k=2):
    g = np.zeros(vec.size)
    for i in range(vec.size):
        h = 1e-6 * max(1.0, abs(vec[i]))
        up, dn = vec.copy(), vec.copy()
        up[i] += h
        dn[i] -= h
        g[i] = (loglik_one(up, y, v_star, family, k) - loglik_one(dn, y, v_star, family, k)) / (2 * h)
    return g


def random_theta(rng, family=NORMAL, k=2):
    phi = {"sigma": rng.uniform(0.5, 2.0)} if family is NORMAL else {"shape": rng.uniform(1, 4)} if family is GAMMA else {}
    q = rng.dirichlet(np.ones(k) * 3, size=k)
    q = 0.05 + 0.9 * q
    q /= q.sum(axis=1, keepdims=True)
    pi_star = 0.1 + 0.8 * rng.dirichlet(np.ones(k) * 2)
    pi_star /= pi_star.sum()
    scale = 1.0 if family is NORMAL else 0.4
    return Theta(rng.normal(0, scale), rng.uniform(0.2, 2.0) * scale * 2, pi_star, ConstantGating(q), phi=phi)


@given(st.integers(0, 2**32 - 1))
def test_score_matches_finite_differences_normal(seed):
    rng = np.random.default_rng(seed)
    th = random_theta(rng)
    y = rng.normal(th.alpha0 + th.alpha1 / 2, 2.0)
    v = int(rng.integers(0, 2))
    s = score(th, y, v)
    fd = fd_gradient(theta_to_vector(th), y, v)
    assert np.all(np.abs(s - fd) <= 1e-6 * np.maximum(1.0, np.abs(fd)))


@pytest.mark.parametrize("family,k", [(POISSON, 2), (GAMMA, 2), (NORMAL, 3)])
def test_score_matches_finite_differences_other(family, k, rng):
    for _ in range(10):
        th = random_theta(rng, family, k)
        if family is NORMAL:
            y = rng.normal(th.alpha0 + th.alpha1, 2.0)
        elif family is POISSON:
            y = float(rng.poisson(np.exp(th.alpha0 + th.alpha1)))
        else:
            y = rng.gamma(2.0, np.exp(th.alpha0) / 2.0)
        v = int(rng.integers(0, k))
        s = score(th, y, v, family)
        fd = fd_gradient(theta_to_vector(th, family), y, v, family, k)
        assert np.all(np.abs(s - fd) <= 1e-6 * np.maximum(1.0, np.abs(fd)))


def test_score_identity_q_reduces_to_normal():
    th = Theta(0.7, 1.3, (0.4, 0.6), np.eye(2), phi={"sigma": 1.5})
    s = score(th, 2.0, 0, known_q=True)
    assert s[0] == pytest.approx((2.0 - 0.7) / 1.5**2, abs=1e-14)


def test_score_boundary_error():
    th = Theta(0.0, 1.0, (0.5, 0.5), np.eye(2), phi={"sigma": 1.0})
    with pytest.raises(BoundaryError):
        score(th, 0.0, 0)


def test_mean_score_zero_at_truth(rng):
    th = binary_normal_theta(2.0, 0.4, 0.1, 0.2)
    m = 200_000
    vs = rng.choice(2, size=m, p=th.pi_star)
    q = th.gating.q.entries
    v = (rng.random(m) < q[vs, 1]).astype(int)
    y = rng.normal(th.alpha0 + th.alpha1 * v, th.phi["sigma"])
    s = np.vstack([score(th, y[vs == k], k) for k in (0, 1)])
    mean = s.mean(axis=0)
    se = s.std(axis=0, ddof=1) / math.sqrt(m)
    assert np.all(np.abs(mean) <= 4 * se)


def test_parameter_order():
    assert parameter_names() == ("alpha0", "alpha1", "sigma", "pi_star_1", "q_00", "q_10")
    assert parameter_names(known_q=True) == ("alpha0", "alpha1", "sigma", "pi_star_1")


@given(st.floats(0.3, 3.0), st.floats(0.1, 0.9))
def test_avar0_closed_form(sigma, pi1):
    th = binary_normal_theta(1.0, pi1, 0.1, 0.1, sigma)
    rep = asymptotic_covariances(th)
    assert rep.avar0 == pytest.approx(sigma**2 / (pi1 * (1 - pi1)), rel=1e-4)


def test_avar0_reference_value():
    th = Theta(0.0, 1.0, (0.5, 0.5), np.eye(2), phi={"sigma": 1.0})
    info = complete_fisher(th)
    assert np.linalg.inv(info.entries)[1, 1] == pytest.approx(4.0, rel=1e-8)


def test_fisher_symmetric_psd(rng):
    for family in (NORMAL, POISSON):
        th = random_theta(rng, family)
        f = expected_fisher(th, family)
        assert isinstance(f, FisherMatrix)
        assert f.is_symmetric() and f.is_psd()


def _swap_jacobian():
    # (a0, a1, s, ps1, q00, q10) -> (a0 + a1, -a1, s, 1 - ps1, 1 - q10, 1 - q00)
    j = np.zeros((6, 6))
    j[0, 0] = j[0, 1] = 1
    j[1, 1] = -1
    j[2, 2] = 1
    j[3, 3] = -1
    j[4, 5] = -1
    j[5, 4] = -1
    return j


@pytest.mark.parametrize("pi1,p01,p10", [(0.5, 0.2, 0.2), (0.3, 0.1, 0.25)])
def test_fisher_label_swap_equivariance(pi1, p01, p10):
    th = binary_normal_theta(1.5, pi1, p01, p10)
    vec = theta_to_vector(th)
    j = _swap_jacobian()
    offset = np.array([0, 0, 0, 1, 1, 1])
    swapped = vector_to_theta(j @ vec + offset)
    i0 = expected_fisher(th).entries
    i1 = expected_fisher(swapped).entries
    jinv = np.linalg.inv(j)
    np.testing.assert_allclose(i1, jinv.T @ i0 @ jinv, atol=1e-8)


def test_schur_block_matches_full_inverse(rng):
    a = rng.normal(size=(6, 6))
    m = a @ a.T + 6 * np.eye(6)
    full = np.linalg.inv(m)[:3, :3]
    np.testing.assert_allclose(schur_block_inverse(m, [0, 1, 2], [3, 4, 5]), full, atol=1e-12)


def test_ordering_and_small_loss_at_large_effect():
    rep = asymptotic_covariances(binary_normal_theta(5.0, 0.5, 0.15, 0.15))
    assert 1 - 1e-4 <= rep.rasd1 <= rep.rasd2 + 1e-4
    assert rep.rasd2 <= 1.1


def test_small_effect_heavy_misclassification():
    rep = asymptotic_covariances(binary_normal_theta(1.0, 0.5, 0.3, 0.3))
    assert rep.rasd2 > rep.rasd1 > 1.0


def test_boundary_is_infinite():
    th = Theta(0.0, 1.0, (0.5, 0.5), [[1.0, 0.0], [0.3, 0.7]], phi={"sigma": 1.0})
    rep = asymptotic_covariances(th)
    assert math.isinf(rep.rasd2)
    assert math.isfinite(rep.rasd1)


def test_boundary_is_a_jump_not_a_limit():
    # the expected information stays regular as a reclassification entry
    # approaches 0; only the boundary cell itself is reported as infinite
    vals = []
    for q01 in (0.1, 0.01, 0.001):
        th = Theta(0.0, 1.0, (0.5, 0.5), [[1 - q01, q01], [0.3, 0.7]], phi={"sigma": 1.0})
        vals.append(asymptotic_covariances(th).rasd2)
    assert all(math.isfinite(v) for v in vals)
    assert abs(vals[2] - vals[1]) < abs(vals[1] - vals[0])
    edge = Theta(0.0, 1.0, (0.5, 0.5), [[1.0, 0.0], [0.3, 0.7]], phi={"sigma": 1.0})
    assert math.isinf(asymptotic_covariances(edge).rasd2)


def test_effect_size_dominates():
    small = asymptotic_covariances(binary_normal_theta(1.0, 0.5, 0.2, 0.3)).rasd2
    large = asymptotic_covariances(binary_normal_theta(2.0, 0.5, 0.2, 0.3)).rasd2
    assert small >= large


def test_surface_symmetry_and_csv(tmp_path):
    grid = [0.1, 0.3]
    cells = rasd_surface([1.0], 0.5, grid)
    by = {(c.p01, c.p10): c for c in cells}
    assert by[(0.1, 0.3)].rasd1 == pytest.approx(by[(0.3, 0.1)].rasd1, rel=1e-6)
    assert by[(0.1, 0.3)].rasd2 == pytest.approx(by[(0.3, 0.1)].rasd2, rel=1e-6)
    path = tmp_path / "s.csv"
    assert write_surface_csv(cells, path) == 4
    back = read_surface_csv(path)
    assert [(c.p01, c.p10) for c in back] == [(c.p01, c.p10) for c in cells]
    np.testing.assert_allclose([c.rasd2 for c in back], [c.rasd2 for c in cells])
    assert write_surface_csv(cells, path, dedupe_symmetric=True) == 3


def test_surface_boundary_and_failures(tmp_path):
    cells = rasd_surface([5.0], 0.5, default_grid(1, include_boundary=True))
    for c in cells:
        if c.p01 in (0.0, 1.0) or c.p10 in (0.0, 1.0):
            assert math.isinf(c.rasd2) or math.isnan(c.rasd2)
        else:
            assert c.rasd2 <= 1.1
    # p01 = 1 and p10 = 0 leaves observed category 0 empty: written as an empty rasd1 and inf rasd2
    path = tmp_path / "b.csv"
    write_surface_csv(cells, path)
    text = path.read_text()
    assert "inf" in text


def test_surface_depends_on_pi1():
    a = rasd_surface([1.0], 0.5, [0.2])[0]
    b = rasd_surface([1.0], 0.2, [0.2])[0]
    assert a.rasd1 != pytest.approx(b.rasd1, rel=1e-6)


def test_surface_rejects_bad_input():
    with pytest.raises(ConfigurationError):
        rasd_surface([1.0], 1.0, [0.2])
    with pytest.raises(ConfigurationError):
        rasd_surface([1.0], 0.5, [1.2])


def test_report_ratios():
    r = EfficiencyReport(1.0, 4.0, 9.0)
    assert (r.rasd1, r.rasd2) == (2.0, 3.0)
