"""Independent reference computations shared by the test modules."""

import math

import numpy as np
from scipy import integrate, optimize


def semi_conjugate_moments(y, Z, m0, prec0, shape, rate):
    """Posterior moments of Gaussian linear regression with independent priors.

    ``b ~ N(m0, diag(1/prec0))`` and precision ``tau ~ Gamma(shape, rate)``
    are a priori independent, so the posterior is not conjugate.  Given
    ``tau`` the coefficients are Gaussian with closed-form mean and
    covariance, and the marginal posterior of ``tau`` is one-dimensional;
    it is integrated numerically over ``u = log tau``.

    Returns a dict with ``mean`` and ``var`` of each coefficient and of
    ``sigma = tau ** -0.5``.
    """
    y = np.asarray(y, dtype=float)
    Z = np.asarray(Z, dtype=float)
    n, p = Z.shape
    m0 = np.asarray(m0, dtype=float)
    P0 = np.diag(prec0)
    ztz, zty, yty = Z.T @ Z, Z.T @ y, y @ y

    def conditional(u):
        tau = math.exp(u)
        lam = tau * ztz + P0
        h = tau * zty + P0 @ m0
        cov = np.linalg.inv(lam)
        mean = cov @ h
        sign, logdet = np.linalg.slogdet(lam)
        # log p(y | tau) + log p(tau) + log |d tau / d u|, constants dropped
        lp = 0.5 * n * u - 0.5 * tau * yty + 0.5 * h @ mean - 0.5 * logdet
        lp += (shape - 1.0) * u - rate * tau + u
        return lp, mean, cov

    mode = optimize.minimize_scalar(lambda u: -conditional(u)[0], bounds=(-30, 30), method="bounded").x
    lp_mode = conditional(mode)[0]
    width = 40.0 / math.sqrt(max(n, 1))
    lo, hi = mode - width, mode + width

    def expect(fn):
        f = lambda u: math.exp(conditional(u)[0] - lp_mode) * fn(u)
        val, _ = integrate.quad(f, lo, hi, epsabs=0, epsrel=1e-11, limit=400, points=[mode])
        return val

    norm = expect(lambda u: 1.0)
    out = {}
    for i in range(p):
        e1 = expect(lambda u: conditional(u)[1][i]) / norm
        e2 = expect(lambda u: conditional(u)[2][i, i] + conditional(u)[1][i] ** 2) / norm
        out[i] = {"mean": e1, "var": e2 - e1**2}
    s1 = expect(lambda u: math.exp(-0.5 * u)) / norm
    s2 = expect(lambda u: math.exp(-u)) / norm
    out["sigma"] = {"mean": s1, "var": s2 - s1**2}
    return out


def simulate_mixture(rng, n, alpha, P, pi, family="normal", sigma=1.0):
    """``(y, v_star, v)`` from the classification model."""
    P = np.asarray(P, dtype=float)
    k = len(pi)
    v = rng.choice(k, size=n, p=pi)
    cum = np.cumsum(P[v], axis=1)
    vs = np.minimum((rng.random(n)[:, None] > cum).sum(axis=1), k - 1)
    eta = alpha[0] + alpha[1] * v
    if family == "normal":
        y = rng.normal(eta, sigma)
    else:
        y = rng.poisson(np.exp(eta)).astype(float)
    return y, vs, v
