"""Scores, expected Fisher information and asymptotic efficiency loss.

Everything here works with the covariate-free model in which the only
regressor is the misclassified category, so a single observation is
``(Y, V*)``.  Parameters are flattened in the order

    alpha0, alpha1, <nuisance>, pi_star_1..pi_star_{K-1}, q_{k,0..K-2} for each k

with ``pi_star_0`` and the last column of the reclassification matrix implied
by the sum-to-one constraints.  For two categories and a normal response this
is ``(alpha0, alpha1, sigma, pi_star_1, q_00, q_10)``.

Three regimes are compared for a target coefficient:

* ``avar0`` -- the true category is observed (complete-data information);
* ``avar1`` -- only ``V*`` is observed but the reclassification matrix is known;
* ``avar2`` -- only ``V*`` is observed and the matrix is estimated as well.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple

import numpy as np
from scipy import linalg
from scipy.special import digamma, logsumexp

from .errors import BoundaryError, ConfigurationError, DegenerateCategoryError, QuadratureError
from .model import (
    NORMAL,
    ConstantGating,
    Kind,
    ResponseFamily,
    Theta,
    binary_classification,
    derive_reclassification,
    family_from_name,
)
from .quadrature import QuadratureConfig, integrate_expectation, sum_expectation

SINGULAR_RATIO = 1e-10
_SUPPORTED = (Kind.NORMAL, Kind.POISSON, Kind.GAMMA)


@dataclass(frozen=True)
class FisherMatrix:
    entries: np.ndarray
    names: Tuple[str, ...]

    def __post_init__(self):
        e = np.array(self.entries, dtype=float)
        e.setflags(write=False)
        object.__setattr__(self, "entries", e)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def is_symmetric(self, tol: float = 1e-8) -> bool:
        return bool(np.max(np.abs(self.entries - self.entries.T), initial=0.0) <= tol)

    def is_psd(self, tol: float = -1e-8) -> bool:
        return bool(np.linalg.eigvalsh(self.entries).min() >= tol)


@dataclass(frozen=True)
class EfficiencyReport:
    avar0: float
    avar1: float
    avar2: float
    target: str = "alpha1"

    @property
    def rasd1(self) -> float:
        return math.sqrt(self.avar1 / self.avar0)

    @property
    def rasd2(self) -> float:
        return math.sqrt(self.avar2 / self.avar0)


# ---------------------------------------------------------------------------
# Parameter flattening
# ---------------------------------------------------------------------------


def parameter_names(family: ResponseFamily = NORMAL, n_categories: int = 2, known_q: bool = False):
    family = family_from_name(family)
    k = n_categories
    names = ["alpha0", "alpha1", *family.nuisance_names]
    names += [f"pi_star_{i}" for i in range(1, k)]
    if not known_q:
        names += [f"q_{r}{c}" for r in range(k) for c in range(k - 1)]
    return tuple(names)


def _check_theta(theta: Theta, family: ResponseFamily):
    if family.kind not in _SUPPORTED:
        raise ConfigurationError(f"efficiency analysis supports normal, poisson and gamma, not {family.name}")
    if not isinstance(theta.gating, ConstantGating):
        raise ConfigurationError("efficiency analysis needs a constant reclassification matrix")
    if theta.beta.size:
        raise ConfigurationError("efficiency analysis is defined for the model without accurate covariates")
    family.check_phi(theta.phi)


def theta_to_vector(theta: Theta, family: ResponseFamily = NORMAL) -> np.ndarray:
    family = family_from_name(family)
    _check_theta(theta, family)
    q = theta.gating.q.entries
    return np.concatenate([
        [theta.alpha0, theta.alpha1],
        [theta.phi[n] for n in family.nuisance_names],
        theta.pi_star[1:],
        q[:, :-1].ravel(),
    ])


def vector_to_theta(vec, family: ResponseFamily = NORMAL, n_categories: int = 2) -> Theta:
    family = family_from_name(family)
    k = n_categories
    vec = np.asarray(vec, dtype=float)
    nn = len(family.nuisance_names)
    phi = dict(zip(family.nuisance_names, vec[2:2 + nn]))
    ps = vec[2 + nn:2 + nn + k - 1]
    qfree = vec[2 + nn + k - 1:].reshape(k, k - 1)
    pi_star = np.concatenate([[1.0 - ps.sum()], ps])
    q = np.column_stack([qfree, 1.0 - qfree.sum(axis=1)])
    return Theta(vec[0], vec[1], pi_star, ConstantGating(q), phi=phi)


# ---------------------------------------------------------------------------
# Scores
# ---------------------------------------------------------------------------


def _component_derivatives(family, y, eta, phi):
    """d log f / d eta and d log f / d nuisance for each (row, component)."""
    y = y[:, None]
    if family.kind is Kind.NORMAL:
        s = phi["sigma"]
        r = y - eta
        return r / s**2, [-1.0 / s + r * r / s**3]
    if family.kind is Kind.POISSON:
        return y - np.exp(eta), []
    a = phi["shape"]
    ratio = y * np.exp(-eta)
    return a * (ratio - 1.0), [np.log(a) + 1.0 - eta + np.log(y) - digamma(a) - ratio]


def score(theta: Theta, y, v_star: int, family: ResponseFamily = NORMAL, known_q: bool = False):
    """Gradient of the single-observation log-likelihood ``log L(theta; y, v*)``.

    ``y`` may be a scalar (returns shape ``(d,)``) or a vector (``(m, d)``).
    With ``known_q`` the reclassification entries are left out, which also
    permits boundary matrices such as the identity.

    Raises
    ------
    BoundaryError
        If a free reclassification probability is 0 or 1, or a scale is 0.
    """
    family = family_from_name(family)
    _check_theta(theta, family)
    k = theta.n_categories
    q = theta.gating.q.entries
    if not known_q and (np.any(q <= 0.0) or np.any(q >= 1.0)):
        raise BoundaryError("score with respect to Q is undefined on the boundary of the simplex")
    if np.any(theta.pi_star <= 0.0):
        raise BoundaryError("observed-category probabilities must be positive")
    v = int(v_star)
    scalar = np.ndim(y) == 0
    y = family.check_y(np.atleast_1d(y))
    eta = theta.alpha0 + theta.alpha1 * np.arange(k)
    logf = family.logpdf(y[:, None], eta[None, :], theta.phi)
    with np.errstate(divide="ignore"):
        logq = np.log(q[v])
    lm = logsumexp(logf + logq, axis=1, keepdims=True)
    r = np.exp(logf + logq - lm)
    deta, dnuis = _component_derivatives(family, y, eta[None, :], theta.phi)
    cols = [
        np.sum(r * deta, axis=1),
        np.sum(r * deta * np.arange(k), axis=1),
    ]
    cols += [np.sum(r * d, axis=1) for d in dnuis]
    m = y.size
    for i in range(1, k):
        cols.append(np.full(m, (v == i) / theta.pi_star[i] - (v == 0) / theta.pi_star[0]))
    if not known_q:
        ratio = np.exp(logf - lm)  # f_j / mixture density
        for row in range(k):
            for j in range(k - 1):
                if row == v:
                    cols.append(ratio[:, j] - ratio[:, k - 1])
                else:
                    cols.append(np.zeros(m))
    s = np.column_stack(cols)
    return s[0] if scalar else s


def complete_score(theta: Theta, y, v: int, family: ResponseFamily = NORMAL):
    """Score of ``log f(y | V=v)`` with respect to ``(alpha0, alpha1, nuisance)``."""
    family = family_from_name(family)
    scalar = np.ndim(y) == 0
    y = family.check_y(np.atleast_1d(y))
    eta = np.array([[theta.alpha0 + theta.alpha1 * v]])
    deta, dnuis = _component_derivatives(family, y, eta, theta.phi)
    s = np.column_stack([deta[:, 0], v * deta[:, 0]] + [d[:, 0] for d in dnuis])
    return s[0] if scalar else s


# ---------------------------------------------------------------------------
# Information matrices
# ---------------------------------------------------------------------------


def _outer_expectation(func, family, eta, phi, cfg, names):
    g = lambda t: (lambda s: s[:, :, None] * s[:, None, :])(func(np.asarray(t, dtype=float)))
    try:
        if family.is_discrete:
            return sum_expectation(g, family.distribution(eta, phi))
        return integrate_expectation(g, family.distribution(eta, phi), cfg)
    except QuadratureError as exc:
        d = len(names)
        a, b = divmod(exc.entry, d) if exc.entry is not None else (0, 0)
        raise QuadratureError(
            f"Fisher entry ({names[a]}, {names[b]}) did not converge: {exc}",
            exc.value,
            exc.err_est,
            (names[a], names[b]),
        ) from exc


def expected_fisher(
    theta: Theta,
    family: ResponseFamily = NORMAL,
    known_q: bool = False,
    cfg: QuadratureConfig = QuadratureConfig(),
) -> FisherMatrix:
    """Expected information ``sum_v pi*_v E[s s' | V*=v]`` of one observation.

    Each conditional expectation is split over the mixture components,
    ``E[. | V*=v] = sum_j q_vj E_j[.]``, and every component expectation is a
    one-dimensional integral over its quantile function (or a truncated sum
    for counts).
    """
    family = family_from_name(family)
    _check_theta(theta, family)
    k = theta.n_categories
    names = parameter_names(family, k, known_q)
    q = theta.gating.q.entries
    info = np.zeros((len(names), len(names)))
    for v in range(k):
        if theta.pi_star[v] == 0.0:
            continue
        for j in range(k):
            if q[v, j] == 0.0:
                continue
            eta = theta.alpha0 + theta.alpha1 * j
            func = lambda t, v=v: score(theta, t, v, family, known_q)
            info += theta.pi_star[v] * q[v, j] * _outer_expectation(func, family, eta, theta.phi, cfg, names)
    return FisherMatrix(0.5 * (info + info.T), names)


def complete_fisher(
    theta: Theta, family: ResponseFamily = NORMAL, cfg: QuadratureConfig = QuadratureConfig()
) -> FisherMatrix:
    """Information for ``(alpha0, alpha1, nuisance)`` when ``V`` itself is observed.

    The true-category distribution is ``pi = Q' pi*``.
    """
    family = family_from_name(family)
    _check_theta(theta, family)
    k = theta.n_categories
    pi = theta.gating.q.entries.T @ theta.pi_star
    names = ("alpha0", "alpha1", *family.nuisance_names)
    info = np.zeros((len(names), len(names)))
    for v in range(k):
        if pi[v] <= 0.0:
            continue
        eta = theta.alpha0 + theta.alpha1 * v
        func = lambda t, v=v: complete_score(theta, t, v, family)
        info += pi[v] * _outer_expectation(func, family, eta, theta.phi, cfg, names)
    return FisherMatrix(0.5 * (info + info.T), names)


class SingularInformation(ArithmeticError):
    pass


def _inverse(m: np.ndarray) -> np.ndarray:
    """Inverse of a symmetric information matrix.

    Cholesky first, symmetric-pivoted LDL' solve as a fallback.  A smallest
    eigenvalue below ``1e-10`` times the largest counts as singular.
    """
    eig = np.linalg.eigvalsh(m)
    if eig[-1] <= 0.0 or eig[0] < SINGULAR_RATIO * eig[-1]:
        raise SingularInformation(f"information matrix is singular (eigenvalues {eig[0]:.3g}, {eig[-1]:.3g})")
    eye = np.eye(m.shape[0])
    try:
        return linalg.cho_solve(linalg.cho_factor(m), eye)
    except linalg.LinAlgError:
        return linalg.solve(m, eye, assume_a="sym")


def schur_block_inverse(info: np.ndarray, a_idx: Sequence[int], b_idx: Sequence[int]) -> np.ndarray:
    """``{[I_CC]^-1}_AA`` for ``C = A + B`` via ``(I_AA - I_AB I_BB^-1 I_BA)^-1``."""
    a_idx, b_idx = list(a_idx), list(b_idx)
    i_aa = info[np.ix_(a_idx, a_idx)]
    if not b_idx:
        return _inverse(i_aa)
    i_ab = info[np.ix_(a_idx, b_idx)]
    i_bb = info[np.ix_(b_idx, b_idx)]
    return _inverse(i_aa - i_ab @ _inverse(i_bb) @ i_ab.T)


def asymptotic_covariances(
    theta: Theta,
    family: ResponseFamily = NORMAL,
    target: str = "alpha1",
    cfg: QuadratureConfig = QuadratureConfig(),
) -> EfficiencyReport:
    """Asymptotic variances of ``target`` under the three observation regimes.

    A singular full information matrix (``alpha1 = 0`` or a reclassification
    entry on 0 or 1) gives ``avar2 = inf``.
    """
    family = family_from_name(family)
    i0 = complete_fisher(theta, family, cfg)
    if target not in i0.names:
        raise ConfigurationError(f"target must be one of {i0.names}")
    avar0 = float(_inverse(i0.entries)[i0.index(target), i0.index(target)])

    known = expected_fisher(theta, family, known_q=True, cfg=cfg)
    a_idx = list(range(len(i0.names)))
    b_idx = list(range(len(i0.names), len(known.names)))
    t = i0.index(target)
    try:
        avar1 = float(schur_block_inverse(known.entries, a_idx, b_idx)[t, t])
    except SingularInformation:
        avar1 = math.inf

    q = theta.gating.q.entries
    if theta.alpha1 == 0.0 or np.any(q <= 0.0) or np.any(q >= 1.0):
        avar2 = math.inf
    else:
        full = expected_fisher(theta, family, cfg=cfg)
        try:
            avar2 = float(_inverse(full.entries)[t, t])
        except SingularInformation:
            avar2 = math.inf
    return EfficiencyReport(avar0, avar1, avar2, target)


# ---------------------------------------------------------------------------
# Efficiency surfaces over misclassification rates
# ---------------------------------------------------------------------------


def binary_normal_theta(effect_size: float, pi1: float, p01: float, p10: float, sigma: float = 1.0) -> Theta:
    """Two-category normal model with ``alpha1 = effect_size * sigma`` and ``alpha0 = 0``."""
    pi_star, q = derive_reclassification(binary_classification(p01, p10), [1.0 - pi1, pi1])
    return Theta(0.0, effect_size * sigma, pi_star, ConstantGating(q), phi={"sigma": sigma})


@dataclass(frozen=True)
class SurfaceCell:
    p01: float
    p10: float
    effect_size: float
    rasd1: float
    rasd2: float


def _cell(args) -> SurfaceCell:
    effect, pi1, p01, p10, sigma, cfg = args
    try:
        theta = binary_normal_theta(effect, pi1, p01, p10, sigma)
    except DegenerateCategoryError:
        # an observed category that never occurs: nothing is identified
        return SurfaceCell(p01, p10, effect, math.nan, math.inf)
    try:
        rep = asymptotic_covariances(theta, NORMAL, "alpha1", cfg)
        return SurfaceCell(p01, p10, effect, rep.rasd1, rep.rasd2)
    except (QuadratureError, SingularInformation, BoundaryError, ArithmeticError):
        return SurfaceCell(p01, p10, effect, math.nan, math.nan)


def default_grid(n: int, include_boundary: bool = False) -> np.ndarray:
    """``n`` equally spaced interior rates ``i / (n + 1)``, optionally plus 0 and 1."""
    g = np.arange(1, n + 1) / (n + 1)
    if include_boundary:
        g = np.concatenate([[0.0], g, [1.0]])
    return g


def rasd_surface(
    effect_sizes: Iterable[float],
    pi1: float,
    grid,
    sigma: float = 1.0,
    workers: int = 1,
    cfg: QuadratureConfig = QuadratureConfig(),
) -> List[SurfaceCell]:
    """Rasd values on a ``(p01, p10)`` grid for each effect size ``alpha1 / sigma``.

    ``grid`` is either one sequence used for both axes or a pair
    ``(p01_values, p10_values)``.  Cells that cannot be computed hold NaN
    rather than aborting the sweep.  Output order is effect size, then p01,
    then p10, whatever the number of workers.
    """
    if not 0.0 < pi1 < 1.0:
        raise ConfigurationError("pi1 must lie strictly inside (0, 1)")
    if isinstance(grid, tuple) and len(grid) == 2:
        g01, g10 = (np.asarray(g, dtype=float) for g in grid)
    else:
        g01 = g10 = np.asarray(grid, dtype=float)
    if np.any((g01 < 0) | (g01 > 1)) or np.any((g10 < 0) | (g10 > 1)):
        raise ConfigurationError("misclassification rates must lie in [0, 1]")
    jobs = [(float(e), pi1, float(a), float(b), sigma, cfg) for e in effect_sizes for a in g01 for b in g10]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_cell, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    return [_cell(j) for j in jobs]


def _fmt(x: float) -> str:
    if math.isnan(x):
        return ""
    if math.isinf(x):
        return "inf"
    return repr(float(x))


def write_surface_csv(cells: Sequence[SurfaceCell], path, dedupe_symmetric: bool = False) -> int:
    """Write ``p01,p10,effect_size,rasd1,rasd2`` rows; returns the row count.

    ``dedupe_symmetric`` keeps only ``p01 <= p10`` (valid when ``pi1 = 0.5``).
    """
    rows = [c for c in cells if not dedupe_symmetric or c.p01 <= c.p10]
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["p01", "p10", "effect_size", "rasd1", "rasd2"])
        for c in rows:
            out.writerow([repr(c.p01), repr(c.p10), repr(c.effect_size), _fmt(c.rasd1), _fmt(c.rasd2)])
    return len(rows)


def read_surface_csv(path) -> List[SurfaceCell]:
    parse = lambda s: math.nan if s == "" else float(s)
    with open(path, newline="") as fh:
        return [
            SurfaceCell(float(r["p01"]), float(r["p10"]), float(r["effect_size"]), parse(r["rasd1"]), parse(r["rasd2"]))
            for r in csv.DictReader(fh)
        ]
