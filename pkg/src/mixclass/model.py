"""Domain types, component densities and the observed-data mixture likelihood.

A regression of ``y`` on a categorical covariate ``V`` that is only observed
through a misclassified surrogate ``V*`` has the conditional density

    f(y | V*=k, x) = sum_j q_kj(w) f(y | V=j, x)

where the mixture weights ``q_kj = P(V=j | V*=k)`` are the reclassification
probabilities.  Components differ only through ``alpha1 * j`` in the linear
predictor, which keeps them ordered along a single direction.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Tuple, Union

import numpy as np
from scipy import stats
from scipy.special import gammaln, logsumexp

from .errors import (
    ConfigurationError,
    DegenerateCategoryError,
    DomainError,
    NumericError,
)

ROW_TOL = 1e-12

__all__ = [
    "Kind",
    "Link",
    "ResponseFamily",
    "NORMAL",
    "STUDENT_T",
    "POISSON",
    "ZIP",
    "GAMMA",
    "family_from_name",
    "ClassificationMatrix",
    "ReclassificationMatrix",
    "ConstantGating",
    "LogitGating",
    "Theta",
    "Dataset",
    "ModelSpec",
    "component_logpdf",
    "gating_probabilities",
    "log_gating_matrix",
    "component_log_densities",
    "mixture_loglik",
    "mixture_loglik_rows",
    "membership_weights",
    "complete_loglik",
    "derive_reclassification",
    "derive_classification",
]


# ---------------------------------------------------------------------------
# Response families
# ---------------------------------------------------------------------------


class Kind(enum.Enum):
    NORMAL = "normal"
    STUDENT_T = "student_t"
    POISSON = "poisson"
    ZIP = "zip"
    GAMMA = "gamma"


class Link(enum.Enum):
    IDENTITY = "identity"
    LOG = "log"


_LINKS = {
    Kind.NORMAL: Link.IDENTITY,
    Kind.STUDENT_T: Link.IDENTITY,
    Kind.POISSON: Link.LOG,
    Kind.ZIP: Link.LOG,
    Kind.GAMMA: Link.LOG,
}

_NUISANCE = {
    Kind.NORMAL: ("sigma",),
    Kind.STUDENT_T: ("sigma", "df"),
    Kind.POISSON: (),
    Kind.ZIP: ("w",),
    Kind.GAMMA: ("shape",),
}


def _check_nuisance_value(name, value):
    if not np.isfinite(value):
        raise ConfigurationError(f"nuisance {name!r} must be finite, got {value}")
    if name == "w":
        if not 0.0 <= value < 1.0:
            raise ConfigurationError(f"zero-inflation weight must lie in [0, 1), got {value}")
    elif value <= 0.0:
        raise ConfigurationError(f"nuisance {name!r} must be positive, got {value}")


@dataclass(frozen=True)
class ResponseFamily:
    """A response distribution paired with its fixed link function.

    Normal and Student-t use the identity link; Poisson, zero-inflated Poisson
    and gamma use the log link, with ``exp(eta)`` the conditional mean.  Any
    other pairing is rejected.
    """

    kind: Kind
    link: Optional[Link] = None

    def __post_init__(self):
        kind = Kind(self.kind)
        object.__setattr__(self, "kind", kind)
        expected = _LINKS[kind]
        if self.link is None:
            object.__setattr__(self, "link", expected)
        elif Link(self.link) is not expected:
            raise ConfigurationError(
                f"{kind.value} family requires the {expected.value} link, got {Link(self.link).value}"
            )
        else:
            object.__setattr__(self, "link", Link(self.link))

    @property
    def name(self) -> str:
        return self.kind.value

    @property
    def nuisance_names(self) -> Tuple[str, ...]:
        return _NUISANCE[self.kind]

    @property
    def is_discrete(self) -> bool:
        return self.kind in (Kind.POISSON, Kind.ZIP)

    def check_phi(self, phi: Mapping[str, float]) -> None:
        missing = [k for k in self.nuisance_names if k not in phi]
        if missing:
            raise ConfigurationError(f"{self.name} family needs nuisance parameters {missing}")
        for k in self.nuisance_names:
            _check_nuisance_value(k, phi[k])

    def check_y(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        bad = ~np.isfinite(y)
        if bad.any():
            raise DomainError(f"non-finite response at row {int(np.flatnonzero(bad)[0])}")
        if self.is_discrete:
            bad = (y < 0) | (y != np.floor(y))
            if bad.any():
                raise DomainError(
                    f"{self.name} response must be a non-negative integer "
                    f"(row {int(np.flatnonzero(bad)[0])})"
                )
        elif self.kind is Kind.GAMMA:
            bad = y <= 0
            if bad.any():
                raise DomainError(f"gamma response must be positive (row {int(np.flatnonzero(bad)[0])})")
        return y

    def mean(self, eta):
        eta = np.asarray(eta, dtype=float)
        return eta if self.link is Link.IDENTITY else np.exp(eta)

    def logpdf(self, y, eta, phi: Mapping[str, float]):
        """Vectorised log density of ``y`` at linear predictor ``eta``.

        Inputs broadcast against each other; ``y`` is assumed already checked.
        """
        y = np.asarray(y, dtype=float)
        eta = np.asarray(eta, dtype=float)
        k = self.kind
        if k is Kind.NORMAL:
            s = phi["sigma"]
            z = (y - eta) / s
            return -0.5 * np.log(2.0 * np.pi) - np.log(s) - 0.5 * z * z
        if k is Kind.STUDENT_T:
            s, nu = phi["sigma"], phi["df"]
            z = (y - eta) / s
            return (
                gammaln(0.5 * (nu + 1.0))
                - gammaln(0.5 * nu)
                - 0.5 * np.log(nu * np.pi)
                - np.log(s)
                - 0.5 * (nu + 1.0) * np.log1p(z * z / nu)
            )
        if k is Kind.POISSON:
            return y * eta - np.exp(eta) - gammaln(y + 1.0)
        if k is Kind.ZIP:
            w = phi["w"]
            mu = np.exp(eta) / (1.0 - w)
            pos = np.log1p(-w) + y * np.log(mu) - mu - gammaln(y + 1.0)
            with np.errstate(divide="ignore"):
                zero = np.log(w + (1.0 - w) * np.exp(-mu))
            return np.where(y == 0, zero, pos)
        # gamma, parameterised by mean exp(eta) and shape
        a = phi["shape"]
        return a * np.log(a) - a * eta + (a - 1.0) * np.log(y) - a * y * np.exp(-eta) - gammaln(a)

    def distribution(self, eta: float, phi: Mapping[str, float]):
        """Frozen scipy distribution for one component (used by quadrature and simulation)."""
        k = self.kind
        if k is Kind.NORMAL:
            return stats.norm(loc=eta, scale=phi["sigma"])
        if k is Kind.STUDENT_T:
            return stats.t(df=phi["df"], loc=eta, scale=phi["sigma"])
        if k is Kind.POISSON:
            return stats.poisson(np.exp(eta))
        if k is Kind.GAMMA:
            m = np.exp(eta)
            return stats.gamma(a=phi["shape"], scale=m / phi["shape"])
        raise ConfigurationError("zero-inflated Poisson has no scipy counterpart; use sample()")

    def sample(self, rng: np.random.Generator, eta, phi: Mapping[str, float]) -> np.ndarray:
        eta = np.asarray(eta, dtype=float)
        k = self.kind
        if k is Kind.NORMAL:
            return eta + phi["sigma"] * rng.standard_normal(eta.shape)
        if k is Kind.STUDENT_T:
            return eta + phi["sigma"] * rng.standard_t(phi["df"], eta.shape)
        if k is Kind.POISSON:
            return rng.poisson(np.exp(eta)).astype(float)
        if k is Kind.ZIP:
            w = phi["w"]
            counts = rng.poisson(np.exp(eta) / (1.0 - w)).astype(float)
            return np.where(rng.random(eta.shape) < w, 0.0, counts)
        a = phi["shape"]
        return rng.gamma(a, np.exp(eta) / a)


NORMAL = ResponseFamily(Kind.NORMAL)
STUDENT_T = ResponseFamily(Kind.STUDENT_T)
POISSON = ResponseFamily(Kind.POISSON)
ZIP = ResponseFamily(Kind.ZIP)
GAMMA = ResponseFamily(Kind.GAMMA)


def family_from_name(name: Union[str, ResponseFamily]) -> ResponseFamily:
    if isinstance(name, ResponseFamily):
        return name
    try:
        return ResponseFamily(Kind(str(name).lower()))
    except ValueError:
        names = ", ".join(k.value for k in Kind)
        raise ConfigurationError(f"unknown family {name!r}; expected one of {names}") from None


# ---------------------------------------------------------------------------
# Probability matrices and gating
# ---------------------------------------------------------------------------


def _as_stochastic(entries, what) -> np.ndarray:
    a = np.array(entries, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
        raise ConfigurationError(f"{what} must be a square K x K matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)) or np.any(a < 0.0) or np.any(a > 1.0):
        raise ConfigurationError(f"{what} entries must lie in [0, 1]")
    dev = np.abs(a.sum(axis=1) - 1.0)
    if np.any(dev > ROW_TOL):
        raise ConfigurationError(f"{what} row {int(np.argmax(dev))} does not sum to 1")
    a.setflags(write=False)
    return a


def _as_probability_vector(p, what) -> np.ndarray:
    a = np.array(p, dtype=float).reshape(-1)
    if a.size < 1 or not np.all(np.isfinite(a)) or np.any(a < 0.0) or np.any(a > 1.0):
        raise ConfigurationError(f"{what} entries must lie in [0, 1]")
    if abs(a.sum() - 1.0) > ROW_TOL:
        raise ConfigurationError(f"{what} must sum to 1 (got {a.sum():.15g})")
    a.setflags(write=False)
    return a


def normalize_rows(a) -> np.ndarray:
    """Rescale each row of a non-negative matrix to sum to one."""
    a = np.asarray(a, dtype=float)
    return a / a.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class ClassificationMatrix:
    """``entries[k, j] = P(V* = j | V = k)``."""

    entries: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "entries", _as_stochastic(self.entries, "classification matrix"))

    @property
    def n_categories(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True)
class ReclassificationMatrix:
    """``entries[k, j] = P(V = j | V* = k)``."""

    entries: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "entries", _as_stochastic(self.entries, "reclassification matrix"))

    @property
    def n_categories(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True)
class ConstantGating:
    """Mixture weights read from a fixed reclassification matrix row."""

    q: ReclassificationMatrix

    def __post_init__(self):
        if not isinstance(self.q, ReclassificationMatrix):
            object.__setattr__(self, "q", ReclassificationMatrix(self.q))

    @property
    def n_categories(self) -> int:
        return self.q.n_categories

    @property
    def n_w(self) -> int:
        return 0


@dataclass(frozen=True)
class LogitGating:
    """Multinomial-logit reclassification probabilities.

    For an observed category ``k`` and gating covariates ``w``,
    ``q_kj(w) = exp(nu[k, j] + w @ gamma[k, j]) / sum_h exp(...)`` where the
    base category ``K-1`` has its intercept and slopes fixed at zero; only the
    first ``K-1`` columns are stored.

    ``nu`` may be given as shape ``(K-1,)`` (shared by every observed
    category) or ``(K, K-1)``; ``gamma`` correspondingly as ``(K-1, m)`` or
    ``(K, K-1, m)``.
    """

    nu: np.ndarray
    gamma: Optional[np.ndarray] = None

    def __post_init__(self):
        nu = np.array(self.nu, dtype=float)
        if nu.ndim == 1:
            k = nu.size + 1
            nu = np.broadcast_to(nu, (k, k - 1)).copy()
        if nu.ndim != 2 or nu.shape[1] != nu.shape[0] - 1:
            raise ConfigurationError(f"logit intercepts must have shape (K-1,) or (K, K-1), got {nu.shape}")
        k = nu.shape[0]
        if self.gamma is None:
            gamma = np.zeros((k, k - 1, 0))
        else:
            gamma = np.array(self.gamma, dtype=float)
            if gamma.ndim == 2:
                gamma = np.broadcast_to(gamma, (k,) + gamma.shape).copy()
            if gamma.ndim != 3 or gamma.shape[:2] != (k, k - 1):
                raise ConfigurationError(
                    f"logit slopes must have shape (K-1, m) or (K, K-1, m), got {gamma.shape}"
                )
        if not (np.all(np.isfinite(nu)) and np.all(np.isfinite(gamma))):
            raise ConfigurationError("logit gating parameters must be finite")
        nu.setflags(write=False)
        gamma.setflags(write=False)
        object.__setattr__(self, "nu", nu)
        object.__setattr__(self, "gamma", gamma)

    @property
    def n_categories(self) -> int:
        return self.nu.shape[0]

    @property
    def n_w(self) -> int:
        return self.gamma.shape[2]

    @classmethod
    def from_matrix(cls, q, n_w: int = 0) -> "LogitGating":
        """Logit parameters reproducing a constant reclassification matrix (zero slopes)."""
        q = np.asarray(q.entries if isinstance(q, ReclassificationMatrix) else q, dtype=float)
        q = np.clip(q, 1e-300, None)
        nu = np.log(q[:, :-1]) - np.log(q[:, -1:])
        k = q.shape[0]
        return cls(nu, np.zeros((k, k - 1, n_w)))


Gating = Union[ConstantGating, LogitGating]


def _log_softmax_with_base(logits: np.ndarray) -> np.ndarray:
    full = np.concatenate([logits, np.zeros(logits.shape[:-1] + (1,))], axis=-1)
    return full - logsumexp(full, axis=-1, keepdims=True)


def gating_probabilities(gating: Gating, v_star: int, w_row=None) -> np.ndarray:
    """Reclassification probabilities ``(q_{v*,0}, ..., q_{v*,K-1})`` for one row."""
    k = gating.n_categories
    if not 0 <= int(v_star) < k or int(v_star) != v_star:
        raise ConfigurationError(f"observed category {v_star} outside 0..{k - 1}")
    v_star = int(v_star)
    if isinstance(gating, ConstantGating):
        return np.array(gating.q.entries[v_star])
    logits = gating.nu[v_star].copy()
    if gating.n_w:
        if w_row is None:
            raise ConfigurationError("logit gating with slopes needs gating covariates w")
        w_row = np.asarray(w_row, dtype=float).reshape(-1)
        if w_row.size != gating.n_w:
            raise ConfigurationError(f"expected {gating.n_w} gating covariates, got {w_row.size}")
        logits = logits + gating.gamma[v_star] @ w_row
    return np.exp(_log_softmax_with_base(logits))


def log_gating_matrix(gating: Gating, v_star: np.ndarray, w: Optional[np.ndarray] = None) -> np.ndarray:
    """Row-wise log mixture weights, shape ``(n, K)``."""
    v_star = np.asarray(v_star, dtype=int)
    if isinstance(gating, ConstantGating):
        with np.errstate(divide="ignore"):
            return np.log(gating.q.entries)[v_star]
    logits = gating.nu[v_star]
    if gating.n_w:
        if w is None:
            raise ConfigurationError("logit gating with slopes needs gating covariates w")
        logits = logits + np.einsum("njm,nm->nj", gating.gamma[v_star], np.asarray(w, dtype=float))
    return _log_softmax_with_base(logits)


# ---------------------------------------------------------------------------
# Parameters and data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Theta:
    """Full parameter vector of the misclassification mixture.

    ``alpha1`` multiplies the numeric category index in the linear predictor
    ``alpha0 + alpha1 * v + x @ beta``.  ``phi`` maps nuisance names
    (``sigma``, ``df``, ``w``, ``shape``) to values.
    """

    alpha0: float
    alpha1: float
    pi_star: np.ndarray
    gating: Gating
    beta: np.ndarray = field(default_factory=lambda: np.zeros(0))
    phi: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "alpha0", float(self.alpha0))
        object.__setattr__(self, "alpha1", float(self.alpha1))
        if not (np.isfinite(self.alpha0) and np.isfinite(self.alpha1)):
            raise ConfigurationError("regression coefficients must be finite")
        beta = np.array(self.beta, dtype=float).reshape(-1)
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "pi_star", _as_probability_vector(self.pi_star, "pi_star"))
        gating = self.gating
        if not isinstance(gating, (ConstantGating, LogitGating)):
            if not isinstance(gating, ReclassificationMatrix):
                gating = ReclassificationMatrix(gating)
            gating = ConstantGating(gating)
            object.__setattr__(self, "gating", gating)
        if gating.n_categories != self.pi_star.size:
            raise ConfigurationError(
                f"gating has {gating.n_categories} categories but pi_star has {self.pi_star.size}"
            )
        phi = {str(k): float(v) for k, v in dict(self.phi).items()}
        for k, v in phi.items():
            _check_nuisance_value(k, v)
        object.__setattr__(self, "phi", phi)

    @property
    def n_categories(self) -> int:
        return self.pi_star.size

    @property
    def coefficients(self) -> np.ndarray:
        return np.concatenate([[self.alpha0, self.alpha1], self.beta])

    def replace(self, **changes) -> "Theta":
        return replace(self, **changes)


def _as_matrix(a, n, what):
    if a is None:
        return None
    a = np.array(a, dtype=float)
    if a.ndim == 1:
        a = a.reshape(-1, 1)
    if a.ndim != 2 or a.shape[0] != n:
        raise ConfigurationError(f"{what} must have {n} rows, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ConfigurationError(f"{what} contains non-finite values")
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Dataset:
    """Responses, observed categories and optional accurate/gating covariates.

    ``allow_empty`` admits a zero-row dataset, which samplers use to draw from
    the prior.
    """

    y: np.ndarray
    v_star: np.ndarray
    x: Optional[np.ndarray] = None
    w: Optional[np.ndarray] = None
    allow_empty: bool = field(default=False, repr=False)

    def __post_init__(self):
        y = np.array(self.y, dtype=float).reshape(-1)
        vs = np.array(self.v_star).reshape(-1)
        if vs.size and not np.all(vs == np.floor(vs)):
            raise ConfigurationError("v_star must hold integer category codes")
        vs = vs.astype(int)
        n = y.size
        if n < 1 and not self.allow_empty:
            raise ConfigurationError("dataset needs at least one row")
        if vs.size != n:
            raise ConfigurationError(f"v_star has {vs.size} rows but y has {n}")
        if vs.size and vs.min() < 0:
            raise ConfigurationError("v_star values must be non-negative category codes")
        y.setflags(write=False)
        vs.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "v_star", vs)
        object.__setattr__(self, "x", _as_matrix(self.x, n, "x"))
        object.__setattr__(self, "w", _as_matrix(self.w, n, "w"))

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def n_x(self) -> int:
        return 0 if self.x is None else self.x.shape[1]

    @property
    def n_w(self) -> int:
        return 0 if self.w is None else self.w.shape[1]

    @classmethod
    def empty(cls, n_x: int = 0, n_w: int = 0) -> "Dataset":
        return cls(
            np.zeros(0),
            np.zeros(0, dtype=int),
            np.zeros((0, n_x)) if n_x else None,
            np.zeros((0, n_w)) if n_w else None,
            allow_empty=True,
        )

    def subset(self, rows) -> "Dataset":
        sel = lambda a: None if a is None else a[rows]
        return Dataset(self.y[rows], self.v_star[rows], sel(self.x), sel(self.w), allow_empty=True)


@dataclass(frozen=True)
class ModelSpec:
    """Response family, number of categories and covariate configuration."""

    family: ResponseFamily
    n_categories: int
    n_x: int = 0
    gating: str = "constant"
    n_w: int = 0

    def __post_init__(self):
        object.__setattr__(self, "family", family_from_name(self.family))
        if int(self.n_categories) < 1:
            raise ConfigurationError("n_categories must be at least 1")
        object.__setattr__(self, "n_categories", int(self.n_categories))
        if self.gating not in ("constant", "logit"):
            raise ConfigurationError(f"gating must be 'constant' or 'logit', got {self.gating!r}")
        if self.gating == "constant" and self.n_w:
            raise ConfigurationError("gating covariates need logit gating")

    @property
    def n_coefficients(self) -> int:
        return (2 if self.n_categories > 1 else 1) + self.n_x

    @property
    def coefficient_names(self) -> Tuple[str, ...]:
        head = ("alpha0", "alpha1") if self.n_categories > 1 else ("alpha0",)
        return head + tuple(f"beta_{i + 1}" for i in range(self.n_x))

    def check_theta(self, theta: Theta) -> None:
        if theta.n_categories != self.n_categories:
            raise ConfigurationError(
                f"theta has {theta.n_categories} categories, spec has {self.n_categories}"
            )
        if theta.beta.size != self.n_x:
            raise ConfigurationError(f"theta has {theta.beta.size} x-coefficients, spec has {self.n_x}")
        want = ConstantGating if self.gating == "constant" else LogitGating
        if not isinstance(theta.gating, want):
            raise ConfigurationError(f"spec expects {self.gating} gating")
        if theta.gating.n_w != self.n_w:
            raise ConfigurationError(f"gating uses {theta.gating.n_w} covariates, spec has {self.n_w}")
        self.family.check_phi(theta.phi)

    def check_data(self, data: Dataset) -> np.ndarray:
        if data.n_x != self.n_x:
            raise ConfigurationError(f"data has {data.n_x} x-columns, spec expects {self.n_x}")
        if data.n_w != self.n_w:
            raise ConfigurationError(f"data has {data.n_w} w-columns, spec expects {self.n_w}")
        if data.n and data.v_star.max() >= self.n_categories:
            raise ConfigurationError(
                f"v_star value {int(data.v_star.max())} outside 0..{self.n_categories - 1}"
            )
        return self.family.check_y(data.y)


# ---------------------------------------------------------------------------
# Densities and likelihoods
# ---------------------------------------------------------------------------


def linear_predictor(theta: Theta, v, x=None):
    eta = theta.alpha0 + theta.alpha1 * np.asarray(v, dtype=float)
    if theta.beta.size:
        eta = eta + np.asarray(x, dtype=float) @ theta.beta
    return eta


def component_logpdf(family: ResponseFamily, theta: Theta, v: int, x_row, y: float) -> float:
    """``log f(y | alpha, beta, phi, V=v, x)`` for a single observation."""
    family = family_from_name(family)
    family.check_phi(theta.phi)
    if not 0 <= int(v) < theta.n_categories:
        raise ConfigurationError(f"category {v} outside 0..{theta.n_categories - 1}")
    y = float(family.check_y(np.atleast_1d(y))[0])
    eta = theta.alpha0 + theta.alpha1 * v
    if theta.beta.size:
        if x_row is None:
            raise ConfigurationError("theta has x-coefficients but no covariate row was given")
        eta += float(np.asarray(x_row, dtype=float) @ theta.beta)
    return float(family.logpdf(y, eta, theta.phi))


def eta_matrix(theta: Theta, n: int, x=None) -> np.ndarray:
    """Linear predictor for every row under every latent category, shape ``(n, K)``."""
    base = np.full(n, theta.alpha0)
    if theta.beta.size:
        base = base + x @ theta.beta
    return base[:, None] + theta.alpha1 * np.arange(theta.n_categories)[None, :]


def component_log_densities(spec: ModelSpec, theta: Theta, data: Dataset) -> np.ndarray:
    """``log f(y_i | V=j, x_i)`` for all rows and categories, shape ``(n, K)``."""
    y = spec.check_data(data)
    return spec.family.logpdf(y[:, None], eta_matrix(theta, data.n, data.x), theta.phi)


def _first_bad_row(a):
    bad = ~np.isfinite(a)
    return int(np.flatnonzero(bad.reshape(bad.shape[0], -1).any(axis=1))[0])


def mixture_loglik_rows(spec: ModelSpec, theta: Theta, data: Dataset) -> np.ndarray:
    """Per-row observed-data log-likelihood contributions."""
    spec.check_theta(theta)
    logf = component_log_densities(spec, theta, data)
    logq = log_gating_matrix(theta.gating, data.v_star, data.w)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        rows = logsumexp(logq + logf, axis=1) + np.log(theta.pi_star)[data.v_star]
    if not np.all(np.isfinite(rows)):
        raise NumericError("non-finite log-likelihood contribution", _first_bad_row(rows[:, None]))
    return rows


def mixture_loglik(spec: ModelSpec, theta: Theta, data: Dataset) -> float:
    """Observed-data log-likelihood of ``(y, v*)`` under the mixture representation."""
    return float(np.sum(mixture_loglik_rows(spec, theta, data)))


def membership_weights(spec: ModelSpec, theta: Theta, data: Dataset) -> np.ndarray:
    """Posterior probabilities ``P(V=j | y_i, v*_i, x_i, w_i)``; rows sum to one."""
    spec.check_theta(theta)
    logits = component_log_densities(spec, theta, data) + log_gating_matrix(
        theta.gating, data.v_star, data.w
    )
    with np.errstate(invalid="ignore"):
        logits = logits - logsumexp(logits, axis=1, keepdims=True)
    r = np.exp(logits)
    if not np.all(np.isfinite(r)):
        raise NumericError("non-finite membership weight", _first_bad_row(r))
    return r


def complete_loglik(spec: ModelSpec, theta: Theta, data: Dataset, v) -> float:
    """Log-likelihood of ``y`` with the category known to be ``v`` (no mixture)."""
    spec.family.check_phi(theta.phi)
    y = spec.check_data(data)
    v = np.asarray(v, dtype=int)
    rows = spec.family.logpdf(y, linear_predictor(theta, v, data.x), theta.phi)
    if not np.all(np.isfinite(rows)):
        raise NumericError("non-finite complete-data log-likelihood", _first_bad_row(rows[:, None]))
    return float(np.sum(rows))


# ---------------------------------------------------------------------------
# Classification <-> reclassification
# ---------------------------------------------------------------------------


def derive_reclassification(P, pi) -> Tuple[np.ndarray, ReclassificationMatrix]:
    """Observed-category probabilities and reclassification matrix from ``(P, pi)``.

    ``pi_star = P' pi`` and ``Q[k, j] = P[j, k] * pi[j] / pi_star[k]`` (Bayes).
    """
    P = P if isinstance(P, ClassificationMatrix) else ClassificationMatrix(P)
    pi = _as_probability_vector(pi, "pi")
    if pi.size != P.n_categories:
        raise ConfigurationError("pi and P disagree on the number of categories")
    joint = P.entries * pi[:, None]  # joint[j, k] = P(V=j, V*=k)
    pi_star = joint.sum(axis=0)
    if np.any(pi_star <= 0.0):
        raise DegenerateCategoryError(
            f"observed category {int(np.argmin(pi_star))} has zero probability"
        )
    q = (joint / pi_star[None, :]).T
    return _renormalized(pi_star), ReclassificationMatrix(normalize_rows(q))


def derive_classification(Q, pi_star) -> Tuple[np.ndarray, ClassificationMatrix]:
    """Inverse of :func:`derive_reclassification`: ``(pi, P)`` from ``(Q, pi_star)``."""
    Q = Q if isinstance(Q, ReclassificationMatrix) else ReclassificationMatrix(Q)
    pi_star = _as_probability_vector(pi_star, "pi_star")
    if pi_star.size != Q.n_categories:
        raise ConfigurationError("pi_star and Q disagree on the number of categories")
    joint = Q.entries * pi_star[:, None]  # joint[k, j] = P(V*=k, V=j)
    pi = joint.sum(axis=0)
    if np.any(pi <= 0.0):
        raise DegenerateCategoryError(f"true category {int(np.argmin(pi))} has zero probability")
    p = (joint / pi[None, :]).T
    return _renormalized(pi), ClassificationMatrix(normalize_rows(p))


def _renormalized(p):
    p = np.asarray(p, dtype=float)
    return p / p.sum()


def binary_classification(p01: float, p10: float) -> ClassificationMatrix:
    """Two-category classification matrix from its off-diagonal error rates."""
    return ClassificationMatrix([[1.0 - p01, p01], [p10, 1.0 - p10]])
