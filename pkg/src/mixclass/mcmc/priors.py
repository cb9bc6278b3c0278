"""Prior distributions and the prior specification consumed by the sampler."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Union

import numpy as np
from scipy import stats
from scipy.special import gammaln

from ..errors import ConfigurationError


def _positive(name, *vals):
    for v in vals:
        if not (np.all(np.isfinite(v)) and np.all(np.asarray(v) > 0)):
            raise ConfigurationError(f"{name} hyperparameters must be strictly positive, got {v}")


@dataclass(frozen=True)
class Normal:
    mean: float = 0.0
    var: float = 100.0

    def __post_init__(self):
        if not np.isfinite(self.mean):
            raise ConfigurationError("normal prior mean must be finite")
        _positive("normal prior variance", self.var)

    def logpdf(self, x):
        return -0.5 * (x - self.mean) ** 2 / self.var - 0.5 * math.log(2 * math.pi * self.var)

    def frozen(self):
        return stats.norm(self.mean, math.sqrt(self.var))

    @property
    def moments(self):
        return self.mean, self.var


@dataclass(frozen=True)
class Gamma:
    """Shape/rate parameterisation; density ``b^a x^(a-1) e^(-b x) / Gamma(a)``."""

    shape: float
    rate: float

    def __post_init__(self):
        _positive("gamma prior", self.shape, self.rate)

    def logpdf(self, x):
        if x <= 0:
            return -np.inf
        a, b = self.shape, self.rate
        return a * math.log(b) - gammaln(a) + (a - 1.0) * math.log(x) - b * x

    def frozen(self):
        return stats.gamma(self.shape, scale=1.0 / self.rate)

    @property
    def moments(self):
        return self.shape / self.rate, self.shape / self.rate**2


@dataclass(frozen=True)
class Beta:
    a: float = 1.0
    b: float = 1.0

    def __post_init__(self):
        _positive("beta prior", self.a, self.b)

    def logpdf(self, x):
        if not 0 < x < 1:
            return -np.inf
        return float(stats.beta.logpdf(x, self.a, self.b))

    def frozen(self):
        return stats.beta(self.a, self.b)


def Uniform() -> Beta:
    """Uniform prior on ``(0, 1)``."""
    return Beta(1.0, 1.0)


@dataclass(frozen=True)
class Dirichlet:
    concentration: tuple

    def __post_init__(self):
        c = tuple(float(v) for v in np.ravel(self.concentration))
        if len(c) < 2:
            raise ConfigurationError("Dirichlet prior needs at least two categories")
        _positive("Dirichlet prior", np.array(c))
        object.__setattr__(self, "concentration", c)

    @property
    def alpha(self) -> np.ndarray:
        return np.array(self.concentration)


ScalarPrior = Union[Normal, Gamma, Beta]

SCALES = ("reclassification", "classification")


def _rows(rows, k, what) -> Optional[np.ndarray]:
    if rows is None:
        return None
    out = []
    for r in rows:
        out.append((r if isinstance(r, Dirichlet) else Dirichlet(tuple(r))).alpha)
    a = np.array(out)
    if a.shape != (k, k):
        raise ConfigurationError(f"{what} needs {k} Dirichlet rows of length {k}, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class PriorSpec:
    """Priors for every free parameter of a model.

    Parameters
    ----------
    coefficients : mapping
        Prior per coefficient name (``alpha0``, ``alpha1``, ``beta_1``...).
        Missing names fall back to ``default_coefficient``.  A :class:`Gamma`
        prior restricts the coefficient to be positive.
    precision : Gamma
        Prior on ``1 / sigma^2`` (normal and Student-t scale).
    nuisance : mapping
        Priors for ``df`` and ``shape`` (:class:`Gamma`) and ``w`` (:class:`Beta`).
    pi_star, q_rows : Dirichlet
        Used on the ``"reclassification"`` scale: observed-category
        probabilities and each row of Q.
    pi, p_rows : Dirichlet
        Used on the ``"classification"`` scale, where the sampler works with
        ``(pi, P)`` and derives ``(pi_star, Q)`` from them.
    nu, gamma : Normal
        Logit-gating intercepts and slopes.
    """

    coefficients: Mapping[str, ScalarPrior] = field(default_factory=dict)
    default_coefficient: ScalarPrior = Normal(0.0, 100.0)
    precision: Gamma = Gamma(0.001, 0.001)
    nuisance: Mapping[str, ScalarPrior] = field(default_factory=dict)
    scale: str = "reclassification"
    pi_star: Optional[Dirichlet] = None
    q_rows: Optional[tuple] = None
    pi: Optional[Dirichlet] = None
    p_rows: Optional[tuple] = None
    nu: Normal = Normal(0.0, 4.0)
    gamma: Normal = Normal(0.0, 1.0)

    def __post_init__(self):
        if self.scale not in SCALES:
            raise ConfigurationError(f"prior scale must be one of {SCALES}, got {self.scale!r}")
        for name, p in dict(self.coefficients).items():
            if not isinstance(p, (Normal, Gamma)):
                raise ConfigurationError(f"coefficient {name!r} needs a Normal or Gamma prior")
        for name, p in dict(self.nuisance).items():
            if name not in ("df", "shape", "w"):
                raise ConfigurationError(f"unknown nuisance prior {name!r}")
            want = Beta if name == "w" else Gamma
            if not isinstance(p, want):
                raise ConfigurationError(f"nuisance {name!r} needs a {want.__name__} prior")
        if not isinstance(self.precision, Gamma):
            raise ConfigurationError("precision prior must be Gamma")

    def coefficient(self, name: str) -> ScalarPrior:
        return dict(self.coefficients).get(name, self.default_coefficient)

    def nuisance_prior(self, name: str) -> ScalarPrior:
        defaults = {"df": Gamma(2.0, 0.1), "shape": Gamma(1.0, 0.1), "w": Beta(1.0, 1.0)}
        return dict(self.nuisance).get(name, defaults[name])

    def pi_star_alpha(self, k: int) -> np.ndarray:
        a = np.ones(k) if self.pi_star is None else self.pi_star.alpha
        if a.size != k:
            raise ConfigurationError(f"pi_star prior has length {a.size}, expected {k}")
        return a

    def pi_alpha(self, k: int) -> np.ndarray:
        a = np.ones(k) if self.pi is None else self.pi.alpha
        if a.size != k:
            raise ConfigurationError(f"pi prior has length {a.size}, expected {k}")
        return a

    def q_alpha(self, k: int) -> np.ndarray:
        a = _rows(self.q_rows, k, "q_rows prior")
        return np.ones((k, k)) if a is None else a

    def p_alpha(self, k: int) -> np.ndarray:
        a = _rows(self.p_rows, k, "p_rows prior")
        return np.ones((k, k)) if a is None else a

    # -- serialisation ---------------------------------------------------

    def to_dict(self) -> dict:
        def enc(p):
            if isinstance(p, Normal):
                return {"dist": "normal", "mean": p.mean, "var": p.var}
            if isinstance(p, Gamma):
                return {"dist": "gamma", "shape": p.shape, "rate": p.rate}
            if isinstance(p, Beta):
                return {"dist": "beta", "a": p.a, "b": p.b}
            raise TypeError(p)

        out = {
            "coefficients": {k: enc(v) for k, v in dict(self.coefficients).items()},
            "default_coefficient": enc(self.default_coefficient),
            "precision": enc(self.precision),
            "nuisance": {k: enc(v) for k, v in dict(self.nuisance).items()},
            "scale": self.scale,
            "nu": enc(self.nu),
            "gamma": enc(self.gamma),
        }
        for name in ("pi_star", "pi"):
            val = getattr(self, name)
            if val is not None:
                out[name] = list(val.concentration)
        for name in ("q_rows", "p_rows"):
            val = getattr(self, name)
            if val is not None:
                out[name] = [list(r.concentration if isinstance(r, Dirichlet) else r) for r in val]
        return out

    @classmethod
    def from_dict(cls, d: Mapping) -> "PriorSpec":
        d = dict(d or {})

        def dec(p, where):
            if isinstance(p, (Normal, Gamma, Beta)):
                return p
            if not isinstance(p, Mapping) or "dist" not in p:
                raise ConfigurationError(f"{where}: expected a mapping with a 'dist' key")
            kind = str(p["dist"]).lower()
            args = {k: float(v) for k, v in p.items() if k != "dist"}
            try:
                if kind == "normal":
                    return Normal(**args)
                if kind == "gamma":
                    return Gamma(**args)
                if kind == "beta":
                    return Beta(**args)
                if kind == "uniform":
                    return Uniform()
            except TypeError as exc:
                raise ConfigurationError(f"{where}: {exc}") from None
            raise ConfigurationError(f"{where}: unknown distribution {kind!r}")

        known = {
            "coefficients", "default_coefficient", "precision", "nuisance", "scale",
            "pi_star", "q_rows", "pi", "p_rows", "nu", "gamma",
        }
        extra = set(d) - known
        if extra:
            raise ConfigurationError(f"priors: unknown field(s) {sorted(extra)}")
        kw = {}
        if "coefficients" in d:
            kw["coefficients"] = {k: dec(v, f"priors.coefficients.{k}") for k, v in d["coefficients"].items()}
        if "nuisance" in d:
            kw["nuisance"] = {k: dec(v, f"priors.nuisance.{k}") for k, v in d["nuisance"].items()}
        for name in ("default_coefficient", "precision", "nu", "gamma"):
            if name in d:
                kw[name] = dec(d[name], f"priors.{name}")
        if "scale" in d:
            kw["scale"] = d["scale"]
        for name in ("pi_star", "pi"):
            if d.get(name) is not None:
                kw[name] = Dirichlet(tuple(d[name]))
        for name in ("q_rows", "p_rows"):
            if d.get(name) is not None:
                kw[name] = tuple(tuple(float(v) for v in r) for r in d[name])
        return cls(**kw)


def nuisance_log_prior(prior: PriorSpec, name: str, u: float) -> float:
    """Log prior of a nuisance parameter in its unconstrained coordinate ``u``.

    ``sigma`` and positive nuisances are sampled as ``u = log(value)`` and
    ``w`` as ``u = logit(w)``; the Jacobian of the map is included.
    """
    if name == "sigma":
        tau = math.exp(-2.0 * u)
        return prior.precision.logpdf(tau) + math.log(2.0) - 2.0 * u
    if name == "w":
        w = 1.0 / (1.0 + math.exp(-u))
        if not 0.0 < w < 1.0:
            return -np.inf
        return prior.nuisance_prior("w").logpdf(w) + math.log(w) + math.log1p(-w)
    x = math.exp(u)
    return prior.nuisance_prior(name).logpdf(x) + u
