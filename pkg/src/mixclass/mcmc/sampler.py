"""Metropolis-within-Gibbs sampling of the misclassification mixture.

The latent true category ``V_i`` is sampled explicitly.  Given ``V`` the
model splits into independent pieces:

* regression coefficients and nuisance parameters of an ordinary GLM on
  ``(y, V, x)``.  Normal responses get a Gaussian block draw for the
  coefficients and a conjugate draw for the precision; every other family
  gets scalar random-walk Metropolis steps.
* the joint distribution of ``(V*, V)``.  On the reclassification scale this
  is ``pi_star`` and the rows of Q, each with a conjugate Dirichlet draw.  On
  the classification scale it is ``pi`` and the rows of P, and ``(pi_star, Q)``
  are derived from them.  Logit gating uses random-walk Metropolis.

Random-walk step sizes adapt towards a fixed acceptance rate during burn-in
and are frozen afterwards.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
from scipy import linalg
from scipy.special import gammaln, logsumexp

from ..em import EmConfig, em_fit, glm_fit
from ..errors import ConfigurationError, MixclassError
from ..model import (
    ConstantGating,
    Dataset,
    Kind,
    LogitGating,
    ModelSpec,
    ReclassificationMatrix,
    log_gating_matrix,
)
from .diagnostics import effective_sample_size, split_rhat
from .priors import Gamma, Normal, PriorSpec, nuisance_log_prior

log = logging.getLogger(__name__)

ARMS = ("naive", "true", "known_q", "mixture")
SCHEMA_VERSION = 1


@dataclass(frozen=True)
class McmcConfig:
    n_chains: int = 3
    burn_in: int = 15000
    thin: int = 10
    n_kept: int = 5000
    seed: int = 0
    sign_constraint: str = "positive"
    n_threads: int = 1
    target_accept: float = 0.44
    adapt_interval: int = 50
    rhat_threshold: float = 1.1
    init: str = "naive"

    def __post_init__(self):
        for name in ("n_chains", "thin", "n_kept", "n_threads", "adapt_interval"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be at least 1")
        if int(self.burn_in) < 0:
            raise ConfigurationError("burn_in must be non-negative")
        if self.sign_constraint not in ("positive", "negative", "none"):
            raise ConfigurationError("sign_constraint must be 'positive', 'negative' or 'none'")
        if not 0 < self.target_accept < 1:
            raise ConfigurationError("target_accept must lie in (0, 1)")
        if self.init not in ("naive", "em"):
            raise ConfigurationError("init must be 'naive' or 'em'")

    @property
    def n_iter(self) -> int:
        return int(self.burn_in) + int(self.thin) * int(self.n_kept)


# ---------------------------------------------------------------------------
# Posterior sample and summaries
# ---------------------------------------------------------------------------


@dataclass
class PosteriorSample:
    """Kept draws, one ``(n_chains, n_kept)`` array per parameter."""

    draws: Dict[str, np.ndarray]
    arm: str = "mixture"
    monitored: Sequence[str] = ()
    acceptance: Dict[str, float] = field(default_factory=dict)
    rhat_threshold: float = 1.1
    seconds: float = 0.0
    ess: Dict[str, float] = field(init=False)
    rhat: Dict[str, float] = field(init=False)

    def __post_init__(self):
        self.draws = {k: np.atleast_2d(np.asarray(v, dtype=float)) for k, v in self.draws.items()}
        self.ess = {k: effective_sample_size(v) for k, v in self.draws.items()}
        self.rhat = {k: split_rhat(v) for k, v in self.draws.items()}
        if not self.monitored:
            self.monitored = tuple(self.draws)

    @property
    def n_chains(self) -> int:
        return next(iter(self.draws.values())).shape[0]

    @property
    def n_kept(self) -> int:
        return next(iter(self.draws.values())).shape[1]

    @property
    def flagged(self) -> List[str]:
        """Monitored parameters whose R-hat exceeds the threshold."""
        return [k for k in self.monitored if self.rhat.get(k, np.nan) > self.rhat_threshold]

    @property
    def converged(self) -> bool:
        return not self.flagged

    def flat(self, name: str) -> np.ndarray:
        return self.draws[name].reshape(-1)

    def summary_dict(self, level: float = 0.95) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "arm": self.arm,
            "level": level,
            "n_chains": self.n_chains,
            "n_kept": self.n_kept,
            "converged": self.converged,
            "flagged": self.flagged,
            "acceptance": self.acceptance,
            "seconds": self.seconds,
            "parameters": summarize(self, level),
        }

    def to_csv(self, path) -> None:
        names = list(self.draws)
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["chain", "draw"] + names)
            for c in range(self.n_chains):
                block = np.column_stack([self.draws[k][c] for k in names])
                for i, row in enumerate(block):
                    wr.writerow([c, i] + [repr(float(v)) for v in row])

    def to_json(self, path, level: float = 0.95) -> None:
        with open(path, "w") as fh:
            json.dump(_jsonable(self.summary_dict(level)), fh, indent=2)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return None if not np.isfinite(obj) else float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def summarize(sample: PosteriorSample, level: float = 0.95) -> Dict[str, dict]:
    """Posterior mean, sd, equal-tailed interval, ESS and R-hat per parameter.

    Interval bounds are the ``(1-level)/2`` and ``(1+level)/2`` empirical
    quantiles of the pooled draws with linear interpolation between order
    statistics.
    """
    if not 0 < level < 1:
        raise ConfigurationError(f"level must lie in (0, 1), got {level}")
    lo_q, hi_q = (1.0 - level) / 2.0, (1.0 + level) / 2.0
    out = {}
    for name, d in sample.draws.items():
        flat = d.reshape(-1)
        lo, hi = np.quantile(flat, [lo_q, hi_q], method="linear")
        out[name] = {
            "mean": float(flat.mean()),
            "sd": float(flat.std(ddof=1)) if flat.size > 1 else 0.0,
            "lo": float(lo),
            "hi": float(hi),
            "ess": sample.ess[name],
            "rhat": sample.rhat[name],
        }
    return out


# ---------------------------------------------------------------------------
# Complete-data pieces
# ---------------------------------------------------------------------------


def _latent_kernel(family, y, eta, phi):
    """``log f(y | eta)`` up to terms that do not depend on ``eta``."""
    k = family.kind
    if k is Kind.NORMAL:
        z = (y - eta) / phi["sigma"]
        return -0.5 * z * z
    if k is Kind.STUDENT_T:
        z = (y - eta) / phi["sigma"]
        return -0.5 * (phi["df"] + 1.0) * np.log1p(z * z / phi["df"])
    if k is Kind.POISSON:
        return y * eta - np.exp(eta)
    if k is Kind.ZIP:
        w = phi["w"]
        mu = np.exp(eta) / (1.0 - w)
        with np.errstate(divide="ignore"):
            zero = np.log(w + (1.0 - w) * np.exp(-mu))
        return np.where(y == 0, zero, y * np.log(mu) - mu)
    a = phi["shape"]
    return -a * eta - a * y * np.exp(-eta)


def _lse_rows(a: np.ndarray) -> np.ndarray:
    """Row-wise log-sum-exp over the last axis; rows of all ``-inf`` give ``-inf``."""
    m = a.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return (m + np.log(np.exp(a - m).sum(axis=-1, keepdims=True)))[..., 0]


def draw_categorical(logits: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per row with probabilities ``softmax(logits)``."""
    if logits.shape[0] == 0:
        return np.zeros(0, dtype=int)
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    cum = np.cumsum(p, axis=1)
    u = rng.random(logits.shape[0]) * cum[:, -1]
    return np.minimum((cum < u[:, None]).sum(axis=1), logits.shape[1] - 1)


def latent_probabilities(spec: ModelSpec, theta, data: Dataset) -> np.ndarray:
    """Conditional probabilities ``P(V_i = j | y_i, v*_i, x_i, w_i, theta)`` used by the latent draw."""
    spec.check_theta(theta)
    y = spec.check_data(data)
    base = np.full(data.n, theta.alpha0)
    if theta.beta.size:
        base = base + data.x @ theta.beta
    eta = base[:, None] + theta.alpha1 * np.arange(spec.n_categories)
    logits = _latent_kernel(spec.family, y[:, None], eta, theta.phi)
    logits = logits + log_gating_matrix(theta.gating, data.v_star, data.w)
    return np.exp(logits - logsumexp(logits, axis=1, keepdims=True))


class _Complete:
    """Log-likelihood of ``y`` given the current latent categories."""

    def __init__(self, family, y, x, k):
        self.family = family
        self.y = y
        self.x = x
        self.k = k
        self.fast = x is None and family.kind is not Kind.STUDENT_T
        if family.kind is Kind.GAMMA:
            self.logy = np.log(y)

    def set_v(self, v):
        self.v = v
        n = self.y.size
        if self.fast:
            k = self.k
            self.n_j = np.bincount(v, minlength=k).astype(float)
            self.s_j = np.bincount(v, weights=self.y, minlength=k)
            if self.family.kind is Kind.ZIP:
                self.n0_j = np.bincount(v[self.y == 0], minlength=k).astype(float)
            if self.family.kind is Kind.GAMMA:
                self.l_j = np.bincount(v, weights=self.logy, minlength=k)
        cols = [np.ones(n), v.astype(float)]
        if self.x is not None:
            cols.extend(self.x.T)
        self.Z = np.column_stack(cols)

    def loglik(self, b, phi) -> float:
        fam = self.family.kind
        if self.fast:
            eta = b[0] + b[1] * np.arange(self.k)
            if fam is Kind.NORMAL:
                r = self.y - self.Z @ b
                s = phi["sigma"]
                return float(-0.5 * np.dot(r, r) / s**2 - self.y.size * math.log(s))
            if fam is Kind.POISSON:
                return float(np.dot(self.s_j, eta) - np.dot(self.n_j, np.exp(eta)))
            if fam is Kind.ZIP:
                w = phi["w"]
                mu = np.exp(eta) / (1.0 - w)
                npos = self.n_j - self.n0_j
                with np.errstate(divide="ignore"):
                    zero = np.log(w + (1.0 - w) * np.exp(-mu))
                return float(
                    np.dot(self.n0_j, zero)
                    + npos.sum() * math.log1p(-w)
                    + np.dot(self.s_j, np.log(mu))
                    - np.dot(npos, mu)
                )
            a = phi["shape"]
            return float(
                np.dot(self.n_j, a * math.log(a) - gammaln(a) - a * eta)
                + (a - 1.0) * self.l_j.sum()
                - a * np.dot(self.s_j, np.exp(-eta))
            )
        with np.errstate(all="ignore"):
            val = float(np.sum(self.family.logpdf(self.y, self.Z @ b, phi)))
        return val if np.isfinite(val) else -np.inf


# ---------------------------------------------------------------------------
# One chain
# ---------------------------------------------------------------------------


class _Adapter:
    """Per-scalar random-walk step sizes tuned during burn-in."""

    def __init__(self, steps: Dict[str, float], target: float, interval: int):
        self.log_step = {k: math.log(max(v, 1e-8)) for k, v in steps.items()}
        self.target = target
        self.interval = interval
        self.acc = dict.fromkeys(steps, 0)
        self.tries = dict.fromkeys(steps, 0)
        self.total_acc = dict.fromkeys(steps, 0)
        self.total_tries = dict.fromkeys(steps, 0)
        self.batch = 0

    def step(self, name):
        return math.exp(self.log_step[name])

    def record(self, name, accepted: bool):
        self.acc[name] += accepted
        self.tries[name] += 1

    def end_iteration(self, it: int, adapting: bool):
        if (it + 1) % self.interval:
            return
        self.batch += 1
        delta = min(0.3, 1.0 / math.sqrt(self.batch))
        for k in self.log_step:
            if self.tries[k]:
                if adapting:
                    rate = self.acc[k] / self.tries[k]
                    self.log_step[k] += delta if rate > self.target else -delta
                else:
                    self.total_acc[k] += self.acc[k]
                    self.total_tries[k] += self.tries[k]
            self.acc[k] = 0
            self.tries[k] = 0

    def rates(self):
        return {k: self.total_acc[k] / self.total_tries[k] for k in self.log_step if self.total_tries[k]}


class _Chain:
    def __init__(self, spec, data, prior, cfg, arm, fixed_v, known_q, rng, init):
        self.spec = spec
        self.family = spec.family
        self.k = k = spec.n_categories
        self.prior = prior
        self.cfg = cfg
        self.arm = arm
        self.rng = rng
        self.y = np.asarray(data.y, dtype=float)
        self.vs = data.v_star
        self.x = data.x
        self.w = data.w
        self.n = data.n
        self.names = list(spec.coefficient_names)
        self.latent = arm in ("mixture", "known_q")
        self.sample_gating = arm == "mixture"
        self.scale = prior.scale
        self.logit = spec.gating == "logit"
        self.complete = _Complete(self.family, self.y, self.x, k)
        # non-normal latent arms update regression parameters with V summed out
        self.collapsed = self.latent and self.family.kind is not Kind.NORMAL
        if self.collapsed:
            self._setup_marginal()
        self.counts_vs = np.bincount(self.vs, minlength=k).astype(float)

        coef_priors = [prior.coefficient(nm) for nm in self.names]
        self.coef_priors = coef_priors
        self.gamma_idx = [i for i, p in enumerate(coef_priors) if isinstance(p, Gamma)]
        self.m0 = np.array([p.mean if isinstance(p, Normal) else 0.0 for p in coef_priors])
        self.prec0 = np.array([1.0 / p.var if isinstance(p, Normal) else 0.0 for p in coef_priors])
        self.surrogate_m = self.m0.copy()
        self.surrogate_prec = self.prec0.copy()
        for i in self.gamma_idx:
            mean, var = coef_priors[i].moments
            self.surrogate_m[i], self.surrogate_prec[i] = mean, 1.0 / var

        self._init_state(init, fixed_v, known_q)

        steps = {}
        if self.family.kind is not Kind.NORMAL:
            for i in range(len(self.names)):
                steps[f"coef_{i}"] = 1.0
        for nm in self.nuis_names:
            steps[nm] = init["nuis_step"]
        if self.sample_gating and self.logit:
            for key in self._logit_keys():
                steps[key] = 0.5 if self.n else 1.0
        self.adapt = _Adapter(steps, cfg.target_accept, cfg.adapt_interval)
        self.block_acc = [0, 0]
        if self.family.kind is not Kind.NORMAL:
            self.set_directions(np.asarray(init["coef_cov"], dtype=float))

    # -- state -----------------------------------------------------------

    def _init_state(self, init, fixed_v, known_q):
        self.b = np.array(init["b"], dtype=float)
        self.phi = dict(init["phi"])
        fam = self.family.kind
        self.nuis_names = [nm for nm in self.family.nuisance_names if not (fam is Kind.NORMAL and nm == "sigma")]
        self.u = {}
        for nm in self.nuis_names:
            v = self.phi[nm]
            self.u[nm] = math.log(v / (1.0 - v)) if nm == "w" else math.log(v)
        self.pi_star = np.array(init["pi_star"], dtype=float)
        if known_q is not None:
            self.q = np.array(known_q, dtype=float)
        else:
            self.q = np.array(init["q"], dtype=float)
        if self.scale == "classification" and self.sample_gating and not self.logit:
            joint = self.q * self.pi_star[:, None]
            self.pi = joint.sum(axis=0)
            self.p = (joint / self.pi[None, :]).T
        if self.logit:
            lg = LogitGating.from_matrix(np.clip(self.q, 1e-6, None) / np.clip(self.q, 1e-6, None).sum(1, keepdims=True), self.spec.n_w)
            self.nu = np.array(lg.nu)
            self.gam = np.array(lg.gamma)
        if fixed_v is not None:
            self.v = np.asarray(fixed_v, dtype=int)
        else:
            self.v = self.vs.copy()
        self.complete.set_v(self.v)
        self.fix_sign()

    def fix_sign(self):
        sign = self.cfg.sign_constraint
        if self._violates(self.b[1]) or (1 in self.gamma_idx and self.b[1] <= 0):
            mag = abs(self.b[1]) if self.b[1] != 0 else 1e-3
            self.b[1] = -mag if sign == "negative" else mag

    def _violates(self, a1):
        sign = self.cfg.sign_constraint
        return (sign == "positive" and a1 <= 0) or (sign == "negative" and a1 >= 0)

    def _logit_keys(self):
        k, m = self.k, self.spec.n_w
        keys = []
        for r in range(k):
            for j in range(k - 1):
                keys.append(f"nu_{r}_{j}")
                keys.extend(f"gamma_{r}_{j}_{c + 1}" for c in range(m))
        return keys

    def _setup_marginal(self):
        """Group identical ``(y, v*)`` rows for discrete responses without covariates."""
        self.g_x = self.g_w = None
        if self.family.is_discrete and self.x is None and self.w is None and self.n:
            keys, counts = np.unique(np.column_stack([self.y, self.vs]), axis=0, return_counts=True)
            self.g_y, self.g_vs, self.g_count = keys[:, 0], keys[:, 1].astype(int), counts.astype(float)
        else:
            self.g_y, self.g_vs, self.g_count = self.y, self.vs, np.ones(self.n)
            self.g_x, self.g_w = self.x, self.w

    def marginal_loglik(self, b, phi, logq) -> float:
        base = b[0] + (self.g_x @ b[2:] if self.g_x is not None else 0.0)
        eta = np.asarray(base)[..., None] + b[1] * np.arange(self.k)
        with np.errstate(all="ignore"):
            lp = self.family.logpdf(self.g_y[:, None], eta, phi) + logq
            val = float(np.dot(self.g_count, _lse_rows(lp)))
        return val if np.isfinite(val) else -np.inf

    def _regression_target(self):
        """Log-likelihood used by the random-walk steps, as ``f(b, phi)``."""
        if self.collapsed:
            if self.logit:
                logq = log_gating_matrix(LogitGating(self.nu, self.gam), self.g_vs, self.g_w)
            else:
                with np.errstate(divide="ignore"):
                    logq = np.log(self.q)[self.g_vs]
            return lambda b, phi: self.marginal_loglik(b, phi, logq)
        return self.complete.loglik

    def log_q_rows(self):
        if self.logit:
            return log_gating_matrix(LogitGating(self.nu, self.gam), self.vs, self.w)
        with np.errstate(divide="ignore"):
            return np.log(self.q)[self.vs]

    # -- updates ---------------------------------------------------------

    def update_latent(self):
        base = self.b[0] + (self.x @ self.b[2:] if self.x is not None else 0.0)
        eta = np.asarray(base)[..., None] + self.b[1] * np.arange(self.k)
        if eta.ndim == 1:
            eta = np.broadcast_to(eta, (self.n, self.k))
        logits = _latent_kernel(self.family, self.y[:, None], eta, self.phi) + self.log_q_rows()
        self.v = draw_categorical(logits, self.rng)
        self.complete.set_v(self.v)

    def update_normal_block(self):
        z = self.complete.Z
        tau = 1.0 / self.phi["sigma"] ** 2
        ztz = tau * (z.T @ z)
        zty = tau * (z.T @ self.y)
        lam = ztz + np.diag(self.prec0)
        h = zty + self.prec0 * self.m0
        surrogate = False
        try:
            chol = np.linalg.cholesky(lam)
            d = np.diag(chol)
            if d.min() ** 2 < 1e-10 * d.max() ** 2:
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            surrogate = True
            lam = ztz + np.diag(self.surrogate_prec)
            h = zty + self.surrogate_prec * self.surrogate_m
            chol = np.linalg.cholesky(lam)
        mean = linalg.cho_solve((chol, True), h, check_finite=False)
        prop = mean + linalg.solve_triangular(chol.T, self.rng.standard_normal(mean.size), lower=False, check_finite=False)
        accept = not self._violates(prop[1]) if len(prop) > 1 else True
        if accept and self.gamma_idx:
            logr = 0.0
            for i in self.gamma_idx:
                g = self.coef_priors[i]
                logr += g.logpdf(prop[i]) - g.logpdf(self.b[i])
                if surrogate:
                    sm, sp = self.surrogate_m[i], self.surrogate_prec[i]
                    logr -= -0.5 * sp * ((prop[i] - sm) ** 2 - (self.b[i] - sm) ** 2)
            accept = np.log(self.rng.random()) < logr
        self.block_acc[1] += 1
        if accept:
            self.b = prop
            self.block_acc[0] += 1
        # conjugate precision
        r = self.y - z @ self.b
        shape = self.prior.precision.shape + 0.5 * self.n
        rate = self.prior.precision.rate + 0.5 * float(np.dot(r, r))
        tau = self.rng.gamma(shape, 1.0 / rate)
        self.phi["sigma"] = float(1.0 / math.sqrt(max(tau, 1e-300)))

    def set_directions(self, cov):
        """Random-walk axes: eigenvectors of ``cov``, steps ``2.4 sqrt(eigenvalue)``."""
        ev, vec = np.linalg.eigh(0.5 * (cov + cov.T))
        ev = np.maximum(ev, 1e-12 * max(ev.max(), 1e-300))
        self.dirs = vec
        for i in range(vec.shape[1]):
            self.adapt.log_step[f"coef_{i}"] = math.log(2.4 * math.sqrt(ev[i]))

    def _coef_log_prior_all(self, b):
        return sum(p.logpdf(v) for p, v in zip(self.coef_priors, b))

    def update_coefficients_rw(self, target):
        """Scalar Metropolis steps along each axis of ``self.dirs``."""
        cur = target(self.b, self.phi)
        lp_cur = self._coef_log_prior_all(self.b)
        for i in range(self.dirs.shape[1]):
            nm = f"coef_{i}"
            prop = self.b + self.adapt.step(nm) * self.rng.standard_normal() * self.dirs[:, i]
            if self._violates(prop[1]):
                self.adapt.record(nm, False)
                continue
            lp_new = self._coef_log_prior_all(prop)
            if not np.isfinite(lp_new):
                self.adapt.record(nm, False)
                continue
            new = target(prop, self.phi)
            ok = np.log(self.rng.random()) < new - cur + lp_new - lp_cur
            self.adapt.record(nm, ok)
            if ok:
                self.b, cur, lp_cur = prop, new, lp_new

    def update_nuisance(self, target):
        if not self.nuis_names:
            return
        cur = target(self.b, self.phi)
        for nm in self.nuis_names:
            u_new = self.u[nm] + self.adapt.step(nm) * self.rng.standard_normal()
            phi_new = dict(self.phi)
            if nm == "w":
                phi_new[nm] = 1.0 / (1.0 + math.exp(-u_new))
                if not 0.0 < phi_new[nm] < 1.0:
                    self.adapt.record(nm, False)
                    continue
            else:
                if abs(u_new) > 700:
                    self.adapt.record(nm, False)
                    continue
                phi_new[nm] = math.exp(u_new)
            new = target(self.b, phi_new)
            logr = new - cur + nuisance_log_prior(self.prior, nm, u_new) - nuisance_log_prior(self.prior, nm, self.u[nm])
            ok = np.log(self.rng.random()) < logr
            self.adapt.record(nm, ok)
            if ok:
                self.u[nm], self.phi, cur = u_new, phi_new, new

    def _dirichlet_rows(self, alpha):
        g = self.rng.standard_gamma(alpha)
        g = np.maximum(g, 1e-300)
        return g / g.sum(axis=-1, keepdims=True)

    def update_gating(self):
        k = self.k
        if self.sample_gating and not self.logit:
            c = np.bincount(self.vs * k + self.v, minlength=k * k).reshape(k, k).astype(float)
            if self.scale == "classification":
                self.pi = self._dirichlet_rows(self.prior.pi_alpha(k) + c.sum(axis=0))
                self.p = self._dirichlet_rows(self.prior.p_alpha(k) + c.T)
                joint = self.p * self.pi[:, None]
                self.pi_star = joint.sum(axis=0)
                self.q = (joint / self.pi_star[None, :]).T
                return
            self.q = self._dirichlet_rows(self.prior.q_alpha(k) + c)
        elif self.sample_gating and self.logit:
            self.update_logit()
        self.pi_star = self._dirichlet_rows(self.prior.pi_star_alpha(k) + self.counts_vs)

    def update_logit(self):
        k, m = self.k, self.spec.n_w
        for r in range(k):
            sel = self.vs == r
            v_r = self.v[sel]
            zw = np.ones((int(sel.sum()), 1))
            if m:
                zw = np.column_stack([zw, self.w[sel]])
            th = np.concatenate([self.nu[r][:, None], self.gam[r]], axis=1)

            def ll(theta):
                lp = np.concatenate([zw @ theta.T, np.zeros((zw.shape[0], 1))], axis=1)
                lp = lp - _lse_rows(lp)[:, None]
                return float(lp[np.arange(v_r.size), v_r].sum())

            def lprior(theta):
                return float(
                    np.sum(self.prior.nu.logpdf(theta[:, 0])) + np.sum(self.prior.gamma.logpdf(theta[:, 1:]))
                )

            cur = ll(th) + lprior(th)
            for j in range(k - 1):
                for c in range(1 + m):
                    key = f"nu_{r}_{j}" if c == 0 else f"gamma_{r}_{j}_{c}"
                    prop = th.copy()
                    prop[j, c] += self.adapt.step(key) * self.rng.standard_normal()
                    new = ll(prop) + lprior(prop)
                    ok = np.log(self.rng.random()) < new - cur
                    self.adapt.record(key, ok)
                    if ok:
                        th, cur = prop, new
            self.nu[r], self.gam[r] = th[:, 0], th[:, 1:]

    # -- driver ----------------------------------------------------------

    def param_names(self):
        k = self.k
        names = list(self.names)
        names += list(self.family.nuisance_names)
        names += [f"pi_star_{j}" for j in range(k)]
        if self.sample_gating:
            if self.logit:
                names += self._logit_keys()
            else:
                names += [f"q_{r}_{j}" for r in range(k) for j in range(k)]
                if self.scale == "classification":
                    names += [f"pi_{j}" for j in range(k)]
                    names += [f"p_{r}_{j}" for r in range(k) for j in range(k)]
        return names

    def values(self):
        vals = list(self.b)
        vals += [self.phi[nm] for nm in self.family.nuisance_names]
        vals += list(self.pi_star)
        if self.sample_gating:
            if self.logit:
                for r in range(self.k):
                    for j in range(self.k - 1):
                        vals.append(self.nu[r, j])
                        vals.extend(self.gam[r, j])
            else:
                vals += list(self.q.reshape(-1))
                if self.scale == "classification":
                    vals += list(self.pi) + list(self.p.reshape(-1))
        return vals

    def run(self):
        cfg = self.cfg
        out = np.empty((int(cfg.n_kept), len(self.param_names())))
        kept = 0
        rw_coef = self.family.kind is not Kind.NORMAL
        half = int(cfg.burn_in) // 2
        trace = np.empty((half, len(self.b))) if rw_coef else None
        for it in range(cfg.n_iter):
            if rw_coef and it == half and half >= 200:
                tail = trace[half // 2:]
                if np.all(np.ptp(tail, axis=0) > 0):
                    self.set_directions(np.cov(tail, rowvar=False))
            if self.collapsed:
                # (b, phi) with V summed out, then V from its full conditional
                target = self._regression_target()
                self.update_coefficients_rw(target)
                self.update_nuisance(target)
                self.update_latent()
            else:
                if self.latent:
                    self.update_latent()
                if self.family.kind is Kind.NORMAL:
                    self.update_normal_block()
                else:
                    self.update_coefficients_rw(self.complete.loglik)
                self.update_nuisance(self.complete.loglik)
            self.update_gating()
            self.adapt.end_iteration(it, it < cfg.burn_in)
            if rw_coef and it < half:
                trace[it] = self.b
            if it >= cfg.burn_in and (it - cfg.burn_in + 1) % cfg.thin == 0:
                out[kept] = self.values()
                kept += 1
        rates = self.adapt.rates()
        if self.family.kind is Kind.NORMAL and self.block_acc[1]:
            rates["coefficients"] = self.block_acc[0] / self.block_acc[1]
        return out, rates


# ---------------------------------------------------------------------------
# Initial values
# ---------------------------------------------------------------------------


def _prior_draw(prior: PriorSpec, spec: ModelSpec, rng):
    b = []
    for nm in spec.coefficient_names:
        p = prior.coefficient(nm)
        if isinstance(p, Normal):
            b.append(rng.normal(p.mean, math.sqrt(p.var)))
        else:
            b.append(max(rng.gamma(p.shape, 1.0 / p.rate), p.shape / p.rate, 1e-8))
    phi = {}
    for nm in spec.family.nuisance_names:
        if nm == "sigma":
            g = prior.precision
            tau = rng.gamma(g.shape, 1.0 / g.rate)
            if not 1e-8 < tau < 1e8:
                tau = 1.0
            phi[nm] = 1.0 / math.sqrt(tau)
        elif nm == "w":
            bp = prior.nuisance_prior("w")
            phi[nm] = float(np.clip(rng.beta(bp.a, bp.b), 1e-6, 1 - 1e-6))
        else:
            g = prior.nuisance_prior(nm)
            phi[nm] = float(np.clip(rng.gamma(g.shape, 1.0 / g.rate), 1e-3, 1e3))
    return np.array(b), phi


def _initial_values(spec, data, prior, cfg, arm, fixed_v, known_q, rng):
    k = spec.n_categories
    if data.n == 0:
        b, phi = _prior_draw(prior, spec, rng)
        var = [prior.coefficient(nm).moments[1] for nm in spec.coefficient_names]
        q = rng.dirichlet(np.ones(k), size=k)
        return {
            "b": b, "phi": phi, "coef_cov": np.diag(var), "nuis_step": 1.0,
            "pi_star": np.full(k, 1.0 / k), "q": q,
        }
    v0 = fixed_v if fixed_v is not None else data.v_star
    z2 = np.column_stack([np.ones(data.n), v0] + ([data.x] if data.x is not None else []))
    b0, phi0, se, cov = glm_fit(spec.family, data.y, z2, return_cov=True)
    if not (np.all(np.isfinite(cov)) and np.all(np.isfinite(se)) and np.all(se > 0)):
        se = np.where(np.isfinite(se) & (se > 0), se, 0.1)
        cov = np.diag(se**2)
    q0 = 0.8 * np.eye(k) + 0.2 / k
    if cfg.init == "em" and arm == "mixture":
        try:
            fit = em_fit(spec, data, EmConfig(n_restarts=2, max_iter=500, sign_constraint=cfg.sign_constraint, seed=int(rng.integers(2**31))))
            b0 = fit.theta_hat.coefficients if k > 1 else b0
            phi0 = dict(fit.theta_hat.phi)
            if isinstance(fit.theta_hat.gating, ConstantGating):
                q0 = np.array(fit.theta_hat.gating.q.entries)
        except MixclassError as exc:
            best = getattr(exc, "best", None)
            if best is not None:
                b0, phi0 = best.theta_hat.coefficients, dict(best.theta_hat.phi)
            log.info("EM initialisation failed: %s", exc)
    b = b0 + se * rng.standard_normal(b0.size)
    phi = dict(phi0)
    for nm in list(phi):
        if nm == "w":
            phi[nm] = float(np.clip(phi[nm], 0.01, 0.9))
        else:
            phi[nm] = float(phi[nm] * math.exp(0.1 * rng.standard_normal()))
    q = 0.7 * q0 + 0.3 * rng.dirichlet(np.ones(k), size=k)
    pi_star = np.bincount(data.v_star, minlength=k) + 1.0
    return {
        "b": b, "phi": phi, "coef_cov": cov, "nuis_step": 0.1,
        "pi_star": pi_star / pi_star.sum(), "q": q / q.sum(axis=1, keepdims=True),
    }


# ---------------------------------------------------------------------------
# Public entry points
# ---------------------------------------------------------------------------


def _check_inputs(spec, data, prior, arm, fixed_v, known_q):
    if arm not in ARMS:
        raise ConfigurationError(f"unknown arm {arm!r}; expected one of {ARMS}")
    if spec.n_categories < 2:
        raise ConfigurationError("the sampler needs at least two categories")
    spec.check_data(data)
    k = spec.n_categories
    if arm == "true":
        if fixed_v is None:
            raise ConfigurationError("the true arm needs the true categories (true_v)")
        fixed_v = np.asarray(fixed_v)
        if fixed_v.shape != (data.n,) or np.any((fixed_v < 0) | (fixed_v >= k)):
            raise ConfigurationError("true_v must hold one category in 0..K-1 per row")
    if arm == "known_q":
        if known_q is None:
            raise ConfigurationError("the known_q arm needs a reclassification matrix (known_q)")
        if spec.gating != "constant":
            raise ConfigurationError("the known_q arm needs constant gating")
        q = known_q.entries if isinstance(known_q, ReclassificationMatrix) else np.asarray(known_q, dtype=float)
        if q.shape != (k, k):
            raise ConfigurationError(f"known_q must be {k} x {k}")
    if prior.scale == "classification" and spec.gating == "logit":
        raise ConfigurationError("classification-scale priors need constant gating")
    # probe the priors now so that mistakes surface before any sampling
    prior.pi_star_alpha(k)
    prior.q_alpha(k)
    prior.pi_alpha(k)
    prior.p_alpha(k)


def mcmc_fit(
    spec: ModelSpec,
    data: Dataset,
    priors: PriorSpec = PriorSpec(),
    cfg: McmcConfig = McmcConfig(),
    arm: str = "mixture",
    true_v=None,
    known_q=None,
) -> PosteriorSample:
    """Sample the posterior of one model arm.

    ``arm`` selects the model: ``"mixture"`` (latent V, gating sampled),
    ``"known_q"`` (latent V, gating fixed at ``known_q``), ``"naive"``
    (V taken to be V*) or ``"true"`` (V taken from ``true_v``).

    Chains use independent streams spawned from ``cfg.seed`` and run on up to
    ``cfg.n_threads`` threads; results do not depend on the thread count.
    The returned sample is flagged (``converged`` False) when a monitored
    parameter has R-hat above ``cfg.rhat_threshold``.
    """
    _check_inputs(spec, data, priors, arm, true_v, known_q)
    if isinstance(known_q, ReclassificationMatrix):
        known_q = known_q.entries
    fixed_v = None
    if arm == "naive":
        fixed_v = data.v_star
    elif arm == "true":
        fixed_v = np.asarray(true_v, dtype=int)
    kq = None
    if arm == "known_q":
        kq = np.asarray(known_q, dtype=float)
        kq = kq / kq.sum(axis=1, keepdims=True)
    seeds = np.random.SeedSequence(int(cfg.seed)).spawn(int(cfg.n_chains))

    def one_chain(ss):
        rng = np.random.default_rng(ss)
        init = _initial_values(spec, data, priors, cfg, arm, fixed_v, kq, rng)
        chain = _Chain(spec, data, priors, cfg, arm, fixed_v, kq, rng, init)
        out, rates = chain.run()
        return chain.param_names(), out, rates

    t0 = time.perf_counter()
    if cfg.n_threads > 1 and cfg.n_chains > 1:
        with ThreadPoolExecutor(max_workers=min(cfg.n_threads, cfg.n_chains)) as pool:
            results = list(pool.map(one_chain, seeds))
    else:
        results = [one_chain(s) for s in seeds]
    names = results[0][0]
    draws = {nm: np.stack([r[1][:, i] for r in results]) for i, nm in enumerate(names)}
    rates = {}
    for _, _, r in results:
        for key, val in r.items():
            rates.setdefault(key, []).append(val)
    acceptance = {key: float(np.mean(v)) for key, v in rates.items()}
    monitored = tuple(spec.coefficient_names) + tuple(spec.family.nuisance_names)
    return PosteriorSample(
        draws,
        arm=arm,
        monitored=monitored,
        acceptance=acceptance,
        rhat_threshold=cfg.rhat_threshold,
        seconds=time.perf_counter() - t0,
    )


def fit_competitors(
    spec: ModelSpec,
    data: Dataset,
    priors: PriorSpec = PriorSpec(),
    cfg: McmcConfig = McmcConfig(),
    true_v=None,
    known_q=None,
    arms: Sequence[str] = ARMS,
    arm_priors: Optional[Mapping[str, PriorSpec]] = None,
) -> Dict[str, PosteriorSample]:
    """Fit several model arms to the same data under shared priors.

    ``arm_priors`` overrides the prior of individual arms (for example an
    informative Q prior for the mixture arm only).  All side inputs are
    checked before any arm runs.
    """
    arms = list(dict.fromkeys(arms))
    arm_priors = dict(arm_priors or {})
    for arm in arms:
        _check_inputs(spec, data, arm_priors.get(arm, priors), arm, true_v, known_q)
    return {
        arm: mcmc_fit(spec, data, arm_priors.get(arm, priors), cfg, arm=arm, true_v=true_v, known_q=known_q)
        for arm in arms
    }
