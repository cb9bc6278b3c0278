"""Maximum-likelihood fitting of the misclassification mixture by EM.

The E-step computes membership weights ``r_ij`` proportional to
``q_{v*_i j} f(y_i | V=j, x_i)``.  The M-step maximises the weighted
complete-data likelihood: closed form for normal responses, Newton steps for
Poisson coefficients and a quasi-Newton search for the remaining families.
Reclassification rows are weight averages within each observed-category
stratum (constant gating) or one multinomial-logit Newton step per stratum
(logit gating).
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import optimize
from scipy.special import expit, logit, logsumexp

from .errors import ConfigurationError, ConvergenceError, MixclassError, StratumCollapseError
from .model import (
    ConstantGating,
    Dataset,
    Kind,
    LogitGating,
    ModelSpec,
    ResponseFamily,
    Theta,
    log_gating_matrix,
    mixture_loglik,
    normalize_rows,
)

log = logging.getLogger(__name__)

SIGN_CONSTRAINTS = ("positive", "negative", "none")
WEIGHT_CLIP = 1e-12
MONOTONE_TOL = 1e-10


@dataclass(frozen=True)
class EmConfig:
    max_iter: int = 2000
    loglik_tol: float = 1e-9
    n_restarts: int = 10
    sign_constraint: str = "positive"
    seed: int = 0
    n_jobs: int = 1

    def __post_init__(self):
        if int(self.max_iter) < 1:
            raise ConfigurationError("max_iter must be at least 1")
        if not self.loglik_tol > 0:
            raise ConfigurationError("loglik_tol must be positive")
        if int(self.n_restarts) < 1:
            raise ConfigurationError("n_restarts must be at least 1")
        if self.sign_constraint not in SIGN_CONSTRAINTS:
            raise ConfigurationError(f"sign_constraint must be one of {SIGN_CONSTRAINTS}")


@dataclass
class EmFit:
    theta_hat: Theta
    loglik: float
    n_iter: int
    converged: bool
    restart_logliks: List[float]
    trace: List[float] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        th = self.theta_hat
        out = {
            "alpha0": th.alpha0,
            "alpha1": th.alpha1,
            "beta": th.beta.tolist(),
            "phi": dict(th.phi),
            "pi_star": th.pi_star.tolist(),
        }
        if isinstance(th.gating, ConstantGating):
            out["q"] = th.gating.q.entries.tolist()
        else:
            out["nu"] = th.gating.nu.tolist()
            out["gamma"] = th.gating.gamma.tolist()
        return {
            "theta": out,
            "loglik": self.loglik,
            "n_iter": self.n_iter,
            "converged": self.converged,
            "restart_logliks": [None if math.isnan(v) else v for v in self.restart_logliks],
        }


# ---------------------------------------------------------------------------
# Design and complete-data M-step
# ---------------------------------------------------------------------------


def design_tensor(n_categories: int, n: int, x: Optional[np.ndarray]) -> np.ndarray:
    """Covariate rows ``[1, j, x_i]`` for every row ``i`` and latent category ``j``.

    With a single category the ``j`` column is dropped.
    """
    k = n_categories
    cols = [np.ones((n, k))]
    if k > 1:
        cols.append(np.broadcast_to(np.arange(k, dtype=float), (n, k)))
    if x is not None and x.shape[1]:
        cols.extend(np.broadcast_to(x[:, c:c + 1], (n, k)) for c in range(x.shape[1]))
    return np.stack(cols, axis=-1)


def _default_phi(family: ResponseFamily, y, mu) -> Dict[str, float]:
    k = family.kind
    resid_sd = float(np.sqrt(max(np.mean((y - mu) ** 2), 1e-12)))
    if k is Kind.NORMAL:
        return {"sigma": resid_sd}
    if k is Kind.STUDENT_T:
        return {"sigma": resid_sd, "df": 10.0}
    if k is Kind.ZIP:
        return {"w": 0.05}
    if k is Kind.GAMMA:
        ratio = y / mu
        return {"shape": float(1.0 / max(np.var(ratio), 1e-6))}
    return {}


def _weighted_objective(family, y, zs, ws, phi):
    return lambda b: float(np.sum(ws * family.logpdf(y, zs @ b, phi)))


def _pack_phi(family, phi):
    out = []
    for name in family.nuisance_names:
        out.append(logit(phi[name]) if name == "w" else math.log(phi[name]))
    return np.array(out)


def _unpack_phi(family, vals):
    phi = {}
    for name, v in zip(family.nuisance_names, vals):
        phi[name] = float(expit(v)) if name == "w" else float(np.exp(np.clip(v, -30, 30)))
    return phi


def mstep_coefficients(
    family: ResponseFamily,
    y: np.ndarray,
    Z: np.ndarray,
    R: np.ndarray,
    b: np.ndarray,
    phi: Dict[str, float],
    fixed: Optional[Dict[int, float]] = None,
    newton_steps: int = 3,
) -> Tuple[np.ndarray, Dict[str, float]]:
    """Maximise ``sum_ij R_ij log f(y_i | Z_ij b, phi)`` (or improve it).

    ``Z`` is ``(n, K, P)`` and ``R`` is ``(n, K)``.  Coefficients listed in
    ``fixed`` (index -> value) are held constant.
    """
    n, k, p = Z.shape
    fixed = dict(fixed or {})
    b = np.array(b, dtype=float)
    for i, val in fixed.items():
        b[i] = val
    free = np.array([i not in fixed for i in range(p)])
    zs = Z.reshape(n * k, p)
    ys = np.repeat(y, k)
    ws = R.reshape(-1)
    keep = ws > 0
    zs, ys, ws = zs[keep], ys[keep], ws[keep]
    offset = zs[:, ~free] @ b[~free]
    zf = zs[:, free]

    if family.kind is Kind.NORMAL:
        if free.any():
            a = zf.T @ (ws[:, None] * zf)
            rhs = zf.T @ (ws * (ys - offset))
            b[free] = np.linalg.lstsq(a, rhs, rcond=None)[0]
        resid = ys - zs @ b
        var = float(np.sum(ws * resid**2) / np.sum(ws))
        floor = 1e-12 * max(float(np.var(y)), 1e-300)
        return b, {"sigma": math.sqrt(max(var, floor))}

    if family.kind is Kind.POISSON:
        obj = _weighted_objective(family, ys, zs, ws, phi)
        cur = obj(b)
        for _ in range(newton_steps):
            if not free.any():
                break
            mu = np.exp(zs @ b)
            grad = zf.T @ (ws * (ys - mu))
            hess = zf.T @ ((ws * mu)[:, None] * zf)
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
            t = 1.0
            for _ in range(40):
                trial = b.copy()
                trial[free] += t * step
                val = obj(trial)
                if np.isfinite(val) and val >= cur:
                    break
                t *= 0.5
            else:
                break
            if val - cur < 1e-13 * max(1.0, abs(cur)):
                b, cur = trial, val
                break
            b, cur = trial, val
        return b, {}

    # remaining families: joint quasi-Newton over free coefficients and nuisances
    nf = int(free.sum())

    def negll(params):
        bb = b.copy()
        bb[free] = params[:nf]
        ph = _unpack_phi(family, params[nf:])
        with np.errstate(all="ignore"):
            val = -float(np.sum(ws * family.logpdf(ys, zs @ bb, ph)))
        return val if np.isfinite(val) else 1e300

    start = np.concatenate([b[free], _pack_phi(family, phi)])
    f0 = negll(start)
    res = optimize.minimize(negll, start, method="L-BFGS-B")
    if res.fun <= f0:
        b = b.copy()
        b[free] = res.x[:nf]
        phi = _unpack_phi(family, res.x[nf:])
    return b, phi


def glm_fit(family: ResponseFamily, y, Z2: np.ndarray, max_iter: int = 100, return_cov: bool = False):
    """Plain GLM maximum likelihood for rows ``Z2`` (shape ``(n, P)``).

    Returns ``(coefficients, phi, standard_errors)``, plus the coefficient
    covariance when ``return_cov`` is set.  The covariance is the usual
    inverse information for normal and log-link counts and a rough
    approximation otherwise (it only seeds EM restarts and chains).
    """
    y = np.asarray(y, dtype=float)
    n, p = Z2.shape
    Z = Z2[:, None, :]
    R = np.ones((n, 1))
    if family.link.value == "log":
        b = np.zeros(p)
        b[0] = math.log(max(float(np.mean(y)), 1e-3))
    else:
        b = np.zeros(p)
    phi = _default_phi(family, y, family.mean(Z2 @ b) if family.link.value == "log" else np.mean(y))
    prev = -np.inf
    for _ in range(max_iter):
        b, phi = mstep_coefficients(family, y, Z, R, b, phi, newton_steps=5)
        cur = float(np.sum(family.logpdf(y, Z2 @ b, phi)))
        if abs(cur - prev) <= 1e-12 * max(1.0, abs(cur)):
            break
        prev = cur
    mu = family.mean(Z2 @ b)
    if family.kind in (Kind.NORMAL, Kind.STUDENT_T):
        info = Z2.T @ Z2 / phi["sigma"] ** 2
    elif family.kind is Kind.GAMMA:
        info = phi["shape"] * (Z2.T @ Z2)
    else:
        info = Z2.T @ (mu[:, None] * Z2)
    try:
        cov = np.linalg.pinv(info)
    except np.linalg.LinAlgError:
        cov = np.eye(p)
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    if return_cov:
        return b, phi, se, cov
    return b, phi, se


# ---------------------------------------------------------------------------
# Gating M-step
# ---------------------------------------------------------------------------


def _logit_newton_step(zw: np.ndarray, targets: np.ndarray, theta_k: np.ndarray) -> np.ndarray:
    """One damped Newton step of a soft-target multinomial logit with base ``K-1``.

    ``theta_k`` has shape ``(K-1, 1+m)``: intercepts in column 0, slopes after.
    """
    km1, d = theta_k.shape

    def objective(th):
        lp = np.concatenate([zw @ th.T, np.zeros((zw.shape[0], 1))], axis=1)
        lp -= logsumexp(lp, axis=1, keepdims=True)
        return float(np.sum(targets * lp)), np.exp(lp)

    cur, p = objective(theta_k)
    pr = p[:, :km1]
    grad = ((targets[:, :km1] - pr).T @ zw).reshape(-1)
    w_blocks = np.einsum("ij,jl->ijl", pr, np.eye(km1)) - pr[:, :, None] * pr[:, None, :]
    hess = np.einsum("ijl,ia,ib->jalb", w_blocks, zw, zw).reshape(km1 * d, km1 * d)
    hess += 1e-10 * np.eye(km1 * d)
    step = np.linalg.lstsq(hess, grad, rcond=None)[0].reshape(km1, d)
    t = 1.0
    for _ in range(40):
        trial = theta_k + t * step
        val, _ = objective(trial)
        if np.isfinite(val) and val >= cur:
            return trial
        t *= 0.5
    return theta_k


def _mstep_gating(gating, R, v_star, w, n_categories):
    k = n_categories
    if isinstance(gating, ConstantGating):
        q = np.zeros((k, k))
        np.add.at(q, v_star, R)
        return ConstantGating(normalize_rows(q))
    m = gating.n_w
    nu = np.array(gating.nu)
    gam = np.array(gating.gamma)
    for row in range(k):
        sel = v_star == row
        zw = np.ones((int(sel.sum()), 1))
        if m:
            zw = np.column_stack([zw, w[sel]])
        th = np.concatenate([nu[row][:, None], gam[row]], axis=1)
        th = _logit_newton_step(zw, R[sel], th)
        nu[row], gam[row] = th[:, 0], th[:, 1:]
    return LogitGating(nu, gam)


# ---------------------------------------------------------------------------
# Label handling
# ---------------------------------------------------------------------------


def mirror_labels(theta: Theta) -> Theta:
    """Relabel latent categories ``j -> K-1-j``; the likelihood is unchanged.

    The slope changes sign and the intercept moves to the old top category.
    """
    k = theta.n_categories
    a0 = theta.alpha0 + theta.alpha1 * (k - 1)
    if isinstance(theta.gating, ConstantGating):
        gating = ConstantGating(theta.gating.q.entries[:, ::-1])
    else:
        zeros = np.zeros((k, 1))
        full_nu = np.concatenate([theta.gating.nu, zeros], axis=1)[:, ::-1]
        full_g = np.concatenate([theta.gating.gamma, np.zeros((k, 1, theta.gating.n_w))], axis=1)[:, ::-1]
        gating = LogitGating(
            full_nu[:, :-1] - full_nu[:, -1:], full_g[:, :-1] - full_g[:, -1:]
        )
    return theta.replace(alpha0=a0, alpha1=-theta.alpha1, gating=gating)


def _violates(sign: str, alpha1: float) -> bool:
    return (sign == "positive" and alpha1 < 0) or (sign == "negative" and alpha1 > 0)


# ---------------------------------------------------------------------------
# EM driver
# ---------------------------------------------------------------------------


@dataclass
class _Run:
    theta: Theta
    loglik: float
    n_iter: int
    converged: bool
    trace: List[float]


def _estep(spec, theta, data, logf_fn):
    logits = logf_fn(theta) + log_gating_matrix(theta.gating, data.v_star, data.w)
    lm = logsumexp(logits, axis=1, keepdims=True)
    with np.errstate(divide="ignore"):
        ll = float(np.sum(lm) + np.sum(np.log(theta.pi_star)[data.v_star]))
    return np.exp(logits - lm), ll


def _make_theta(spec, b, phi, pi_star, gating):
    k = spec.n_categories
    a1 = b[1] if k > 1 else 0.0
    beta = b[2:] if k > 1 else b[1:]
    return Theta(b[0], a1, pi_star, gating, beta=beta, phi=phi)


def _run_em(spec, data, y, Z, theta0, cfg, fixed) -> _Run:
    k = spec.n_categories
    counts = np.bincount(data.v_star, minlength=k)
    pi_star = counts / counts.sum()
    family = spec.family

    def logf_fn(th):
        b = th.coefficients if k > 1 else np.concatenate([[th.alpha0], th.beta])
        return family.logpdf(y[:, None], Z @ b, th.phi)

    theta = theta0.replace(pi_star=pi_star)
    trace: List[float] = []
    converged = False
    prev = -np.inf
    it = 0
    for it in range(1, int(cfg.max_iter) + 1):
        R, ll = _estep(spec, theta, data, logf_fn)
        if not np.isfinite(ll):
            raise MixclassError("log-likelihood became non-finite during EM")
        trace.append(ll)
        if ll < prev - MONOTONE_TOL * max(1.0, abs(prev)):
            log.warning("EM log-likelihood decreased by %.3g at iteration %d", prev - ll, it)
        if np.isfinite(prev) and abs(ll - prev) <= cfg.loglik_tol * max(1.0, abs(prev)):
            converged = True
            break
        prev = ll
        R = normalize_rows(np.clip(R, WEIGHT_CLIP, 1.0 - WEIGHT_CLIP))
        b = theta.coefficients if k > 1 else np.concatenate([[theta.alpha0], theta.beta])
        b, phi = mstep_coefficients(family, y, Z, R, b, dict(theta.phi), fixed)
        gating = theta.gating if k == 1 else _mstep_gating(theta.gating, R, data.v_star, data.w, k)
        theta = _make_theta(spec, b, phi, pi_star, gating)
    return _Run(theta, trace[-1], it, converged, trace)


def _initial_states(spec, data, y, Z, cfg, fixed):
    k = spec.n_categories
    family = spec.family
    rng = np.random.default_rng(cfg.seed)
    Z2 = Z[np.arange(data.n), data.v_star] if k > 1 else Z[:, 0]
    b0, phi0, se = glm_fit(family, y, Z2)
    for i, val in (fixed or {}).items():
        b0[i] = val
    q0 = 0.8 * np.eye(k) + 0.2 / k
    starts = []
    for r in range(int(cfg.n_restarts)):
        if r == 0:
            b, q = b0.copy(), q0
        else:
            b = b0 + rng.uniform(-1.0, 1.0, b0.size) * se
            q = rng.dirichlet(np.ones(k), size=k)
        for i, val in (fixed or {}).items():
            b[i] = val
        gating = ConstantGating(normalize_rows(q)) if spec.gating == "constant" else LogitGating.from_matrix(
            normalize_rows(q), spec.n_w
        )
        starts.append(_make_theta(spec, b, dict(phi0), np.full(k, 1.0 / k), gating))
    return starts


def em_fit(spec: ModelSpec, data: Dataset, cfg: EmConfig = EmConfig(), fixed: Optional[Dict[str, float]] = None) -> EmFit:
    """Fit by EM from several starts and keep the highest log-likelihood.

    After convergence the latent labels are mirrored if the slope violates
    ``cfg.sign_constraint``.  ``fixed`` maps coefficient names (``alpha0``,
    ``alpha1``, ``beta_1``...) to values held constant (profile likelihood);
    no mirroring is applied when ``alpha1`` is fixed.

    Raises
    ------
    StratumCollapseError
        If an observed category has no rows.
    ConvergenceError
        If no restart converges within ``max_iter``; ``best`` holds the best run.
    """
    k = spec.n_categories
    y = spec.check_data(data)
    if k > 1 and data.n <= k:
        raise ConfigurationError(f"need more than {k} rows for a {k}-category mixture")
    counts = np.bincount(data.v_star, minlength=k)
    if np.any(counts == 0):
        raise StratumCollapseError(f"observed category {int(np.argmin(counts))} has no rows")
    names = spec.coefficient_names
    fixed_idx = {}
    for name, val in (fixed or {}).items():
        if name not in names:
            raise ConfigurationError(f"cannot fix {name!r}; coefficients are {names}")
        fixed_idx[names.index(name)] = float(val)
    Z = design_tensor(k, data.n, data.x)
    starts = _initial_states(spec, data, y, Z, cfg, fixed_idx)

    def attempt(theta0):
        try:
            return _run_em(spec, data, y, Z, theta0, cfg, fixed_idx)
        except (MixclassError, np.linalg.LinAlgError, FloatingPointError) as exc:
            log.info("EM restart failed: %s", exc)
            return None

    if cfg.n_jobs > 1:
        with ThreadPoolExecutor(max_workers=cfg.n_jobs) as pool:
            runs = list(pool.map(attempt, starts))
    else:
        runs = [attempt(s) for s in starts]

    lls = [r.loglik if r is not None else math.nan for r in runs]
    ok = [r for r in runs if r is not None]
    if not ok:
        raise ConvergenceError("every EM restart failed")
    best = max(ok, key=lambda r: r.loglik)
    theta = best.theta
    if k > 1 and "alpha1" not in (fixed or {}) and _violates(cfg.sign_constraint, theta.alpha1):
        theta = mirror_labels(theta)
    fit = EmFit(theta, mixture_loglik(spec, theta, data), best.n_iter, best.converged, lls, best.trace)
    if not any(r.converged for r in ok):
        raise ConvergenceError(f"no EM restart converged in {cfg.max_iter} iterations", fit)
    return fit


def profile_loglik(
    spec: ModelSpec,
    data: Dataset,
    param: str,
    grid: Sequence[float],
    cfg: EmConfig = EmConfig(n_restarts=3),
) -> List[Tuple[float, float]]:
    """Profile log-likelihood of one regression coefficient.

    Every other parameter is re-maximised by EM at each grid value.  Failed
    cells carry NaN.
    """
    out = []
    for val in grid:
        try:
            fit = em_fit(spec, data, cfg, fixed={param: float(val)})
            out.append((float(val), fit.loglik))
        except ConvergenceError as exc:
            best = exc.best
            out.append((float(val), best.loglik if best is not None else math.nan))
        except MixclassError:
            out.append((float(val), math.nan))
    return out
