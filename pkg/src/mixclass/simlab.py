"""Scenario generators and the replication driver for simulation studies.

Scenario definitions live in ``scenarios.json`` next to this module (or in
the file named by ``MIXCLASS_SCENARIOS``).  Matrices and priors can be given
inline or by name from the file's ``matrices`` and ``priors`` sections.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, MixclassError
from .mcmc import McmcConfig, PriorSpec, mcmc_fit, summarize
from .model import (
    ClassificationMatrix,
    Dataset,
    Kind,
    ModelSpec,
    ResponseFamily,
    derive_reclassification,
    family_from_name,
    normalize_rows,
)

log = logging.getLogger(__name__)

SCENARIO_ENV = "MIXCLASS_SCENARIOS"
DEFAULT_SCENARIO_FILE = Path(__file__).with_name("scenarios.json")
STUDY_COLUMNS = [
    "scenario", "n", "rep", "arm", "param", "estimate", "lo", "hi",
    "covered", "ess", "rhat", "seconds", "status",
]
ROLLUP_COLUMNS = ["scenario", "arm", "n", "param", "reps", "mean_estimate", "coverage", "mean_width"]
BASE_ARMS = ("naive", "true", "known_q", "mixture")


@dataclass(frozen=True)
class Scenario:
    """A data-generating design and the models fitted to it.

    ``generator`` may differ from ``fit_family`` (misspecification studies).
    ``known_q`` is the matrix handed to the known-Q arm and ``priors`` maps a
    prior-variant name to the :class:`PriorSpec` of the mixture arm; the first
    variant is the default.
    """

    name: str
    generator: ResponseFamily
    fit_family: ResponseFamily
    pi: np.ndarray
    P: ClassificationMatrix
    alpha: Tuple[float, float]
    phi: Mapping[str, float]
    sample_sizes: Tuple[int, ...]
    n_replications: int
    seed: int
    base_prior: PriorSpec
    prior_variants: Mapping[str, PriorSpec]
    known_q: np.ndarray
    mcmc: McmcConfig = McmcConfig(n_chains=2, burn_in=1000, thin=1, n_kept=2000)
    level: float = 0.95
    sign_constraint: str = "positive"

    def __post_init__(self):
        gen = family_from_name(self.generator)
        fit = family_from_name(self.fit_family)
        object.__setattr__(self, "generator", gen)
        object.__setattr__(self, "fit_family", fit)
        if not isinstance(self.P, ClassificationMatrix):
            object.__setattr__(self, "P", ClassificationMatrix(self.P))
        pi = np.asarray(self.pi, dtype=float)
        if pi.size != self.P.n_categories or abs(pi.sum() - 1) > 1e-12 or np.any(pi < 0):
            raise ConfigurationError(f"scenario {self.name}: pi must be a probability vector of length K")
        object.__setattr__(self, "pi", pi)
        try:
            gen.check_phi(self.phi)
        except ConfigurationError as exc:
            raise ConfigurationError(f"scenario {self.name}: {exc}") from None
        if not self.sample_sizes or min(self.sample_sizes) < 1:
            raise ConfigurationError(f"scenario {self.name}: sample sizes must be positive")
        if int(self.n_replications) < 1:
            raise ConfigurationError(f"scenario {self.name}: n_replications must be at least 1")
        if not self.prior_variants:
            raise ConfigurationError(f"scenario {self.name}: needs at least one prior variant")

    @property
    def n_categories(self) -> int:
        return self.P.n_categories

    @property
    def spec(self) -> ModelSpec:
        return ModelSpec(self.fit_family, self.n_categories)

    @property
    def pi_star(self) -> np.ndarray:
        return derive_reclassification(self.P, self.pi)[0]

    @property
    def q(self) -> np.ndarray:
        return np.array(derive_reclassification(self.P, self.pi)[1].entries)

    def truth(self) -> Dict[str, float]:
        """True values of fitted parameters the study can score for coverage."""
        out = {"alpha0": self.alpha[0], "alpha1": self.alpha[1]}
        if self.generator == self.fit_family:
            out.update(self.phi)
        return out

    def implied_variance(self) -> Optional[float]:
        """Response variance within a true category, for the continuous generators."""
        if self.generator.kind is Kind.NORMAL:
            return self.phi["sigma"] ** 2
        if self.generator.kind is Kind.STUDENT_T:
            df = self.phi["df"]
            return self.phi["sigma"] ** 2 * df / (df - 2.0) if df > 2 else math.inf
        return None


# ---------------------------------------------------------------------------
# Scenario file
# ---------------------------------------------------------------------------


def scenario_file() -> Path:
    return Path(os.environ.get(SCENARIO_ENV) or DEFAULT_SCENARIO_FILE)


def load_scenario_file(path=None) -> dict:
    path = Path(path) if path is not None else scenario_file()
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read scenario file {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"scenario file {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or "scenarios" not in doc:
        raise ConfigurationError(f"scenario file {path} has no 'scenarios' list")
    return doc


def scenario_names(path=None) -> List[str]:
    return [s["name"] for s in load_scenario_file(path)["scenarios"]]


def _matrix(ref, doc, what):
    if isinstance(ref, str):
        try:
            ref = doc.get("matrices", {})[ref]
        except KeyError:
            raise ConfigurationError(f"{what}: unknown matrix {ref!r}") from None
    return np.array(ref, dtype=float)


def _q_rows(ref, doc, derived_q, what):
    """Parse ``"<scale>*<matrix>"`` concentration references (rows renormalised first)."""
    if not isinstance(ref, str):
        return tuple(tuple(float(v) for v in r) for r in ref)
    scale, _, name = ref.partition("*")
    if not name:
        scale, name = "1", scale
    base = derived_q if name == "derived" else normalize_rows(_matrix(name, doc, what))
    try:
        scale = float(scale)
    except ValueError:
        raise ConfigurationError(f"{what}: cannot parse {ref!r}") from None
    return tuple(tuple(float(v) for v in r) for r in scale * base)


def scenario_from_dict(d: Mapping, doc: Optional[Mapping] = None) -> Scenario:
    doc = doc or {}
    defaults = doc.get("defaults", {})
    name = d.get("name")
    if not name:
        raise ConfigurationError("scenario needs a name")
    what = f"scenario {name}"
    try:
        pi = _matrix(d["pi"], doc, what)
        P = _matrix(d["P"], doc, what)
        alpha = tuple(float(a) for a in d["alpha"])
    except KeyError as exc:
        raise ConfigurationError(f"{what}: missing field {exc}") from None
    if len(alpha) != 2:
        raise ConfigurationError(f"{what}: alpha needs two values")
    _, q = derive_reclassification(P, pi)
    derived_q = np.array(q.entries)
    prior_ref = d.get("prior", {})
    base = dict(doc.get("priors", {}).get(prior_ref, {})) if isinstance(prior_ref, str) else dict(prior_ref)
    if isinstance(prior_ref, str) and prior_ref not in doc.get("priors", {}):
        raise ConfigurationError(f"{what}: unknown prior {prior_ref!r}")
    base_prior = PriorSpec.from_dict(base)
    variants = {}
    for vname, override in (d.get("prior_variants") or {"default": {}}).items():
        merged = dict(base)
        override = dict(override)
        if "q_rows" in override:
            override["q_rows"] = _q_rows(override["q_rows"], doc, derived_q, what)
        merged.update(override)
        variants[vname] = PriorSpec.from_dict(merged)
    kq = d.get("known_q", "derived")
    known_q = derived_q if kq == "derived" else normalize_rows(_matrix(kq, doc, what))
    mcmc = dict(defaults.get("mcmc", {}))
    mcmc.update(d.get("mcmc", {}))
    sign = d.get("sign_constraint", "positive")
    mcmc["sign_constraint"] = sign
    try:
        mcmc_cfg = McmcConfig(**mcmc)
    except TypeError as exc:
        raise ConfigurationError(f"{what}: bad mcmc settings: {exc}") from None
    return Scenario(
        name=name,
        generator=d.get("generator", d.get("fit_family", "normal")),
        fit_family=d.get("fit_family", d.get("generator", "normal")),
        pi=pi,
        P=P,
        alpha=alpha,
        phi={k: float(v) for k, v in d.get("phi", {}).items()},
        sample_sizes=tuple(int(n) for n in d.get("sample_sizes", defaults.get("sample_sizes", [100]))),
        n_replications=int(d.get("n_replications", defaults.get("n_replications", 50))),
        seed=int(d.get("seed", 0)),
        base_prior=base_prior,
        prior_variants=variants,
        known_q=known_q,
        mcmc=mcmc_cfg,
        level=float(d.get("level", defaults.get("level", 0.95))),
        sign_constraint=sign,
    )


def load_scenario(name: str, path=None) -> Scenario:
    doc = load_scenario_file(path)
    for d in doc["scenarios"]:
        if d.get("name") == name:
            return scenario_from_dict(d, doc)
    names = ", ".join(s.get("name", "?") for s in doc["scenarios"])
    raise ConfigurationError(f"unknown scenario {name!r}; available: {names}")


def q_hat(path=None) -> np.ndarray:
    """The stored external estimate of Q, exactly as written in the scenario file."""
    return np.array(load_scenario_file(path)["matrices"]["q_hat"], dtype=float)


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


def generate(sc: Scenario, n: int, rep_seed: int) -> Tuple[Dataset, np.ndarray]:
    """Simulate ``n`` rows; returns the observed data and the true categories.

    ``V ~ categorical(pi)``, ``V* | V=k ~ categorical(P[k])`` and ``Y`` from
    the generator family at ``alpha0 + alpha1 V``.  The stream is seeded from
    ``(scenario seed, n, rep_seed)``.
    """
    if int(n) < 1:
        raise ConfigurationError("n must be at least 1")
    rng = np.random.default_rng([int(sc.seed), int(n), int(rep_seed)])
    k = sc.n_categories
    v = rng.choice(k, size=n, p=sc.pi)
    cum = np.cumsum(sc.P.entries, axis=1)
    u = rng.random(n)
    v_star = np.minimum((u[:, None] >= cum[v]).sum(axis=1), k - 1)
    eta = sc.alpha[0] + sc.alpha[1] * v
    y = sc.generator.sample(rng, eta, sc.phi)
    return Dataset(y, v_star), v


# ---------------------------------------------------------------------------
# Study driver
# ---------------------------------------------------------------------------


def _arm_parts(arm: str, sc: Scenario) -> Tuple[str, Optional[str]]:
    base, _, variant = arm.partition(":")
    if base not in BASE_ARMS:
        raise ConfigurationError(f"unknown arm {arm!r}; expected one of {BASE_ARMS} (mixture:<variant> allowed)")
    if base != "mixture" and variant:
        raise ConfigurationError(f"only the mixture arm takes a prior variant, got {arm!r}")
    if base == "mixture":
        variant = variant or next(iter(sc.prior_variants))
        if variant not in sc.prior_variants:
            raise ConfigurationError(
                f"scenario {sc.name} has no prior variant {variant!r}; available: {list(sc.prior_variants)}"
            )
    return base, variant or None


def run_cell(sc: Scenario, n: int, rep: int, arm: str, mcmc: Optional[McmcConfig] = None) -> List[dict]:
    """Fit one (sample size, replication, arm) cell; never raises for fit failures."""
    base, variant = _arm_parts(arm, sc)
    cfg = mcmc or sc.mcmc
    cfg = dataclasses.replace(cfg, seed=int(sc.seed) * 1000003 + int(n) * 101 + int(rep))
    truth = sc.truth()
    t0 = time.perf_counter()
    try:
        data, v = generate(sc, n, rep)
        prior = sc.prior_variants[variant] if variant else sc.base_prior
        sample = mcmc_fit(sc.spec, data, prior, cfg, arm=base, true_v=v, known_q=sc.known_q)
        summ = summarize(sample, sc.level)
        status = "ok" if sample.converged else "rhat_flag"
    except (MixclassError, np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
        return [_row(sc, n, rep, arm, "alpha1", None, time.perf_counter() - t0, f"error:{type(exc).__name__}")]
    secs = time.perf_counter() - t0
    rows = []
    for param in list(sc.spec.coefficient_names) + list(sc.fit_family.nuisance_names):
        s = summ[param]
        covered = ""
        if param in truth:
            covered = int(s["lo"] <= truth[param] <= s["hi"])
        rows.append(_row(sc, n, rep, arm, param, s, secs, status, covered))
    return rows


def _row(sc, n, rep, arm, param, s, secs, status, covered=""):
    fmt = lambda x: "" if x is None or not np.isfinite(x) else repr(float(x))
    return {
        "scenario": sc.name, "n": int(n), "rep": int(rep), "arm": arm, "param": param,
        "estimate": fmt(s["mean"]) if s else "", "lo": fmt(s["lo"]) if s else "",
        "hi": fmt(s["hi"]) if s else "", "covered": covered,
        "ess": fmt(s["ess"]) if s else "", "rhat": fmt(s["rhat"]) if s else "",
        "seconds": f"{secs:.3f}", "status": status,
    }


def _completed_cells(path: Path) -> set:
    done = set()
    if not path.exists():
        return done
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            try:
                done.add((int(row["n"]), int(row["rep"]), row["arm"]))
            except (KeyError, ValueError):
                continue
    return done


def run_study(
    sc: Scenario,
    arms: Sequence[str],
    out,
    sizes: Optional[Iterable[int]] = None,
    reps: Optional[int] = None,
    mcmc: Optional[McmcConfig] = None,
    n_jobs: int = 1,
) -> List[dict]:
    """Run every (sample size, replication, arm) cell and append rows to ``out``.

    Cells already present in ``out`` are skipped, so an interrupted study
    resumes where it stopped.  Rows are written as cells finish.  A roll-up
    (mean estimate, coverage and interval width per arm, n and parameter) is
    written to ``<out stem>.rollup.csv`` and returned.
    """
    arms = list(dict.fromkeys(arms))
    for arm in arms:
        _arm_parts(arm, sc)
    sizes = tuple(int(n) for n in (sizes or sc.sample_sizes))
    reps = int(reps or sc.n_replications)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    done = _completed_cells(out)
    todo = [(n, r, a) for n in sizes for r in range(reps) for a in arms if (n, r, a) not in done]
    new_file = not out.exists() or out.stat().st_size == 0
    if sc.implied_variance() is not None:
        log.info("scenario %s: within-category response variance %.4g", sc.name, sc.implied_variance())
    with open(out, "a", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=STUDY_COLUMNS)
        if new_file:
            wr.writeheader()
        if n_jobs > 1 and len(todo) > 1:
            with ProcessPoolExecutor(max_workers=n_jobs) as pool:
                futs = [pool.submit(run_cell, sc, n, r, a, mcmc) for n, r, a in todo]
                for fut in as_completed(futs):
                    wr.writerows(fut.result())
                    fh.flush()
        else:
            for n, r, a in todo:
                wr.writerows(run_cell(sc, n, r, a, mcmc))
                fh.flush()
    rollup = rollup_study(out, sc.name)
    with open(out.with_name(out.stem + ".rollup.csv"), "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=ROLLUP_COLUMNS)
        wr.writeheader()
        wr.writerows(rollup)
    return rollup


def read_study(path) -> List[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def rollup_study(path, scenario: Optional[str] = None) -> List[dict]:
    """Mean estimate, coverage and interval width per (arm, n, param) over successful cells."""
    groups: Dict[tuple, list] = {}
    for row in read_study(path):
        if scenario is not None and row["scenario"] != scenario:
            continue
        if row["status"].startswith("error") or row["estimate"] == "":
            continue
        groups.setdefault((row["arm"], int(row["n"]), row["param"]), []).append(row)
    out = []
    for (arm, n, param), rows in sorted(groups.items()):
        est = np.array([float(r["estimate"]) for r in rows])
        width = np.array([float(r["hi"]) - float(r["lo"]) for r in rows])
        cov = [int(r["covered"]) for r in rows if r["covered"] != ""]
        out.append({
            "scenario": scenario or rows[0]["scenario"],
            "arm": arm, "n": n, "param": param, "reps": len(rows),
            "mean_estimate": float(est.mean()),
            "coverage": float(np.mean(cov)) if cov else "",
            "mean_width": float(width.mean()),
        })
    return out
