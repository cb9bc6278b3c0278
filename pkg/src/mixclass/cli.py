"""Command-line front end: ``mixclass fit | efficiency | study``.

Exit codes: 0 success, 2 configuration error, 3 convergence flag, 4 data error.
Every command writes ``effective_config.json`` to its output directory;
passing that file back through ``--config`` repeats the run.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import re
import sys
from pathlib import Path
from typing import Dict, Optional, Sequence

import numpy as np

from . import __version__
from .efficiency import default_grid, rasd_surface, write_surface_csv
from .em import EmConfig, em_fit
from .errors import ConfigurationError, ConvergenceError, DomainError, MixclassError
from .mcmc import ARMS, McmcConfig, PriorSpec, mcmc_fit
from .mcmc.sampler import SCHEMA_VERSION, _jsonable
from .model import Dataset, ModelSpec

log = logging.getLogger("mixclass")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_UNCONVERGED = 3
EXIT_DATA = 4

_COLUMN = re.compile(r"^(y|v_star|v|x_(\d+)|w_(\d+))$")


class DataFileError(MixclassError):
    """Malformed or inconsistent input data file."""


# ---------------------------------------------------------------------------
# Data ingestion
# ---------------------------------------------------------------------------


def read_data_csv(path) -> tuple:
    """Read ``y, v_star[, v][, x_1..x_p][, w_1..w_m]`` columns.

    Returns ``(Dataset, v)`` with ``v`` the optional true-category column.
    """
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataFileError(f"cannot read data file {path}: {exc}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataFileError(f"{path}: empty file") from None
        for h in header:
            if not _COLUMN.match(h):
                raise DataFileError(f"{path}: unknown column {h!r} (allowed: y, v_star, v, x_<i>, w_<i>)")
        if len(set(header)) != len(header):
            raise DataFileError(f"{path}: duplicate column names")
        for req in ("y", "v_star"):
            if req not in header:
                raise DataFileError(f"{path}: missing required column {req!r}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataFileError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
            vals = []
            for name, cell in zip(header, row):
                try:
                    val = float(cell)
                except ValueError:
                    raise DataFileError(f"{path}: line {lineno}: column {name}: cannot parse {cell!r}") from None
                if name in ("v_star", "v") and (val != int(val) if np.isfinite(val) else True):
                    raise DataFileError(f"{path}: line {lineno}: column {name}: category must be an integer")
                vals.append(val)
            rows.append(vals)
    if not rows:
        raise DataFileError(f"{path}: no data rows")
    a = np.array(rows)
    col = {h: a[:, i] for i, h in enumerate(header)}

    def block(prefix):
        idx = sorted(int(h[2:]) for h in header if h.startswith(prefix))
        if not idx:
            return None
        if idx != list(range(1, len(idx) + 1)):
            raise DataFileError(f"{path}: {prefix}<i> columns must be numbered 1..{len(idx)}")
        return np.column_stack([col[f"{prefix}{i}"] for i in idx])

    try:
        data = Dataset(col["y"], col["v_star"].astype(int), block("x_"), block("w_"))
    except ConfigurationError as exc:
        raise DataFileError(f"{path}: {exc}") from None
    v = col["v"].astype(int) if "v" in col else None
    return data, v


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigurationError(f"config: cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config: {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigurationError("config: top level must be a JSON object")
    return cfg


def _check_keys(d, allowed, where):
    extra = set(d) - set(allowed)
    if extra:
        raise ConfigurationError(f"{where}: unknown field(s) {sorted(extra)}")


def _section(cls, d, where):
    if d is None:
        d = {}
    if not isinstance(d, dict):
        raise ConfigurationError(f"{where}: expected an object")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigurationError(f"{where}: {exc}") from None
    except ConfigurationError as exc:
        raise ConfigurationError(f"{where}: {exc}") from None


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2)


FIT_KEYS = ("command", "data", "model", "priors", "mcmc", "em", "known_q", "engine", "arms",
            "seed", "threads", "level", "out_dir")


def resolve_fit_config(args) -> dict:
    cfg = _load_config(args.config)
    _check_keys(cfg, FIT_KEYS, "config")
    eff = dict(cfg)
    eff["command"] = "fit"
    for key, val in (("data", args.data), ("engine", args.engine), ("seed", args.seed),
                     ("threads", args.threads), ("level", args.level), ("out_dir", args.out_dir)):
        if val is not None:
            eff[key] = val
    if args.arm:
        eff["arms"] = list(args.arm)
    model = dict(eff.get("model") or {})
    if args.family is not None:
        model["family"] = args.family
    if args.categories is not None:
        model["n_categories"] = args.categories
    eff["model"] = model
    eff.setdefault("engine", "mcmc")
    eff.setdefault("arms", ["mixture"])
    eff.setdefault("seed", 0)
    eff.setdefault("threads", 1)
    eff.setdefault("level", 0.95)
    eff.setdefault("out_dir", "mixclass_out")
    if not eff.get("data"):
        raise ConfigurationError("data: a data file is required (--data or config 'data')")
    if eff["engine"] not in ("mcmc", "em"):
        raise ConfigurationError(f"engine: must be 'mcmc' or 'em', got {eff['engine']!r}")
    for arm in eff["arms"]:
        if arm not in ARMS:
            raise ConfigurationError(f"arms: unknown arm {arm!r}; expected one of {list(ARMS)}")
    if not 0 < float(eff["level"]) < 1:
        raise ConfigurationError("level: must lie in (0, 1)")
    if int(eff["threads"]) < 1:
        raise ConfigurationError("threads: must be at least 1")
    return eff


def _build_model(eff, data) -> ModelSpec:
    model = dict(eff["model"])
    _check_keys(model, ("family", "n_categories", "gating"), "model")
    model.setdefault("family", "normal")
    model.setdefault("n_categories", max(2, int(data.v_star.max()) + 1))
    model.setdefault("gating", "logit" if data.n_w else "constant")
    eff["model"] = model
    try:
        return ModelSpec(model["family"], int(model["n_categories"]), n_x=data.n_x,
                         gating=model["gating"], n_w=data.n_w)
    except ConfigurationError as exc:
        raise ConfigurationError(f"model: {exc}") from None


def _print_table(blocks: Dict[str, dict], level: float, out=None):
    out = out or sys.stdout
    pct = f"{100 * level:g}%"
    print(f"{'arm':<9} {'parameter':<12} {'mean':>11} {'sd':>10} {pct + ' lo':>11} {pct + ' hi':>11} {'ess':>8} {'rhat':>7}", file=out)
    for arm, summ in blocks.items():
        for name, s in summ["parameters"].items():
            ess = "nan" if s["ess"] is None or not np.isfinite(s["ess"]) else f"{s['ess']:.0f}"
            rhat = "nan" if s["rhat"] is None or not np.isfinite(s["rhat"]) else f"{s['rhat']:.3f}"
            print(f"{arm:<9} {name:<12} {s['mean']:>11.4g} {s['sd']:>10.3g} {s['lo']:>11.4g} {s['hi']:>11.4g} {ess:>8} {rhat:>7}", file=out)


def cmd_fit(args) -> int:
    eff = resolve_fit_config(args)
    # validate every section before touching the data
    priors = PriorSpec.from_dict(eff.get("priors") or {}) if not isinstance(eff.get("priors"), PriorSpec) else eff["priors"]
    mcmc_d = dict(eff.get("mcmc") or {})
    mcmc_d["seed"] = int(eff["seed"])
    mcmc_d["n_threads"] = int(eff["threads"])
    mcmc_cfg = _section(McmcConfig, mcmc_d, "mcmc")
    em_d = dict(eff.get("em") or {})
    em_d["seed"] = int(eff["seed"])
    em_d["n_jobs"] = int(eff["threads"])
    em_cfg = _section(EmConfig, em_d, "em")
    eff["mcmc"], eff["em"], eff["priors"] = mcmc_d, em_d, priors.to_dict()

    data, v = read_data_csv(eff["data"])
    spec = _build_model(eff, data)
    try:
        spec.check_data(data)
    except DomainError as exc:
        raise DataFileError(str(exc)) from None
    except ConfigurationError as exc:
        raise DataFileError(f"{eff['data']}: {exc}") from None
    if "true" in eff["arms"] and eff["engine"] == "mcmc" and v is None:
        raise ConfigurationError("arms: the 'true' arm needs a 'v' column in the data file")
    known_q = eff.get("known_q")
    if "known_q" in eff["arms"] and eff["engine"] == "mcmc" and known_q is None:
        raise ConfigurationError("known_q: the 'known_q' arm needs a known_q matrix in the config")

    out_dir = Path(eff["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "effective_config.json", eff)

    if eff["engine"] == "em":
        status = EXIT_OK
        try:
            fit = em_fit(spec, data, em_cfg)
        except ConvergenceError as exc:
            if exc.best is None:
                raise
            fit, status = exc.best, EXIT_UNCONVERGED
        doc = {"schema_version": SCHEMA_VERSION, "command": "fit", "engine": "em", **fit.to_dict(), "trace": fit.trace}
        _write_json(out_dir / "em_fit.json", doc)
        th = fit.theta_hat
        print(f"loglik {fit.loglik:.6f}  iterations {fit.n_iter}  converged {fit.converged}")
        for name, val in zip(spec.coefficient_names, th.coefficients if spec.n_categories > 1 else [th.alpha0, *th.beta]):
            print(f"{name:<12} {val:.6g}")
        for name, val in th.phi.items():
            print(f"{name:<12} {val:.6g}")
        return status

    blocks = {}
    status = EXIT_OK
    for arm in eff["arms"]:
        sample = mcmc_fit(spec, data, priors, mcmc_cfg, arm=arm, true_v=v, known_q=known_q)
        sample.to_csv(out_dir / f"draws_{arm}.csv")
        blocks[arm] = sample.summary_dict(float(eff["level"]))
        if not sample.converged:
            log.warning("arm %s: R-hat above %.2f for %s", arm, mcmc_cfg.rhat_threshold, ", ".join(sample.flagged))
            status = EXIT_UNCONVERGED
    _write_json(out_dir / "summary.json", {
        "schema_version": SCHEMA_VERSION, "command": "fit", "engine": "mcmc", "arms": blocks,
    })
    _print_table(blocks, float(eff["level"]))
    return status


EFF_KEYS = ("command", "effects", "pi1", "grid", "grid_values", "include_boundary", "dedupe",
            "sigma", "threads", "seed", "out_dir")


def cmd_efficiency(args) -> int:
    cfg = _load_config(args.config)
    _check_keys(cfg, EFF_KEYS, "config")
    eff = dict(cfg)
    eff["command"] = "efficiency"
    for key, val in (("pi1", args.pi1), ("grid", args.grid), ("sigma", args.sigma),
                     ("threads", args.threads), ("seed", args.seed), ("out_dir", args.out_dir)):
        if val is not None:
            eff[key] = val
    if args.effect:
        eff["effects"] = list(args.effect)
    if args.grid_values:
        try:
            eff["grid_values"] = [float(s) for s in args.grid_values.split(",") if s.strip()]
        except ValueError:
            raise ConfigurationError("grid_values: expected comma-separated numbers") from None
    if args.include_boundary:
        eff["include_boundary"] = True
    if args.dedupe:
        eff["dedupe"] = True
    eff.setdefault("effects", [1.0, 2.0, 5.0])
    eff.setdefault("pi1", 0.5)
    eff.setdefault("grid", 9)
    eff.setdefault("include_boundary", False)
    eff.setdefault("dedupe", False)
    eff.setdefault("sigma", 1.0)
    eff.setdefault("threads", 1)
    eff.setdefault("seed", 0)
    eff.setdefault("out_dir", "mixclass_out")
    if not 0 < float(eff["pi1"]) < 1:
        raise ConfigurationError("pi1: must lie strictly inside (0, 1)")
    if int(eff["grid"]) < 1:
        raise ConfigurationError("grid: must be at least 1")
    if not float(eff["sigma"]) > 0:
        raise ConfigurationError("sigma: must be positive")
    if not eff["effects"]:
        raise ConfigurationError("effects: need at least one effect size")
    if eff.get("grid_values"):
        grid = np.array(sorted(set(float(g) for g in eff["grid_values"])))
        if np.any((grid < 0) | (grid > 1)):
            raise ConfigurationError("grid_values: rates must lie in [0, 1]")
        if eff["include_boundary"]:
            grid = np.union1d(grid, [0.0, 1.0])
    else:
        grid = default_grid(int(eff["grid"]), bool(eff["include_boundary"]))
    out_dir = Path(eff["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "effective_config.json", eff)
    cells = rasd_surface([float(e) for e in eff["effects"]], float(eff["pi1"]), grid,
                         sigma=float(eff["sigma"]), workers=int(eff["threads"]))
    n = write_surface_csv(cells, out_dir / "rasd_surface.csv", dedupe_symmetric=bool(eff["dedupe"]))
    print(f"wrote {n} cells to {out_dir / 'rasd_surface.csv'}")
    return EXIT_OK


STUDY_KEYS = ("command", "scenario", "arms", "reps", "sizes", "seed", "threads", "out_dir", "mcmc")


def cmd_study(args) -> int:
    from . import simlab

    cfg = _load_config(args.config)
    _check_keys(cfg, STUDY_KEYS, "config")
    eff = dict(cfg)
    eff["command"] = "study"
    if args.scenario is not None:
        eff["scenario"] = args.scenario
    for key, val in (("reps", args.reps), ("seed", args.seed), ("threads", args.threads), ("out_dir", args.out_dir)):
        if val is not None:
            eff[key] = val
    if args.arm:
        eff["arms"] = list(args.arm)
    if args.sizes:
        try:
            eff["sizes"] = [int(s) for s in args.sizes.split(",") if s.strip()]
        except ValueError:
            raise ConfigurationError("sizes: expected comma-separated integers") from None
    if not eff.get("scenario"):
        raise ConfigurationError(f"scenario: required; available: {', '.join(simlab.scenario_names())}")
    sc = simlab.load_scenario(eff["scenario"])
    if eff.get("seed") is not None:
        sc = simlab.dataclasses.replace(sc, seed=int(eff["seed"]))
    eff["seed"] = sc.seed
    eff.setdefault("arms", ["naive", "mixture"])
    eff.setdefault("reps", sc.n_replications)
    eff.setdefault("sizes", list(sc.sample_sizes))
    eff.setdefault("threads", 1)
    eff.setdefault("out_dir", "mixclass_out")
    for arm in eff["arms"]:
        simlab._arm_parts(arm, sc)
    mcmc_cfg = None
    if eff.get("mcmc"):
        d = {**sc.mcmc.__dict__, **eff["mcmc"]}
        mcmc_cfg = _section(McmcConfig, d, "mcmc")
    if int(eff["reps"]) < 1:
        raise ConfigurationError("reps: must be at least 1")
    out_dir = Path(eff["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "effective_config.json", eff)
    out = out_dir / f"study_{sc.name}.csv"
    rollup = simlab.run_study(sc, eff["arms"], out, sizes=eff["sizes"], reps=int(eff["reps"]),
                              mcmc=mcmc_cfg, n_jobs=int(eff["threads"]))
    print(f"{'arm':<22} {'n':>7} {'param':<8} {'reps':>5} {'mean':>10} {'coverage':>9} {'width':>10}")
    for r in rollup:
        cov = "" if r["coverage"] == "" else f"{r['coverage']:.3f}"
        print(f"{r['arm']:<22} {r['n']:>7} {r['param']:<8} {r['reps']:>5} {r['mean_estimate']:>10.4g} {cov:>9} {r['mean_width']:>10.4g}")
    flagged = [r for r in simlab.read_study(out) if r["status"] == "rhat_flag"]
    return EXIT_UNCONVERGED if flagged else EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mixclass", description="Regression with a misclassified categorical covariate.")
    p.add_argument("--version", action="version", version=f"mixclass {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags override its values")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("--out-dir")

    f = sub.add_parser("fit", parents=[common], help="fit a model to a CSV file")
    f.add_argument("--data", help="CSV with columns y, v_star[, v, x_1.., w_1..]")
    f.add_argument("--engine", choices=["mcmc", "em"])
    f.add_argument("--arm", action="append", choices=list(ARMS), help="model arm (repeatable)")
    f.add_argument("--level", type=float, help="credible level (default 0.95)")
    f.add_argument("--family", help="response family (default normal)")
    f.add_argument("--categories", type=int, help="number of categories K")
    f.set_defaults(func=cmd_fit)

    e = sub.add_parser("efficiency", parents=[common], help="Rasd surface over misclassification rates")
    e.add_argument("--effect", type=float, action="append", help="effect size alpha1/sigma (repeatable)")
    e.add_argument("--pi1", type=float)
    e.add_argument("--grid", type=int, help="number of interior grid points per axis")
    e.add_argument("--grid-values", help="explicit comma-separated rates (overrides --grid)")
    e.add_argument("--include-boundary", action="store_true", help="add rates 0 and 1")
    e.add_argument("--dedupe", action="store_true", help="keep only p01 <= p10")
    e.add_argument("--sigma", type=float)
    e.set_defaults(func=cmd_efficiency)

    s = sub.add_parser("study", parents=[common], help="run a simulation scenario")
    s.add_argument("scenario", nargs="?")
    s.add_argument("--arm", action="append", help="naive, true, known_q, mixture or mixture:<variant>")
    s.add_argument("--reps", type=int)
    s.add_argument("--sizes", help="comma-separated sample sizes")
    s.set_defaults(func=cmd_study)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (DataFileError, DomainError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
