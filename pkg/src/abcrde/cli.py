"""Command-line front end: ``abcrde <verb> --config run.yaml [flags]``.

Verbs: pilot, fit, eval, posterior, mle, sensitivity, diagnose, simulate,
summaries.  The configuration file is YAML validated against ``SCHEMA``
before any computation; see ``docs/config.md`` for the grammar.

Exit codes: 0 success, 2 configuration or usage error, 3 pilot, 4 training
design, 5 fitting, 6 inference, 7 estimator loading, 1 anything unexpected.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import math
import sys
import time
from pathlib import Path

import jsonschema
import numpy as np
import yaml
from scipy import stats

from . import design, infer, models
from .errors import FitRejectedError, NumericalInstabilityError
from .rde import LikelihoodEstimator, TrainingSet, rde_fit

log = logging.getLogger("abcrde")

EXIT_CONFIG, EXIT_PILOT, EXIT_DESIGN, EXIT_FIT, EXIT_INFER, EXIT_LOAD = 2, 3, 4, 5, 6, 7

# Stage ids for seed derivation: seed_k = SeedSequence([seed, k]).
STAGES = {"pilot": 1, "design": 2, "fit": 3, "posterior": 4, "mle": 5,
          "sensitivity": 6, "diagnose": 7, "simulate": 8, "projection": 9}


class StageError(Exception):
    def __init__(self, stage, message, code):
        self.stage, self.code = stage, code
        super().__init__(message)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

_num = {"type": "number"}
_int = {"type": "integer", "minimum": 0}
_pos_int = {"type": "integer", "minimum": 1}
_vec = {"type": "array", "items": _num, "minItems": 1}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required),
            "additionalProperties": False}


_prior = {"type": "array", "minItems": 1, "items": {
    "type": "object", "required": ["dist"],
    "properties": {"dist": {"enum": sorted(infer._PALETTE)}, "mean": _num, "sd": _num,
                   "shape": _num, "rate": _num, "low": _num, "high": _num},
    "additionalProperties": False}}

SCHEMA = _obj({
    "seed": _int,
    "model": _obj({
        "name": {"enum": ["toy", "stereology_spherical", "stereology_ellipsoidal"]},
        "params": _obj({"threshold": _num, "known_sd": _num, "sample_size": _pos_int,
                        "theta": _vec}),
        "observed_data_path": {"type": "string"},
    }, ["name"]),
    "pilot": _obj({
        "delta": _num, "lower": _vec, "upper": _vec,
        "target_accepted": _pos_int, "max_simulations": _pos_int, "seed": _int,
        "standardize": {"type": "boolean"}, "regression_simulations": _pos_int,
    }, ["delta", "lower", "upper"]),
    "design": _obj({
        "N": _pos_int, "seed": _int,
        "statistics": {"enum": ["quantile_spacing", "semi_automatic", "raw"]},
        "n_quantiles": {"type": "integer", "minimum": 2},
        "projection_refit": _int,
    }),
    "fit": _obj({
        "J": _pos_int, "J_candidates": {"type": "array", "items": _pos_int, "minItems": 1},
        "L": _pos_int, "L_candidates": {"type": "array", "items": _pos_int, "minItems": 1},
        "seed": _int,
        "tolerances": _obj({
            "moe": _obj({"max_iter": _pos_int, "tol": _num, "restarts": _pos_int}),
            "gmm": _obj({"max_iter": _pos_int, "tol": _num, "ridge": _num,
                         "restarts": _pos_int}),
        }),
    }),
    "infer": _obj({
        "prior": _prior,
        "chain": _obj({"T": _pos_int, "burn_in": _int, "init": _vec,
                       "proposal_cov": {"type": "array", "items": _vec},
                       "adapt": {"type": "boolean"}, "seed": _int,
                       "restrict_to_design": {"type": "boolean"},
                       "exact_oracle": {"type": "boolean"}}),
        "mle": _obj({"starts": {"type": "array", "items": _vec}, "n_starts": _pos_int,
                     "max_iter": _pos_int, "tol": _num, "seed": _int}),
        "sensitivity": {"type": "array", "items": _obj(
            {"label": {"type": "string"}, "prior": _prior}, ["label", "prior"])},
        "diagnose": _obj({"n_theta": _pos_int, "n_sims": _pos_int, "delta": _num,
                          "kernel": {"enum": ["indicator", "gaussian"]}, "seed": _int}),
        "histogram_bins": _pos_int,
    }),
    "output": _obj({"directory": {"type": "string"}}),
}, ["model"])


def load_config(path) -> dict:
    try:
        doc = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise StageError("config", f"cannot read {path}: {exc}", EXIT_CONFIG) from exc
    validate_config(doc)
    return doc


def validate_config(doc) -> None:
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise StageError("config", f"{where}: {exc.message}", EXIT_CONFIG) from exc
    pilot = doc.get("pilot")
    if pilot and len(pilot["lower"]) != len(pilot["upper"]):
        raise StageError("config", "pilot/lower and pilot/upper differ in length", EXIT_CONFIG)
    fit = doc.get("fit", {})
    for a, b in (("J", "J_candidates"), ("L", "L_candidates")):
        if a in fit and b in fit:
            raise StageError("config", f"fit: give {a} or {b}, not both", EXIT_CONFIG)
    inf = doc.get("infer", {})
    priors = [("infer/prior", inf["prior"])] if "prior" in inf else []
    priors += [(f"infer/sensitivity/{r['label']}", r["prior"]) for r in inf.get("sensitivity", [])]
    lengths = set()
    for where, spec in priors:
        try:
            lengths.add(infer.PriorSpec(spec).d)
        except ValueError as exc:
            raise StageError("config", f"{where}: {exc}", EXIT_CONFIG) from exc
    if len(lengths) > 1:
        raise StageError("config", "priors disagree on the parameter dimension", EXIT_CONFIG)


def stage_seed(seed: int, stage: str, section: dict | None = None) -> int:
    if section and "seed" in section:
        return int(section["seed"])
    return int(np.random.SeedSequence([int(seed), STAGES[stage]]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Model plumbing
# ---------------------------------------------------------------------------

def _shape_model(cfg):
    return cfg["model"]["name"].split("_", 1)[1]


def raw_simulator(cfg, n_quantiles=112) -> design.Simulator:
    name = cfg["model"]["name"]
    params = cfg["model"].get("params", {})
    if name == "toy":
        return design.toy_simulator(params.get("known_sd", 1.0), params.get("sample_size", 50))
    return design.stereology_simulator(_shape_model(cfg), params.get("threshold", 5.0),
                                       n_quantiles)


def simulator_for(cfg, statistics: dict | None) -> design.Simulator:
    """Simulator whose summaries match the recorded statistics definition."""
    statistics = statistics or {}
    raw = raw_simulator(cfg, statistics.get("n_quantiles", 112))
    proj = statistics.get("projection")
    if proj is None:
        return raw
    p = design.SemiAutomaticProjection.from_dict(proj)
    return design.Simulator(raw.simulate, lambda r: p.apply(raw.summarize(r)),
                            name=raw.name + "+semi_automatic")


def observed_raw(cfg):
    path = cfg["model"].get("observed_data_path")
    if path:
        return models.load_diameters(path)
    if cfg["model"]["name"].startswith("stereology"):
        return models.synthetic_dataset()
    raise StageError("config", "model/observed_data_path is required for this model",
                     EXIT_CONFIG)


def observed_summaries(cfg, statistics: dict | None = None):
    sim = simulator_for(cfg, statistics)
    return sim.summarize(observed_raw(cfg))


def _statistics_kind(cfg):
    default = "raw" if cfg["model"]["name"] == "toy" else "quantile_spacing"
    kind = cfg.get("design", {}).get("statistics", default)
    if cfg["model"]["name"] == "toy" and kind != "raw":
        raise StageError("config", "the toy model only supports design/statistics: raw",
                         EXIT_CONFIG)
    return kind


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------

def make_outdir(args, cfg, verb) -> Path:
    base = Path(args.out or cfg.get("output", {}).get("directory", "abcrde-out"))
    if args.overwrite:
        out = base / verb
    else:
        stamp = _dt.datetime.now().strftime("%Y%m%dT%H%M%S%f")
        out = base / verb / stamp
        if out.exists():
            raise StageError("output", f"{out} already exists", EXIT_CONFIG)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def histogram_rows(draws, bins):
    rows = []
    for j in range(draws.shape[1]):
        counts, edges = np.histogram(draws[:, j], bins=bins, density=True)
        rows += [[f"theta_{j + 1}", float(a), float(b), float(c)]
                 for a, b, c in zip(edges[:-1], edges[1:], counts)]
    return rows


def load_estimator(path) -> LikelihoodEstimator:
    try:
        return LikelihoodEstimator.load(path)
    except (OSError, ValueError, KeyError) as exc:
        raise StageError("load", f"cannot load estimator {path}: {exc}", EXIT_LOAD) from exc


def _prior_of(cfg, est) -> infer.PriorSpec:
    spec = cfg.get("infer", {}).get("prior")
    prior = infer.PriorSpec(spec) if spec else infer.PriorSpec.flat(est.d)
    if prior.d != est.d:
        raise StageError("config", f"prior has {prior.d} entries, estimator has d={est.d}",
                         EXIT_CONFIG)
    return prior


def _chain_config(cfg, seed) -> infer.ChainConfig:
    c = cfg.get("infer", {}).get("chain", {})
    return infer.ChainConfig(
        T=c.get("T", 500_000), burn_in=c.get("burn_in", 50_000), init=c.get("init"),
        proposal_cov=np.asarray(c["proposal_cov"]) if "proposal_cov" in c else None,
        adapt=c.get("adapt", True), seed=stage_seed(seed, "posterior", c))


# ---------------------------------------------------------------------------
# Verbs
# ---------------------------------------------------------------------------

def _pilot(cfg, seed):
    """Run the pilot; returns (proposal, statistics doc, pilot result, report)."""
    if "pilot" not in cfg:
        raise StageError("config", "a pilot section (delta, lower, upper) is required",
                         EXIT_CONFIG)
    p = cfg["pilot"]
    d_model = 1 if cfg["model"]["name"] == "toy" else 3
    if len(p["lower"]) != d_model:
        raise StageError("config", f"pilot bounds need {d_model} entries", EXIT_CONFIG)
    kind = _statistics_kind(cfg)
    n_q = cfg.get("design", {}).get("n_quantiles", 112)
    try:
        pcfg = design.PilotConfig(p["delta"], tuple(p["lower"]), tuple(p["upper"]),
                                  p.get("target_accepted", 1000),
                                  p.get("max_simulations", 100_000),
                                  stage_seed(seed, "pilot", p), p.get("standardize", False))
    except ValueError as exc:
        raise StageError("config", f"pilot: {exc}", EXIT_CONFIG) from exc
    raw = raw_simulator(cfg, n_q)
    statistics = {"kind": kind, "n_quantiles": n_q}
    try:
        S0_raw = raw.summarize(observed_raw(cfg))
        if kind == "semi_automatic":
            proj, reg, pil, h = design.semi_automatic_pilot(
                raw, S0_raw, pcfg, p.get("regression_simulations", 5000))
            statistics["projection"] = proj.to_dict()
        else:
            pil = design.pilot_sample(raw, S0_raw, pcfg)
            h = design.build_proposal(pil.thetas)
    except (design.PilotError, design.InsufficientPilotError) as exc:
        raise StageError("pilot", str(exc), EXIT_PILOT) from exc
    report = {"delta": p["delta"], "box": [p["lower"], p["upper"]], **pil.report()}
    return h, statistics, pil, report


def cmd_pilot(args, cfg):
    h, statistics, pil, report = _pilot(cfg, args.seed_value)
    out = make_outdir(args, cfg, "pilot")
    write_json(out / "proposal.json", {**h.to_dict(), "box": report["box"]})
    write_json(out / "statistics.json", statistics)
    write_json(out / "pilot_report.json", report)
    d = pil.thetas.shape[1]
    write_csv(out / "pilot.csv", [f"theta_{i + 1}" for i in range(d)]
              + [f"S_{j + 1}" for j in range(pil.summaries.shape[1])],
              np.hstack([pil.thetas, pil.summaries]).tolist())
    print(f"pilot: accepted {pil.n_accepted} of {pil.n_simulated} "
          f"(rate {pil.acceptance_rate:.4f}); wrote {out}")
    return 0


def _load_pilot(path):
    path = Path(path)
    try:
        doc = json.loads((path / "proposal.json").read_text())
        statistics = json.loads((path / "statistics.json").read_text())
    except (OSError, ValueError) as exc:
        raise StageError("load", f"cannot read pilot output in {path}: {exc}", EXIT_LOAD) from exc
    return design.TruncatedNormalProposal.from_dict(doc), doc.get("box"), statistics


def cmd_fit(args, cfg):
    seed = args.seed_value
    timings = {}
    t0 = time.perf_counter()
    if args.pilot:
        h, box, statistics = _load_pilot(args.pilot)
    else:
        h, statistics, _, report = _pilot(cfg, seed)
        box = report["box"]
    timings["pilot"] = time.perf_counter() - t0
    dcfg = cfg.get("design", {})
    raw = raw_simulator(cfg, statistics.get("n_quantiles", 112))
    refit = dcfg.get("projection_refit", 0)
    if statistics.get("kind") == "semi_automatic" and refit:
        try:
            proj = design.refit_projection(raw, h, refit, stage_seed(seed, "projection"))
        except (ValueError, RuntimeError) as exc:
            raise StageError("design", f"projection refit: {exc}", EXIT_DESIGN) from exc
        statistics = {**statistics, "projection": proj.to_dict()}
    sim = simulator_for(cfg, statistics)
    t1 = time.perf_counter()
    try:
        training = design.generate_training(sim, h, dcfg.get("N", 5000),
                                            stage_seed(seed, "design", dcfg), box=box)
    except (ValueError, RuntimeError) as exc:
        raise StageError("design", str(exc), EXIT_DESIGN) from exc
    timings["training"] = time.perf_counter() - t1
    f = cfg.get("fit", {})
    tol = f.get("tolerances", {})
    t2 = time.perf_counter()
    try:
        est = rde_fit(training, f.get("J", f.get("J_candidates", 3)),
                      f.get("L", f.get("L_candidates", 5)),
                      moe_config=tol.get("moe"), gmm_config=tol.get("gmm"),
                      seed=stage_seed(seed, "fit", f))
    except FitRejectedError as exc:
        raise StageError(f"fit/{exc.stage or 'rde'}", str(exc), EXIT_FIT) from exc
    timings["fit"] = time.perf_counter() - t2
    est = LikelihoodEstimator(est.margins, est.joint,
                              {**est.meta, "statistics": statistics,
                               "model": {"name": cfg["model"]["name"],
                                         "params": cfg["model"].get("params", {})}})
    out = make_outdir(args, cfg, "fit")
    est.save(out / "estimator.json")
    training.to_csv(out / "training.csv")
    write_json(out / "fit_report.json", est.meta["diagnostics"])
    write_json(out / "timings.json", timings)
    print(f"fit: J={est.meta['J']} L={est.meta['L']} from N={training.n} rows; wrote {out}")
    return 0


def _estimator_and_S0(args, cfg):
    if not args.estimator:
        raise StageError("config", "--estimator PATH is required for this verb", EXIT_CONFIG)
    est = load_estimator(args.estimator)
    try:
        S0 = observed_summaries(cfg, est.meta.get("statistics"))
    except ValueError as exc:
        raise StageError("design", f"observed summaries: {exc}", EXIT_DESIGN) from exc
    if S0.shape != (est.k,):
        raise StageError("load", f"observed summaries have length {S0.size}, estimator "
                         f"expects k={est.k}", EXIT_LOAD)
    return est, S0


def _theta_rows(args, d):
    if args.theta:
        rows = [[float(v) for v in t.split(",")] for t in args.theta]
    elif args.theta_file:
        rows = np.loadtxt(args.theta_file, delimiter=",", ndmin=2, skiprows=1).tolist()
    else:
        raise StageError("config", "give --theta or --theta-file", EXIT_CONFIG)
    if any(len(r) != d for r in rows):
        raise StageError("config", f"each theta needs {d} values", EXIT_CONFIG)
    return np.asarray(rows)


def cmd_eval(args, cfg):
    est, S0 = _estimator_and_S0(args, cfg)
    T = _theta_rows(args, est.d)
    try:
        ll = est.log_likelihood(S0, T)
    except (ValueError, NumericalInstabilityError) as exc:
        raise StageError("infer", str(exc), EXIT_INFER) from exc
    out = make_outdir(args, cfg, "eval")
    write_csv(out / "loglik.csv", [f"theta_{i + 1}" for i in range(est.d)] + ["loglik"],
              np.column_stack([T, np.atleast_1d(ll)]).tolist())
    print(f"eval: {T.shape[0]} values; wrote {out}")
    return 0


def _oracle_quantiles(cfg, prior, S0, probs, seed):
    """Exact posterior quantiles where an oracle exists, else ``None``."""
    name = cfg["model"]["name"]
    chain_cfg = cfg.get("infer", {}).get("chain", {})
    if name == "toy":
        comp = prior.components[0]
        if comp["dist"] == "normal":
            pr = {"mean": comp["mean"], "sd": comp["sd"]}
        elif comp["dist"] == "flat":
            pr = {"mean": 0.0, "sd": math.inf}
        else:
            return None
        params = cfg["model"].get("params", {})
        p = models.ConjugateToyParams(0.0, params.get("known_sd", 1.0),
                                      params.get("sample_size", 50))
        post = models.toy_exact_posterior(pr, S0, p)
        return stats.norm.ppf(probs, post["mean"], post["sd"])[:, None]
    if name == "stereology_spherical" and chain_cfg.get("exact_oracle"):
        obs = observed_raw(cfg)
        threshold = cfg["model"].get("params", {}).get("threshold", 5.0)

        def ll(theta, o):
            if theta[0] <= 0 or theta[1] <= 0:
                return -math.inf
            return models.spherical_exact_loglik(
                models.StereologyParams.from_theta(theta, "spherical", threshold), o)

        ccfg = _chain_config(cfg, seed)
        if ccfg.init is None:
            raise StageError("config", "infer/chain/init is required for the exact oracle",
                             EXIT_CONFIG)
        chain = infer.exact_mcmc_posterior(ll, obs, prior, ccfg)
        return np.quantile(chain.draws, probs, axis=0, method="linear")
    return None


def cmd_posterior(args, cfg):
    est, S0 = _estimator_and_S0(args, cfg)
    prior = _prior_of(cfg, est)
    c = cfg.get("infer", {}).get("chain", {})
    try:
        chain = infer.mcmc_posterior(est, S0, prior, _chain_config(cfg, args.seed_value),
                                     restrict_to_design=c.get("restrict_to_design", True))
    except (ValueError, NumericalInstabilityError) as exc:
        raise StageError("infer", str(exc), EXIT_INFER) from exc
    out = make_outdir(args, cfg, "posterior")
    chain.to_csv(out / "chain.csv")
    infer.write_summaries_csv(infer.posterior_summaries(chain), out / "summary.csv")
    bins = cfg.get("infer", {}).get("histogram_bins", 50)
    write_csv(out / "histogram.csv", ["parameter", "left", "right", "density"],
              histogram_rows(chain.draws, bins))
    probs = np.linspace(0.01, 0.99, 99)
    oracle = _oracle_quantiles(cfg, prior, S0, probs, args.seed_value)
    if oracle is not None:
        rde_q = np.quantile(chain.draws, probs, axis=0, method="linear")
        rows = [[f"theta_{j + 1}", float(p), float(a), float(b)]
                for j in range(est.d) for p, a, b in zip(probs, rde_q[:, j], oracle[:, j])]
        write_csv(out / "qq.csv", ["parameter", "prob", "rde", "exact"], rows)
    write_json(out / "report.json", {"acceptance_rate": chain.acceptance_rate,
                                     "config": chain.config, "warnings": chain.warnings,
                                     "likelihood_failures": chain.n_likelihood_failures})
    print(f"posterior: T={chain.T} acceptance {chain.acceptance_rate:.3f}; wrote {out}")
    return 0


def cmd_mle(args, cfg):
    est, S0 = _estimator_and_S0(args, cfg)
    m = cfg.get("infer", {}).get("mle", {})
    try:
        res = infer.mle(est, S0, starts=m.get("starts"), n_starts=m.get("n_starts", 8),
                        seed=stage_seed(args.seed_value, "mle", m),
                        max_iter=m.get("max_iter", 5000), tol=m.get("tol", 1e-10))
    except (ValueError, infer.MLEError) as exc:
        raise StageError("infer", str(exc), EXIT_INFER) from exc
    out = make_outdir(args, cfg, "mle")
    write_json(out / "mle.json", res.to_dict())
    rows = [[f"theta_{i + 1}", float(t)] + (list(res.wald_ci[i]) if res.wald_ci else ["", ""])
            for i, t in enumerate(res.theta_hat)]
    write_csv(out / "mle.csv", ["parameter", "mle", "lower", "upper"], rows)
    print(f"mle: theta_hat={res.theta_hat.tolist()} hessian_ok={res.hessian_ok}; wrote {out}")
    return 0


def cmd_sensitivity(args, cfg):
    rows_cfg = cfg.get("infer", {}).get("sensitivity", [])
    if not rows_cfg:
        print("sensitivity: the infer/sensitivity list is empty; nothing to do")
        return 0
    est, S0 = _estimator_and_S0(args, cfg)
    priors = []
    for r in rows_cfg:
        try:
            pr = infer.PriorSpec(r["prior"])
        except ValueError as exc:
            raise StageError("config", f"sensitivity {r['label']}: {exc}", EXIT_CONFIG) from exc
        priors.append((r["label"], pr))
    ccfg = _chain_config(cfg, args.seed_value)
    ccfg.seed = stage_seed(args.seed_value, "sensitivity",
                           cfg.get("infer", {}).get("chain", {}))
    table = infer.sensitivity(est, S0, priors, ccfg, threads=args.threads)
    out = make_outdir(args, cfg, "sensitivity")
    rows = []
    for row in table:
        if row["error"]:
            rows.append([row["label"], "", "", "", "", row["error"]])
        for s in row["summaries"]:
            rows.append([row["label"], s["parameter"], s["q0.025"], s["mean"], s["q0.975"], ""])
    write_csv(out / "sensitivity.csv",
              ["label", "parameter", "0.025", "mean", "0.975", "error"], rows)
    failed = sum(1 for r in table if r["error"])
    print(f"sensitivity: {len(table)} priors ({failed} failed); wrote {out}")
    return 0


def cmd_diagnose(args, cfg):
    est, S0 = _estimator_and_S0(args, cfg)
    dg = cfg.get("infer", {}).get("diagnose", {})
    h = infer._design_of(est)
    if h is None:
        raise StageError("load", "estimator records no design density", EXIT_LOAD)
    rng = np.random.default_rng(stage_seed(args.seed_value, "diagnose", dg))
    thetas = h.sample(dg.get("n_theta", 50), rng)
    sim = simulator_for(cfg, est.meta.get("statistics"))
    delta = dg.get("delta")
    if delta is None:
        raise StageError("config", "infer/diagnose/delta is required", EXIT_CONFIG)
    mc, se, rde_l = [], [], []
    for t in thetas:
        v, e = infer.mc_likelihood(sim, t, S0, delta, dg.get("n_sims", 1000),
                                   dg.get("kernel", "gaussian"), rng)
        mc.append(v)
        se.append(e)
        rde_l.append(math.exp(est.log_likelihood(S0, t)))
    rho = float(stats.spearmanr(mc, rde_l).statistic)
    out = make_outdir(args, cfg, "diagnose")
    write_csv(out / "diagnose.csv", [f"theta_{i + 1}" for i in range(est.d)]
              + ["mc_likelihood", "mc_se", "rde_likelihood"],
              np.column_stack([thetas, mc, se, rde_l]).tolist())
    write_json(out / "diagnose_report.json", {"spearman": rho, "n_theta": len(thetas),
                                              "delta": delta, "kernel": dg.get("kernel", "gaussian")})
    print(f"diagnose: rank correlation {rho:.3f}; wrote {out}")
    return 0


def cmd_simulate(args, cfg):
    params = cfg["model"].get("params", {})
    theta = ([float(v) for v in args.theta[0].split(",")] if args.theta
             else params.get("theta"))
    if theta is None:
        raise StageError("config", "give --theta or model/params/theta", EXIT_CONFIG)
    raw = raw_simulator(cfg)
    rng = np.random.default_rng(stage_seed(args.seed_value, "simulate"))
    try:
        data = raw.simulate(np.asarray(theta, dtype=float), rng)
    except ValueError as exc:
        raise StageError("simulate", str(exc), EXIT_DESIGN) from exc
    out = make_outdir(args, cfg, "simulate")
    models.save_diameters(out / "data.txt", data)
    print(f"simulate: {len(data)} values at theta={theta}; wrote {out}")
    return 0


def cmd_summaries(args, cfg):
    statistics = None
    if args.estimator:
        statistics = load_estimator(args.estimator).meta.get("statistics")
    try:
        S = observed_summaries(cfg, statistics)
    except ValueError as exc:
        raise StageError("design", str(exc), EXIT_DESIGN) from exc
    out = make_outdir(args, cfg, "summaries")
    write_csv(out / "summaries.csv", [f"S_{j + 1}" for j in range(S.size)], [S.tolist()])
    print(f"summaries: k={S.size}; wrote {out}")
    return 0


VERBS = {"pilot": cmd_pilot, "fit": cmd_fit, "eval": cmd_eval, "posterior": cmd_posterior,
         "mle": cmd_mle, "sensitivity": cmd_sensitivity, "diagnose": cmd_diagnose,
         "simulate": cmd_simulate, "summaries": cmd_summaries}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="abcrde", description=__doc__.split("\n")[0])
    ap.add_argument("verb", choices=sorted(VERBS))
    ap.add_argument("--config", required=True, help="YAML run configuration")
    ap.add_argument("--seed", type=int, help="global seed (overrides the config)")
    ap.add_argument("--out", help="output base directory (overrides output/directory)")
    ap.add_argument("--overwrite", action="store_true",
                    help="write into <out>/<verb> instead of a fresh timestamped directory")
    ap.add_argument("--threads", type=int, default=1, help="worker threads for sensitivity rows")
    ap.add_argument("--estimator", help="estimator.json written by 'fit'")
    ap.add_argument("--pilot", help="pilot output directory to reuse in 'fit'")
    ap.add_argument("--theta", action="append", help="comma-separated parameter vector")
    ap.add_argument("--theta-file", help="CSV of parameter rows (with header) for 'eval'")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        args.seed_value = args.seed if args.seed is not None else cfg.get("seed", 0)
        if args.threads < 1:
            raise StageError("config", "--threads must be at least 1", EXIT_CONFIG)
        return VERBS[args.verb](args, cfg)
    except StageError as exc:
        print(f"error[{exc.stage}]: {exc}", file=sys.stderr)
        return exc.code
    except Exception as exc:  # defects: report and fail without a traceback dump
        log.debug("unexpected failure", exc_info=True)
        print(f"error[internal]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
