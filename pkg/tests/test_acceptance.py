"""Acceptance criteria 1-9, one recorded pass/fail line per criterion.

The stereology pipelines run once per module: semi-automatic pilot at
delta = 20 (seed 12), 5000 training rows (seed 14), J = 6 / L = 5 fit
(seed 15) and 50000-step chains (seed 16) on the synthetic dataset.
"""
import math
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import integrate, stats

from abcrde import design, infer, models
from abcrde.errors import FitRejectedError, NumericalInstabilityError
from abcrde.gmm import GaussianMixture, fit_gmm, gmm_condition
from abcrde.moe import moe_fit
from abcrde.rde import TrainingSet, direct_gmm_log_likelihood, rde_fit

pytestmark = pytest.mark.slow

ROOT = Path(__file__).resolve().parents[1]
PILOT_SEED, TRAIN_SEED, FIT_SEED, CHAIN_SEED = 12, 14, 15, 16
SPHERICAL_BOX = ((5.0, 0.2, -0.6), (100.0, 5.0, 0.6))
ELLIPSOIDAL_BOX = ((5.0, 0.2, -0.6), (300.0, 5.0, 0.6))
SENSITIVITY_A = (100, 1, 0.5, 0.1)
NAMES = ["lambda", "sigma", "xi"]


# -- pipelines --------------------------------------------------------------

@pytest.fixture(scope="module")
def toy():
    t0 = time.perf_counter()
    sim = design.toy_simulator()
    S0 = sim.summarize(np.loadtxt(ROOT / "configs" / "toy_observed.txt"))
    box = ((-3.0,), (3.0,))
    pil = design.pilot_sample(sim, S0, design.PilotConfig(0.05, *box, 500, 20_000, seed=PILOT_SEED))
    h = design.build_proposal(pil.thetas)
    training = design.generate_training(sim, h, 5000, seed=TRAIN_SEED, box=box)
    est = rde_fit(training, 2, [1, 2, 3], seed=FIT_SEED)
    chain = infer.mcmc_posterior(est, S0, infer.PriorSpec.flat(1),
                                 infer.ChainConfig(T=50_000, burn_in=5000, seed=CHAIN_SEED))
    return {"sim": sim, "S0": S0, "h": h, "est": est, "chain": chain,
            "runtime": time.perf_counter() - t0}


def stereology_pipeline(shape_model, box):
    t0 = time.perf_counter()
    obs = models.synthetic_dataset()
    raw = design.stereology_simulator(shape_model)
    S0_raw = raw.summarize(obs)
    cfg = design.PilotConfig(20.0, *box, target_accepted=1000, max_simulations=100_000,
                             seed=PILOT_SEED)
    proj, _, _, h = design.semi_automatic_pilot(raw, S0_raw, cfg)
    sim = design.stereology_simulator(shape_model, projection=proj)
    training = design.generate_training(sim, h, 5000, seed=TRAIN_SEED, box=box)
    est = rde_fit(training, 6, 5, seed=FIT_SEED)
    return {"obs": obs, "raw": raw, "S0_raw": S0_raw, "proj": proj, "h": h,
            "S0": proj.apply(S0_raw), "est": est, "fit_time": time.perf_counter() - t0}


def chain_config():
    return infer.ChainConfig(T=50_000, burn_in=5000, seed=CHAIN_SEED)


@pytest.fixture(scope="module")
def spherical():
    run = stereology_pipeline("spherical", SPHERICAL_BOX)
    t0 = time.perf_counter()
    priors = [(f"a={a}", infer.stereology_prior(a)) for a in SENSITIVITY_A]
    run["sensitivity"] = infer.sensitivity(run["est"], run["S0"], priors, chain_config(),
                                           names=NAMES, threads=4)
    run["runtime"] = run["fit_time"] + time.perf_counter() - t0
    return run


@pytest.fixture(scope="module")
def exact_chain(spherical):
    def loglik(theta, obs):
        if theta[0] <= 0 or theta[1] <= 0:
            return -math.inf
        return models.spherical_exact_loglik(models.StereologyParams.from_theta(theta), obs)

    cfg = infer.ChainConfig(T=50_000, burn_in=5000, init=models.SYNTHETIC_THETA0, seed=CHAIN_SEED)
    return infer.exact_mcmc_posterior(loglik, spherical["obs"], infer.stereology_prior(100), cfg)


def means(summaries):
    return np.array([s["mean"] for s in summaries])


# -- 1. oracle-exact toy posterior --------------------------------------------

def test_criterion_1_toy_posterior(toy, criterion):
    exact = models.toy_exact_posterior({"mean": 0.0, "sd": math.inf}, toy["S0"],
                                       models.ConjugateToyParams(0.0))
    x = toy["chain"].draws[:, 0]
    dm, rs = abs(x.mean() - exact["mean"]), x.std(ddof=1) / exact["sd"] - 1
    ok = criterion(1, dm < 0.05 and abs(rs) < 0.10 and toy["runtime"] < 120,
                   f"|mean err| {dm:.4f} (< 0.05), sd rel err {rs:+.3f} (< 10%), "
                   f"J={toy['est'].meta['J']} L={toy['est'].meta['L']}, "
                   f"runtime {toy['runtime']:.0f}s (< 120s)")
    assert ok


# -- 2. spherical stereology against the exact likelihood ---------------------

def test_criterion_2_spherical_vs_exact(spherical, exact_chain, criterion):
    rde_mean = means(spherical["sensitivity"][0]["summaries"])
    exact_mean = exact_chain.draws.mean(axis=0)
    rel = np.abs(rde_mean[:2] / exact_mean[:2] - 1)
    dxi = abs(rde_mean[2] - exact_mean[2])
    in_band = 25.00 < rde_mean[0] < 39.29
    ok = criterion(2, bool(np.all(rel < 0.15)) and dxi < 0.05 and in_band
                   and spherical["runtime"] < 1800,
                   f"RDE means {np.round(rde_mean, 3).tolist()} vs exact "
                   f"{np.round(exact_mean, 3).tolist()}; rel err lambda {rel[0]:.3f}, "
                   f"sigma {rel[1]:.3f} (< 0.15); |xi err| {dxi:.3f} (< 0.05); "
                   f"lambda in (25.00, 39.29): {in_band}; runtime {spherical['runtime']:.0f}s")
    assert ok


# -- 3. prior sensitivity structure ------------------------------------------

def test_criterion_3_sensitivity_structure(spherical, criterion):
    rows = spherical["sensitivity"]
    assert not any(r["error"] for r in rows)
    widths = [r["summaries"][2]["q0.975"] - r["summaries"][2]["q0.025"] for r in rows]
    monotone = all(b <= a for a, b in zip(widths, widths[1:]))
    w_change = abs(widths[1] / widths[0] - 1)
    ok = criterion(3, monotone and w_change < 0.10,
                   f"xi widths for a={list(SENSITIVITY_A)}: {np.round(widths, 3).tolist()}; "
                   f"non-increasing: {monotone}; a=100 vs a=1 width change {w_change:.3f} (< 0.10)")
    assert ok


# -- 4. ellipsoidal ordering --------------------------------------------------

def test_criterion_4_ellipsoidal_exceeds_spherical(spherical, criterion):
    run = stereology_pipeline("ellipsoidal", ELLIPSOIDAL_BOX)
    chain = infer.mcmc_posterior(run["est"], run["S0"], infer.stereology_prior(100), chain_config())
    lam_e = chain.draws[:, 0].mean()
    lam_s = means(spherical["sensitivity"][0]["summaries"])[0]
    ok = criterion(4, lam_e >= 2 * lam_s,
                   f"posterior mean lambda ellipsoidal {lam_e:.2f} vs spherical {lam_s:.2f}, "
                   f"ratio {lam_e / lam_s:.2f} (>= 2)")
    assert ok


# -- 5. conditional mixture against grid quadrature --------------------------

def random_mixture(rng, L):
    covs = []
    for _ in range(L):
        A = rng.normal(size=(2, 2))
        covs.append(A @ A.T + 0.5 * np.eye(2))
    return GaussianMixture(rng.dirichlet(np.ones(L)), rng.normal(scale=2.0, size=(L, 2)),
                           np.array(covs))


def test_criterion_5_conditional_quadrature(criterion):
    worst = 0.0
    for L in (1, 2, 3):
        rng = np.random.default_rng(100 + L)
        g = random_mixture(rng, L)
        for a, b in rng.normal(scale=1.5, size=(50, 2)):
            got = math.exp(gmm_condition(g, [b], [1]).log_density(np.array([a])))
            marg = integrate.quad(lambda t: math.exp(g.log_density(np.array([t, b]))),
                                  -np.inf, np.inf, epsabs=0, epsrel=1e-12, limit=200)[0]
            ratio = math.exp(g.log_density(np.array([a, b]))) / marg
            worst = max(worst, abs(got / ratio - 1))
    ok = criterion(5, worst < 1e-6, f"max relative error {worst:.2e} over 150 points (< 1e-6)")
    assert ok


# -- 6. EM monotonicity ------------------------------------------------------

def max_decrease(trace):
    return float(max(0.0, -np.min(np.diff(trace)))) if len(trace) > 1 else 0.0


def test_criterion_6_em_monotone(criterion):
    worst_gmm = worst_moe = 0.0
    for r in range(100):
        rng = np.random.default_rng(1000 + r)
        L, p = int(rng.integers(1, 5)), int(rng.integers(1, 4))
        X = rng.normal(size=(400, p)) + rng.choice([-3.0, 0.0, 3.0], size=(400, p))
        worst_gmm = max(worst_gmm, max_decrease(fit_gmm(X, L, restarts=1, seed=r,
                                                        max_iter=300).report.trace))
        th = rng.uniform(-2, 2, size=(400, int(rng.integers(1, 4))))
        s = (th @ rng.normal(size=th.shape[1])) * rng.choice([-1, 1], size=400) \
            + np.exp(0.3 * th[:, 0]) * rng.normal(size=400)
        worst_moe = max(worst_moe, max_decrease(moe_fit(th, s, int(rng.integers(1, 4)), restarts=1,
                                                        seed=r, max_iter=200).report.trace))
    ok = criterion(6, worst_gmm <= 1e-9 and worst_moe <= 1e-9,
                   f"largest per-iteration decrease gmm {worst_gmm:.1e}, moe {worst_moe:.1e} "
                   f"over 100 fits each (<= 1e-9)")
    assert ok


# -- 7. transform quality ----------------------------------------------------

def transform_quality(est):
    diag = est.meta["diagnostics"]
    return min(r["pvalue"] for r in diag["ks"]), diag["clamp_fraction"]


def test_criterion_7_transform_quality(toy, spherical, criterion):
    parts, ok = [], True
    for name, run in (("toy", toy), ("spherical", spherical)):
        p, clamp = transform_quality(run["est"])
        ok &= p > 0.01 and clamp < 1e-3
        parts.append(f"{name}: min KS p {p:.3f} (> 0.01), clamps {clamp:.2e} (< 1e-3)")
    assert criterion(7, ok, "; ".join(parts))


# -- 8. Monte Carlo likelihood diagnostic -----------------------------------

def test_criterion_8_mc_likelihood_rank_agreement(toy, criterion):
    rng = np.random.default_rng(CHAIN_SEED)
    thetas = toy["h"].sample(50, rng)
    mc = [infer.mc_likelihood(toy["sim"], t, toy["S0"], 0.05, 2000, "gaussian", rng)[0]
          for t in thetas]
    rde = np.exp(toy["est"].log_likelihood(np.repeat(toy["S0"][None], 50, axis=0), thetas))
    rho = float(stats.spearmanr(mc, rde).statistic)
    assert criterion(8, rho > 0.9, f"Spearman rank correlation {rho:.3f} over 50 draws (> 0.9)")


# -- 9. direct joint-mixture baseline instability ----------------------------

def direct_outcomes(training, S0, thetas, seeds, **gmm_config):
    failures = 0
    for seed in seeds:
        try:
            ll = direct_gmm_log_likelihood(training, 5, np.repeat(S0[None], len(thetas), axis=0),
                                           thetas, seed=seed, **gmm_config)
            failures += not np.all(np.isfinite(ll))
        except (FitRejectedError, NumericalInstabilityError):
            failures += 1
    return failures


def test_criterion_9_direct_gmm_instability(spherical, criterion):
    raw_training = design.generate_training(spherical["raw"], spherical["h"], 5000,
                                            seed=TRAIN_SEED, box=SPHERICAL_BOX)
    proj = spherical["proj"]
    small = TrainingSet(proj.apply(raw_training.summaries), raw_training.parameters)
    thetas = spherical["h"].sample(20, np.random.default_rng(3))
    seeds = range(5)
    fail_small = direct_outcomes(small, spherical["S0"], thetas, seeds, ridge=0.0)
    fail_large = direct_outcomes(raw_training, spherical["S0_raw"], thetas, seeds, ridge=0.0)
    fail_default = direct_outcomes(raw_training, spherical["S0_raw"], thetas, [0])
    ok = criterion(9, fail_small == 0 and fail_large > 0,
                   f"unregularized direct fit: k=3 failed {fail_small}/5, "
                   f"k=112 failed {fail_large}/5 (rate {fail_large / 5:.1f}); "
                   f"with the default ridge k=112 failed {fail_default}/1")
    assert ok
