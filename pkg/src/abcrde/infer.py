"""Inference drivers over a fitted likelihood estimator.

Random-walk Metropolis (with burn-in-only adaptation), Nelder-Mead maximum
likelihood with Wald intervals, prior-sensitivity sweeps, posterior
summaries, and the kernel Monte Carlo likelihood used as a diagnostic.
"""
from __future__ import annotations

import csv
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import optimize, stats

from .design import TruncatedNormalProposal, proposal_sample
from .errors import NumericalInstabilityError
from .rde import LikelihoodEstimator

log = logging.getLogger(__name__)

TARGET_ACCEPT = 0.234


class InitOutsideSupportError(ValueError):
    pass


class MLEError(RuntimeError):
    def __init__(self, message, trace):
        self.trace = trace
        super().__init__(message)


# ---------------------------------------------------------------------------
# Priors
# ---------------------------------------------------------------------------

_PALETTE = {
    "normal": ("mean", "sd"),
    "lognormal": ("mean", "sd"),  # normal on log(theta), density stated on theta
    "gamma": ("shape", "rate"),
    "uniform": ("low", "high"),
    "flat": (),
}


@dataclass(frozen=True)
class PriorSpec:
    """Independent per-parameter priors.

    Each entry is a mapping such as ``{"dist": "normal", "mean": 0, "sd": 1}``.
    ``lognormal`` puts a normal on ``log(theta)`` and includes the Jacobian,
    ``gamma`` uses shape and rate, and ``flat`` is the improper constant.
    """

    components: tuple

    def __init__(self, components):
        comps = []
        for c in components:
            c = dict(c)
            kind = c.get("dist")
            if kind not in _PALETTE:
                raise ValueError(f"unknown prior {kind!r}; choose from {sorted(_PALETTE)}")
            extra = set(c) - {"dist", *_PALETTE[kind]}
            if extra:
                raise ValueError(f"unexpected keys {sorted(extra)} for {kind} prior")
            for key in _PALETTE[kind]:
                if key not in c or not np.isfinite(float(c[key])):
                    raise ValueError(f"{kind} prior needs finite {key!r}")
                c[key] = float(c[key])
            if kind in ("normal", "lognormal") and c["sd"] <= 0:
                raise ValueError("sd must be positive")
            if kind == "gamma" and (c["shape"] <= 0 or c["rate"] <= 0):
                raise ValueError("gamma shape and rate must be positive")
            if kind == "uniform" and not c["low"] < c["high"]:
                raise ValueError("uniform needs low < high")
            comps.append(c)
        object.__setattr__(self, "components", tuple(comps))

    @property
    def d(self) -> int:
        return len(self.components)

    def log_density(self, theta) -> float:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.d,):
            raise ValueError(f"theta must have length {self.d}")
        total = 0.0
        for c, x in zip(self.components, theta):
            kind = c["dist"]
            if kind == "normal":
                total += stats.norm.logpdf(x, c["mean"], c["sd"])
            elif kind == "lognormal":
                if x <= 0:
                    return -math.inf
                total += stats.norm.logpdf(math.log(x), c["mean"], c["sd"]) - math.log(x)
            elif kind == "gamma":
                if x <= 0:
                    return -math.inf
                total += stats.gamma.logpdf(x, c["shape"], scale=1.0 / c["rate"])
            elif kind == "uniform":
                if not c["low"] <= x <= c["high"]:
                    return -math.inf
                total -= math.log(c["high"] - c["low"])
        return float(total)

    def to_list(self):
        return [dict(c) for c in self.components]

    @classmethod
    def flat(cls, d: int) -> "PriorSpec":
        return cls([{"dist": "flat"}] * d)


def stereology_prior(xi_sd: float = 100.0) -> PriorSpec:
    """Vague priors on (lambda, sigma, xi) with ``xi ~ N(0, xi_sd^2)``."""
    return PriorSpec([{"dist": "lognormal", "mean": 0.0, "sd": 100.0},
                      {"dist": "gamma", "shape": 0.01, "rate": 1e-4},
                      {"dist": "normal", "mean": 0.0, "sd": xi_sd}])


# ---------------------------------------------------------------------------
# Metropolis
# ---------------------------------------------------------------------------

@dataclass
class ChainConfig:
    """Chain settings; the default length is the full profile, 50000/5000 the desk one."""

    T: int = 500_000
    burn_in: int = 50_000
    init: Sequence[float] | None = None
    proposal_cov: np.ndarray | None = None
    adapt: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.T < 1 or self.burn_in < 0:
            raise ValueError("T must be >= 1 and burn_in >= 0")


@dataclass
class Chain:
    draws: np.ndarray
    log_posts: np.ndarray
    acceptance_rate: float
    config: dict
    n_likelihood_failures: int = 0
    warnings: list = field(default_factory=list)

    @property
    def T(self) -> int:
        return self.draws.shape[0]

    def to_csv(self, path) -> None:
        d = self.draws.shape[1]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", *[f"theta_{i + 1}" for i in range(d)], "log_post"])
            for i, (row, lp) in enumerate(zip(self.draws, self.log_posts)):
                w.writerow([i, *map(repr, row.tolist()), repr(float(lp))])

    @classmethod
    def from_csv(cls, path) -> "Chain":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, 1:-1], data[:, -1], math.nan, {})


def _design_of(est) -> TruncatedNormalProposal | None:
    doc = getattr(est, "meta", {}).get("provenance", {}).get("design")
    if doc and doc.get("type") == "truncated_normal":
        return TruncatedNormalProposal.from_dict(doc)
    return None


def design_support(est) -> Callable[[np.ndarray], bool] | None:
    """Membership test for the region the estimator's training design covered.

    The region is the design ellipsoid, intersected with the pilot box when
    one was recorded.  Returns ``None`` if the estimator records no design.
    """
    h = _design_of(est)
    if h is None:
        return None
    box = est.meta["provenance"]["design"].get("box")
    lo, hi = (np.asarray(b, dtype=float) for b in box) if box else (None, None)
    prec = np.linalg.inv(h.cov)

    def inside(theta) -> bool:
        diff = np.asarray(theta, dtype=float) - h.mean
        if diff @ prec @ diff > h.radius2:
            return False
        return lo is None or bool(np.all((lo <= theta) & (theta <= hi)))

    return inside


def metropolis(log_target: Callable[[np.ndarray], float], cfg: ChainConfig) -> Chain:
    """Random-walk Metropolis with Gaussian proposals.

    With ``cfg.adapt`` the proposal covariance tracks the running chain
    covariance and a global scale is tuned toward acceptance 0.234 during
    burn-in only; afterwards the kernel is fixed.
    """
    if cfg.init is None:
        raise ValueError("an initial value is required")
    x = np.asarray(cfg.init, dtype=float).copy()
    d = x.size
    lp = log_target(x)
    if not np.isfinite(lp):
        raise InitOutsideSupportError(f"initial value {x.tolist()} has log target {lp}")
    base = (np.asarray(cfg.proposal_cov, dtype=float) if cfg.proposal_cov is not None
            else np.diag((0.1 * np.maximum(np.abs(x), 1e-2)) ** 2))
    base = np.atleast_2d(base)
    rng = np.random.default_rng(cfg.seed)
    log_scale = 0.0
    mean, cov = x.copy(), base.copy()
    chol = np.linalg.cholesky(base)
    total = cfg.burn_in + cfg.T
    draws = np.empty((cfg.T, d))
    lps = np.empty(cfg.T)
    accepted = 0
    failures = 0
    for t in range(total):
        prop = x + chol @ rng.standard_normal(d)
        try:
            lp_prop = log_target(prop)
        except (NumericalInstabilityError, ValueError, ArithmeticError):
            lp_prop = -math.inf
            failures += 1
        log_u = math.log(rng.uniform()) if lp_prop > -math.inf else 0.0
        alpha = min(1.0, math.exp(min(0.0, lp_prop - lp))) if lp_prop > -math.inf else 0.0
        if lp_prop > -math.inf and log_u < lp_prop - lp:
            x, lp = prop, lp_prop
            if t >= cfg.burn_in:
                accepted += 1
        if t < cfg.burn_in:
            if cfg.adapt:
                n = t + 2
                delta = x - mean
                mean = mean + delta / n
                cov = cov + (np.outer(delta, x - mean) - cov) / n
                log_scale += (alpha - TARGET_ACCEPT) / (t + 1) ** 0.6
                # Before enough history the base covariance stands in for the chain's.
                s2 = math.exp(2 * log_scale) * 2.38 ** 2 / d
                target = (cov + 1e-10 * np.diag(np.diag(base))) if t >= 20 * d else base * d / 2.38 ** 2
                try:
                    chol = np.linalg.cholesky(s2 * target)
                except np.linalg.LinAlgError:
                    pass
        else:
            draws[t - cfg.burn_in] = x
            lps[t - cfg.burn_in] = lp
    rate = accepted / cfg.T
    notes = []
    if rate < 1e-4:
        msg = (f"chain accepted {accepted} of {cfg.T} proposals; proposal scale "
               f"{np.sqrt(np.diag(chol @ chol.T)).tolist()} may be badly tuned")
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        notes.append(msg)
    config = {"T": cfg.T, "burn_in": cfg.burn_in, "seed": cfg.seed, "adapt": cfg.adapt,
              "init": np.asarray(cfg.init, dtype=float).tolist(),
              "proposal_cov": (chol @ chol.T).tolist()}
    return Chain(draws, lps, rate, config, failures, notes)


def _auto_config(cfg: ChainConfig, est) -> ChainConfig:
    h = _design_of(est)
    init = cfg.init if cfg.init is not None else (h.mean if h is not None else None)
    cov = cfg.proposal_cov
    if cov is None and h is not None:
        cov = h.cov * (2.38 ** 2 / h.d) * 0.25
    return ChainConfig(cfg.T, cfg.burn_in, init, cov, cfg.adapt, cfg.seed)


def mcmc_posterior(est: LikelihoodEstimator, S0, prior: PriorSpec, cfg: ChainConfig,
                   restrict_to_design: bool = True) -> Chain:
    """Sample ``pi(theta | S0)`` proportional to ``L_hat(S0 | theta) p(theta)``.

    Missing ``init`` and ``proposal_cov`` default to the mean and a scaled
    covariance of the design density recorded in the estimator.  With
    ``restrict_to_design`` the target is zero outside :func:`design_support`,
    since the approximation is only trained there.
    """
    S0 = np.asarray(S0, dtype=float)
    cfg = _auto_config(cfg, est)
    inside = design_support(est) if restrict_to_design else None

    def log_target(theta):
        lpr = prior.log_density(theta)
        if lpr == -math.inf or (inside is not None and not inside(theta)):
            return -math.inf
        return est.log_likelihood(S0, theta) + lpr

    return metropolis(log_target, cfg)


def exact_mcmc_posterior(loglik: Callable, observed, prior: PriorSpec, cfg: ChainConfig) -> Chain:
    """Same sampler driven by a tractable ``loglik(theta, observed)``."""
    def log_target(theta):
        lpr = prior.log_density(theta)
        if lpr == -math.inf:
            return -math.inf
        return loglik(theta, observed) + lpr

    return metropolis(log_target, cfg)


# ---------------------------------------------------------------------------
# Summaries and sensitivity
# ---------------------------------------------------------------------------

def posterior_summaries(chain, names: Sequence[str] | None = None) -> list[dict]:
    """Mean and type-7 0.025/0.975 quantiles per parameter."""
    draws = chain.draws if isinstance(chain, Chain) else np.asarray(chain, dtype=float)
    draws = draws.reshape(draws.shape[0], -1)
    if draws.shape[0] == 0:
        raise ValueError("chain is empty")
    names = list(names) if names else [f"theta_{i + 1}" for i in range(draws.shape[1])]
    lo, hi = np.quantile(draws, [0.025, 0.975], axis=0, method="linear")
    mean = draws.mean(axis=0)
    return [{"parameter": n, "q0.025": float(a), "mean": float(m), "q0.975": float(b)}
            for n, a, m, b in zip(names, lo, mean, hi)]


def write_summaries_csv(rows: list[dict], path, label_key: str | None = None) -> None:
    """Table-style CSV: (label,) parameter, 0.025, mean, 0.975."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        head = ([label_key] if label_key else []) + ["parameter", "0.025", "mean", "0.975"]
        w.writerow(head)
        for r in rows:
            lead = [r[label_key]] if label_key else []
            w.writerow(lead + [r["parameter"], repr(r["q0.025"]), repr(r["mean"]), repr(r["q0.975"])])


def sensitivity(est: LikelihoodEstimator, S0, priors, cfg: ChainConfig,
                names: Sequence[str] | None = None, threads: int = 1) -> list[dict]:
    """One posterior run per prior, all against the same estimator.

    ``priors`` is a sequence of ``(label, PriorSpec)`` pairs.  Every row uses
    the same seed, so rows differ only through the prior.  A failing row is
    reported with an ``error`` entry rather than aborting the sweep.
    """
    priors = list(priors)
    if not priors:
        raise ValueError("need at least one prior")

    def run(item):
        label, prior = item
        try:
            chain = mcmc_posterior(est, S0, prior, cfg)
        except Exception as exc:  # row-level isolation
            return {"label": label, "error": f"{type(exc).__name__}: {exc}", "summaries": [],
                    "acceptance_rate": math.nan}
        return {"label": label, "error": None, "summaries": posterior_summaries(chain, names),
                "acceptance_rate": chain.acceptance_rate}

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(run, priors))
    return [run(p) for p in priors]


# ---------------------------------------------------------------------------
# Maximum likelihood
# ---------------------------------------------------------------------------

def fd_hessian(f: Callable, x, rel_step: float = 1e-4) -> np.ndarray:
    """Central finite-difference Hessian with steps ``rel_step * max(|x_i|, 1)``."""
    x = np.asarray(x, dtype=float)
    d = x.size
    h = rel_step * np.maximum(np.abs(x), 1.0)
    H = np.empty((d, d))
    f0 = f(x)
    for i in range(d):
        ei = np.zeros(d)
        ei[i] = h[i]
        H[i, i] = (f(x + ei) - 2 * f0 + f(x - ei)) / h[i] ** 2
        for j in range(i):
            ej = np.zeros(d)
            ej[j] = h[j]
            H[i, j] = H[j, i] = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej)
                                 + f(x - ei - ej)) / (4 * h[i] * h[j])
    return H


@dataclass
class MLEResult:
    theta_hat: np.ndarray
    loglik: float
    wald_ci: list | None
    hessian_ok: bool
    hessian: np.ndarray
    trace: list

    def to_dict(self):
        return {"theta_hat": self.theta_hat.tolist(), "loglik": self.loglik,
                "wald_ci": self.wald_ci, "hessian_ok": bool(self.hessian_ok),
                "hessian": self.hessian.tolist(), "starts": self.trace}


def maximize(loglik: Callable, starts, max_iter: int = 5000, tol: float = 1e-10) -> MLEResult:
    """Multi-start Nelder-Mead on ``-loglik`` plus Wald intervals."""
    starts = [np.asarray(s, dtype=float) for s in starts]
    if not starts:
        raise ValueError("need at least one start")

    def negll(t):
        try:
            v = loglik(t)
        except (ValueError, ArithmeticError):
            return math.inf
        return -v if np.isfinite(v) else math.inf

    best, trace = None, []
    for s in starts:
        f0 = negll(s)
        res = optimize.minimize(negll, s, method="Nelder-Mead",
                                options={"maxiter": max_iter, "maxfev": 2 * max_iter,
                                         "xatol": tol, "fatol": tol, "adaptive": s.size > 2})
        ok = bool(np.isfinite(res.fun) and (res.fun <= f0 or not np.isfinite(f0)))
        trace.append({"start": s.tolist(), "theta": res.x.tolist(), "loglik": -float(res.fun),
                      "nit": int(res.nit), "message": str(res.message), "ok": ok})
        if ok and (best is None or res.fun < best.fun):
            best = res
    if best is None:
        raise MLEError("no start produced a finite likelihood", trace)
    theta = best.x
    H = fd_hessian(lambda t: -negll(t), theta)
    wald, hess_ok = None, False
    if np.all(np.isfinite(H)):
        try:
            np.linalg.cholesky(-H)
            cov = np.linalg.inv(-H)
            se = np.sqrt(np.diag(cov))
            wald = [[float(t - 1.96 * e), float(t + 1.96 * e)] for t, e in zip(theta, se)]
            hess_ok = True
        except np.linalg.LinAlgError:
            pass
    return MLEResult(theta, -float(best.fun), wald, hess_ok, H, trace)


def mle(est: LikelihoodEstimator, S0, starts=None, n_starts: int = 8, seed: int = 0,
        max_iter: int = 5000, tol: float = 1e-10, restrict_to_design: bool = True) -> MLEResult:
    """Maximize ``log L_hat(S0 | theta)``.

    Without explicit ``starts``, ``n_starts`` points are drawn from the
    design density recorded in the estimator (inside the design support).
    """
    S0 = np.asarray(S0, dtype=float)
    inside = design_support(est) if restrict_to_design else None
    if starts is None:
        h = _design_of(est)
        if h is None:
            raise ValueError("no starts given and the estimator records no design density")
        rng = np.random.default_rng(seed)
        starts = []
        while len(starts) < n_starts:
            starts.extend(t for t in proposal_sample(h, n_starts, rng)
                          if inside is None or inside(t))
        starts = starts[:n_starts]

    def loglik(t):
        if inside is not None and not inside(t):
            return -math.inf
        return est.log_likelihood(S0, t)

    return maximize(loglik, starts, max_iter, tol)


# ---------------------------------------------------------------------------
# Kernel Monte Carlo likelihood
# ---------------------------------------------------------------------------

def mc_likelihood(sim, theta, S0, delta: float, n: int, kernel: str = "indicator",
                  rng: np.random.Generator | None = None):
    """Kernel-smoothed Monte Carlo likelihood estimate and its standard error.

    ``K(D) = 1{D <= delta}`` (indicator) or ``exp(-D / (2 delta^2))``
    (gaussian), with ``D`` the squared Euclidean distance.
    """
    if n < 1 or not delta > 0:
        raise ValueError("need n >= 1 and delta > 0")
    if kernel not in ("indicator", "gaussian"):
        raise ValueError(f"unknown kernel {kernel!r}")
    rng = rng if rng is not None else np.random.default_rng()
    S0 = np.asarray(S0, dtype=float)
    D = np.empty(n)
    for i in range(n):
        try:
            s = sim(theta, rng)
            D[i] = float(((s - S0) ** 2).sum())
        except (ValueError, ArithmeticError):
            D[i] = math.inf
    K = (D <= delta).astype(float) if kernel == "indicator" else np.exp(-D / (2 * delta ** 2))
    se = K.std(ddof=1) / math.sqrt(n) if n > 1 else math.nan
    return float(K.mean()), float(se)
