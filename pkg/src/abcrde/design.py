"""Where to simulate and what to summarize.

Covers the pilot rejection run that localizes the posterior, the truncated
normal design density built from it, training-set generation, and the two
summary schemes used for the stereology example (log quantile spacings and
semi-automatic linear projections).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np
from scipy import stats

from . import models
from .rde import TrainingSet

log = logging.getLogger(__name__)

SPACING_FLOOR = 1e-12


class PilotError(RuntimeError):
    """The pilot run accepted nothing."""

    def __init__(self, message, min_distance=math.nan):
        self.min_distance = min_distance
        super().__init__(message)


class InsufficientPilotError(ValueError):
    pass


def row_rng(seed: int, *index) -> np.random.Generator:
    """Independent stream for one simulation row, so fan-out order is irrelevant."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, index)]))


@dataclass(frozen=True)
class Simulator:
    """``simulate(theta, rng)`` produces a raw dataset; ``summarize`` maps it to S."""

    simulate: Callable[[np.ndarray, np.random.Generator], Any]
    summarize: Callable[[Any], np.ndarray]
    name: str = "custom"

    def __call__(self, theta, rng):
        return np.asarray(self.summarize(self.simulate(np.asarray(theta, dtype=float), rng)),
                          dtype=float)


def toy_simulator(known_sd: float = 1.0, sample_size: int = 50) -> Simulator:
    def simulate(theta, rng):
        return models.toy_sample(models.ConjugateToyParams(theta[0], known_sd, sample_size), rng)

    return Simulator(simulate, models.toy_summaries, name=f"toy(sd={known_sd},n={sample_size})")


def stereology_simulator(shape_model: str = "spherical", threshold: float = 5.0,
                         n_quantiles: int = 112, projection=None) -> Simulator:
    """Stereology slice simulator summarized by log quantile spacings.

    With ``projection`` (a :class:`SemiAutomaticProjection`) the spacing
    vector is further mapped to one statistic per parameter.
    """
    def simulate(theta, rng):
        p = models.StereologyParams.from_theta(theta, shape_model, threshold)
        return models.stereology_simulate(p, rng)

    def summarize(raw):
        s = quantile_spacing_stats(raw, n_quantiles)
        return projection.apply(s) if projection is not None else s

    kind = "semi_automatic" if projection is not None else "quantile_spacing"
    return Simulator(simulate, summarize, name=f"stereology-{shape_model}-{kind}")


# ---------------------------------------------------------------------------
# Summary statistics
# ---------------------------------------------------------------------------

def quantile_spacing_stats(diameters, n_quantiles: int = 112, return_floored: bool = False):
    """Log spacings of equally spaced quantiles plus the log count.

    Quantiles are taken at probabilities ``i / (n_quantiles + 1)`` with
    linear interpolation between order statistics (type 7).  Returns a
    vector of length ``n_quantiles``: ``n_quantiles - 1`` log spacings
    followed by ``log(len(diameters))``.  Zero spacings are floored at 1e-12.
    """
    x = np.asarray(diameters, dtype=float).reshape(-1)
    if x.size < 2:
        raise ValueError(f"need at least 2 observations, got {x.size}")
    probs = np.arange(1, n_quantiles + 1) / (n_quantiles + 1)
    q = np.quantile(x, probs, method="linear")
    gaps = np.diff(q)
    floored = int(np.count_nonzero(gaps < SPACING_FLOOR))
    out = np.empty(n_quantiles)
    out[:-1] = np.log(np.maximum(gaps, SPACING_FLOOR))
    out[-1] = math.log(x.size)
    return (out, floored) if return_floored else out


@dataclass(frozen=True)
class SemiAutomaticProjection:
    """Linear predictors of each parameter from a raw summary vector."""

    intercepts: np.ndarray
    weights: np.ndarray

    def apply(self, s_raw):
        s_raw = np.asarray(s_raw, dtype=float)
        return self.intercepts + s_raw @ self.weights.T

    def to_dict(self):
        return {"intercepts": self.intercepts.tolist(), "weights": self.weights.tolist()}

    @classmethod
    def from_dict(cls, doc):
        return cls(np.asarray(doc["intercepts"], dtype=float), np.asarray(doc["weights"], dtype=float))


def semi_automatic_stats(thetas, s_raw) -> SemiAutomaticProjection:
    """Least-squares regression of each parameter on the raw summaries."""
    T = np.asarray(thetas, dtype=float)
    S = np.asarray(s_raw, dtype=float)
    if T.ndim == 1:
        T = T[:, None]
    n, k = S.shape
    if n < k + 1:
        raise InsufficientPilotError(f"need at least k+1={k + 1} rows, got {n}")
    s_bar, t_bar = S.mean(axis=0), T.mean(axis=0)
    Sc, Tc = S - s_bar, T - t_bar
    A = Sc.T @ Sc
    if np.linalg.matrix_rank(A) < k:
        A[np.diag_indices_from(A)] += 1e-8 * max(np.trace(A) / k, 1e-300)
    W = np.linalg.solve(A, Sc.T @ Tc).T
    return SemiAutomaticProjection(t_bar - W @ s_bar, W)


# ---------------------------------------------------------------------------
# Pilot run and design density
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PilotConfig:
    delta: float
    lower: tuple
    upper: tuple
    target_accepted: int = 1000
    max_simulations: int = 100_000
    seed: int = 0
    standardize: bool = False

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 1 or lo.size == 0:
            raise ValueError("box bounds must be equal-length vectors")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi)) and np.all(lo < hi)):
            raise ValueError("box bounds must be finite with lower < upper")
        if not self.delta >= 0:
            raise ValueError("delta must be non-negative")


@dataclass
class PilotResult:
    thetas: np.ndarray
    summaries: np.ndarray
    n_simulated: int
    n_failed: int
    min_distance: float
    distances: np.ndarray = field(repr=False, default=None)

    @property
    def n_accepted(self) -> int:
        return self.thetas.shape[0]

    @property
    def acceptance_rate(self) -> float:
        return self.n_accepted / max(self.n_simulated, 1)

    def report(self) -> dict:
        return {"n_simulated": self.n_simulated, "n_accepted": self.n_accepted,
                "n_failed": self.n_failed, "acceptance_rate": self.acceptance_rate,
                "min_distance": self.min_distance}


def pilot_sample(sim: Simulator, S0, cfg: PilotConfig, scale=None) -> PilotResult:
    """Rejection ABC from a uniform box with an indicator kernel.

    A draw is accepted iff the squared Euclidean distance between its
    summaries and ``S0`` is at most ``cfg.delta``.  With
    ``cfg.standardize`` each summary is first divided by ``scale`` (or,
    if not given, by the standard deviation over the first 200 draws).
    """
    S0 = np.asarray(S0, dtype=float)
    if not np.all(np.isfinite(S0)):
        raise ValueError("observed summaries must be finite")
    lo = np.asarray(cfg.lower, dtype=float)
    hi = np.asarray(cfg.upper, dtype=float)
    thetas, summaries, dists = [], [], []
    acc_t, acc_s = [], []
    failed = 0
    n_sim = 0
    for i in range(cfg.max_simulations):
        rng = row_rng(cfg.seed, i)
        theta = rng.uniform(lo, hi)
        n_sim += 1
        try:
            s = sim(theta, rng)
        except (ValueError, ArithmeticError):
            failed += 1
            continue
        if s.shape != S0.shape or not np.all(np.isfinite(s)):
            failed += 1
            continue
        thetas.append(theta)
        summaries.append(s)
        if cfg.standardize and scale is None and len(summaries) == 200:
            scale = np.asarray(summaries).std(axis=0)
            scale[scale <= 0] = 1.0
            # Re-score everything seen so far on the new scale.
            dists = list((((np.asarray(summaries) - S0) / scale) ** 2).sum(axis=1))
            acc_t = [t for t, dd in zip(thetas, dists) if dd <= cfg.delta]
            acc_s = [x for x, dd in zip(summaries, dists) if dd <= cfg.delta]
        else:
            diff = (s - S0) / scale if (cfg.standardize and scale is not None) else s - S0
            dd = float(diff @ diff)
            dists.append(dd)
            if dd <= cfg.delta and not (cfg.standardize and scale is None):
                acc_t.append(theta)
                acc_s.append(s)
        if len(acc_t) >= cfg.target_accepted:
            break
    min_d = float(min(dists)) if dists else math.inf
    if not acc_t:
        raise PilotError(
            f"no acceptances after {n_sim} simulations (min distance {min_d:.4g} > "
            f"delta {cfg.delta:.4g}): delta too small or box misplaced", min_distance=min_d)
    return PilotResult(np.asarray(acc_t)[: cfg.target_accepted],
                       np.asarray(acc_s)[: cfg.target_accepted],
                       n_sim, failed, min_d, np.asarray(dists))


@dataclass(frozen=True)
class TruncatedNormalProposal:
    """``N(mean, cov)`` restricted to squared Mahalanobis radius ``radius2``."""

    mean: np.ndarray
    cov: np.ndarray
    radius2: float

    @property
    def d(self) -> int:
        return self.mean.size

    def mahalanobis2(self, theta):
        diff = np.atleast_2d(np.asarray(theta, dtype=float)) - self.mean
        sol = np.linalg.solve(self.cov, diff.T).T
        return (diff * sol).sum(axis=1)

    def contains(self, theta):
        return self.mahalanobis2(theta) <= self.radius2

    def logpdf(self, theta):
        """Normalized log density (``-inf`` outside the ellipsoid)."""
        m2 = self.mahalanobis2(theta)
        _, logdet = np.linalg.slogdet(self.cov)
        mass = stats.chi2.cdf(self.radius2, self.d)
        lp = -0.5 * (m2 + logdet + self.d * math.log(2 * math.pi)) - math.log(mass)
        return np.where(m2 <= self.radius2, lp, -np.inf)

    def sample(self, n: int, rng: np.random.Generator):
        return proposal_sample(self, n, rng)

    def to_dict(self):
        return {"mean": self.mean.tolist(), "cov": self.cov.tolist(), "radius2": self.radius2}

    @classmethod
    def from_dict(cls, doc):
        return cls(np.asarray(doc["mean"], dtype=float), np.asarray(doc["cov"], dtype=float),
                   float(doc["radius2"]))


def build_proposal(pilot_thetas) -> TruncatedNormalProposal:
    """Moment-matched normal truncated at squared Mahalanobis radius ``3d``."""
    T = np.asarray(pilot_thetas, dtype=float)
    if T.ndim == 1:
        T = T[:, None]
    m, d = T.shape
    if m <= d:
        raise InsufficientPilotError(f"need more than d={d} pilot draws, got {m}")
    mean = T.mean(axis=0)
    cov = np.atleast_2d(np.cov(T, rowvar=False))
    scale = np.maximum(np.abs(mean), 1.0) ** 2
    if np.any(np.diag(cov) <= 1e-14 * scale):
        raise InsufficientPilotError("pilot parameters have a (near) constant coordinate; "
                                     "the design covariance is singular")
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        cov = cov + 1e-8 * np.eye(d)
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise InsufficientPilotError("pilot covariance is singular even after ridge") from exc
    return TruncatedNormalProposal(mean, cov, 3.0 * d)


def proposal_sample(h: TruncatedNormalProposal, n: int, rng: np.random.Generator):
    """Rejection sampling from the truncated normal."""
    if n < 1:
        raise ValueError("n must be at least 1")
    chol = np.linalg.cholesky(h.cov)
    out = np.empty((0, h.d))
    while out.shape[0] < n:
        need = n - out.shape[0]
        z = rng.standard_normal((int(need * 1.1) + 8, h.d))
        z = z[(z * z).sum(axis=1) <= h.radius2]
        out = np.vstack([out, h.mean + z @ chol.T])
    return out[:n]


def generate_training(sim: Simulator, h: TruncatedNormalProposal, n: int, seed: int = 0,
                      max_attempts: int = 3, box=None) -> TrainingSet:
    """Simulate ``n`` rows ``(S, theta)`` with ``theta ~ h``.

    A failing simulation is retried with fresh randomness up to
    ``max_attempts`` times, then the row is skipped and counted.  ``box``
    (the pilot bounds, as ``(lower, upper)``) is only recorded, so later
    inference can stay inside the region the design was built for.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    thetas, summaries = [], []
    skipped = 0
    for i in range(n):
        theta = proposal_sample(h, 1, row_rng(seed, i))[0]
        for attempt in range(max_attempts):
            try:
                s = sim(theta, row_rng(seed, i, attempt + 1))
                if not np.all(np.isfinite(s)):
                    raise ValueError("non-finite summaries")
            except (ValueError, ArithmeticError) as exc:
                log.debug("row %d attempt %d failed: %s", i, attempt, exc)
                continue
            thetas.append(theta)
            summaries.append(s)
            break
        else:
            skipped += 1
    if not thetas:
        raise RuntimeError(f"every one of {n} training simulations failed")
    design = {"type": "truncated_normal", **h.to_dict()}
    if box is not None:
        design["box"] = [np.asarray(b, dtype=float).tolist() for b in box]
    provenance = {"simulator": sim.name, "design": design,
                  "seed": seed, "n_requested": n, "n_skipped": skipped}
    return TrainingSet(np.asarray(summaries), np.asarray(thetas), provenance)


def semi_automatic_pilot(raw_sim: Simulator, S0_raw, cfg: PilotConfig, n_regression: int = 5000):
    """Two-stage pilot for semi-automatic statistics.

    Box draws (all kept) fit the linear projection; a rejection pilot on the
    projected statistics at ``cfg.delta`` then localizes the design density.
    Returns ``(projection, regression_pilot, pilot, proposal)``.
    """
    box = PilotConfig(math.inf, cfg.lower, cfg.upper, n_regression, n_regression,
                      cfg.seed, False)
    reg = pilot_sample(raw_sim, S0_raw, box)
    projection = semi_automatic_stats(reg.thetas, reg.summaries)
    projected = Simulator(raw_sim.simulate,
                          lambda raw: projection.apply(raw_sim.summarize(raw)),
                          name=raw_sim.name + "+semi_automatic")
    stage2 = PilotConfig(cfg.delta, cfg.lower, cfg.upper, cfg.target_accepted,
                         cfg.max_simulations, cfg.seed + 1, cfg.standardize)
    pilot = pilot_sample(projected, projection.apply(S0_raw), stage2)
    return projection, reg, pilot, build_proposal(pilot.thetas)


def refit_projection(raw_sim: Simulator, h: TruncatedNormalProposal, n: int, seed: int = 0):
    """Refit the semi-automatic projection on ``n`` draws from ``h``."""
    tr = generate_training(raw_sim, h, n, seed)
    return semi_automatic_stats(tr.parameters, tr.summaries)
