"""Generative models used to exercise the likelihood estimator.

Three families live here:

* a conjugate Gaussian toy model whose posterior is known in closed form,
* the generalized Pareto distribution (GPD) for threshold exceedances,
* the stereological-extremes simulators (spherical and ellipsoidal
  inclusions observed through a planar section), together with an exact
  likelihood for the spherical case computed by one-dimensional quadrature.

Stereology conventions
----------------------
Inclusion centres form a homogeneous Poisson process with intensity ``rate``
per unit volume, restricted to inclusions whose largest diameter ``V``
exceeds the threshold ``nu0``; ``V - nu0`` follows a GPD(scale, shape).
A unit-area plane is cut by an inclusion of diameter ``v`` iff its centre
lies within ``v / 2`` of the plane, so the number of cut inclusions is
Poisson with mean ``rate * E[V]`` and the cut inclusions have size-biased
diameters (density ``v g(v) / E[V]``).  The centre offset ``Z`` is uniform
on ``(0, V/2)``.  A sphere gives a section diameter ``sqrt(V^2 - 4 Z^2)``;
only sections with diameter ``>= nu0`` are recorded.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import integrate
from scipy.special import gammaln

XI_ZERO = 1e-10
MAX_EXPECTED_CUTS = 1e7


class QuadratureError(RuntimeError):
    """Raised when the exact-likelihood quadrature fails to converge."""


@dataclass(frozen=True)
class GPDParams:
    threshold: float
    scale: float
    shape: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"GPD scale must be positive, got {self.scale}")

    @property
    def upper_bound(self) -> float:
        if self.shape < 0:
            return self.threshold - self.scale / self.shape
        return math.inf

    @property
    def mean(self) -> float:
        if self.shape >= 1:
            return math.inf
        return self.threshold + self.scale / (1.0 - self.shape)


@dataclass(frozen=True)
class StereologyParams:
    rate: float
    gpd: GPDParams
    shape_model: str = "spherical"

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError(f"rate must be positive, got {self.rate}")
        if self.shape_model not in ("spherical", "ellipsoidal"):
            raise ValueError(f"unknown shape_model {self.shape_model!r}")

    @classmethod
    def from_theta(cls, theta, shape_model="spherical", threshold=5.0):
        """Build from a parameter vector ``(rate, scale, shape)``."""
        rate, scale, shape = (float(t) for t in theta)
        return cls(rate, GPDParams(threshold, scale, shape), shape_model)


@dataclass(frozen=True)
class ConjugateToyParams:
    mean: float
    known_sd: float = 1.0
    sample_size: int = 50

    def __post_init__(self):
        if not self.known_sd > 0:
            raise ValueError("known_sd must be positive")
        if self.sample_size < 2:
            raise ValueError("sample_size must be at least 2")


# ---------------------------------------------------------------------------
# Generalized Pareto distribution
# ---------------------------------------------------------------------------

def gpd_logpdf(v, p: GPDParams):
    """Log density of the GPD; ``-inf`` outside the support."""
    v = np.asarray(v, dtype=float)
    x = (v - p.threshold) / p.scale
    out = np.full(v.shape, -np.inf)
    if abs(p.shape) < XI_ZERO:
        ok = x >= 0
        out[ok] = -x[ok] - math.log(p.scale)
        return out
    ok = (x >= 0) & (p.shape * x > -1.0)
    out[ok] = -(1.0 / p.shape + 1.0) * np.log1p(p.shape * x[ok]) - math.log(p.scale)
    return out


def gpd_pdf(v, p: GPDParams):
    return np.exp(gpd_logpdf(v, p))


def gpd_cdf(v, p: GPDParams):
    v = np.asarray(v, dtype=float)
    x = np.maximum((v - p.threshold) / p.scale, 0.0)
    if abs(p.shape) < XI_ZERO:
        return -np.expm1(-x)
    with np.errstate(divide="ignore"):
        log_sf = np.log1p(np.maximum(p.shape * x, -1.0)) * (-1.0 / p.shape)
    return -np.expm1(log_sf)


def gpd_quantile(q, p: GPDParams):
    q = np.asarray(q, dtype=float)
    if abs(p.shape) < XI_ZERO:
        return p.threshold - p.scale * np.log1p(-q)
    with np.errstate(divide="ignore"):
        return p.threshold + p.scale * np.expm1(-p.shape * np.log1p(-q)) / p.shape


def gpd_sample(p: GPDParams, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` GPD variates by inverting the CDF."""
    return gpd_quantile(rng.uniform(size=n), p)


def _size_biased_gpd(p: GPDParams, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw from the density ``v g(v) / E[V]`` on ``[threshold, upper)``.

    Writing ``v = nu0 + x`` splits ``v g(v)`` into ``nu0 g`` plus ``x g``,
    so the size-biased law is a two-part mixture: the plain GPD with
    probability ``nu0 / E[V]``, otherwise the size-biased excess.  The
    latter is Beta(2, 1/|xi|) scaled by ``scale/|xi|`` for ``xi < 0``,
    Gamma(2, scale) for ``xi = 0`` and BetaPrime(2, 1/xi - 1) scaled by
    ``scale/xi`` for ``0 < xi < 1``.  Exact, so no rejection loop is needed.
    """
    if p.shape >= 1:
        raise ValueError("size-biased GPD needs shape < 1 (finite mean)")
    mean_excess = p.scale / (1.0 - p.shape)
    plain = rng.uniform(size=n) < p.threshold / (p.threshold + mean_excess)
    out = np.empty(n)
    n_plain = int(plain.sum())
    out[plain] = gpd_sample(p, n_plain, rng)
    m = n - n_plain
    xi, sc = p.shape, p.scale
    if abs(xi) < XI_ZERO:
        excess = rng.gamma(2.0, sc, size=m)
    elif xi < 0:
        excess = (sc / -xi) * rng.beta(2.0, -1.0 / xi, size=m)
    else:
        # BetaPrime as a ratio of gammas.
        with np.errstate(divide="ignore", over="ignore"):
            excess = (sc / xi) * rng.gamma(2.0, size=m) / rng.gamma(1.0 / xi - 1.0, size=m)
    if not np.all(np.isfinite(excess)):
        raise ValueError("size-biased draw overflowed; GPD shape too close to 1")
    out[~plain] = p.threshold + excess
    return out


# ---------------------------------------------------------------------------
# Stereological extremes
# ---------------------------------------------------------------------------

def stereology_simulate(p: StereologyParams, rng: np.random.Generator,
                        return_latent: bool = False):
    """Simulate the recorded section diameters of one planar slice.

    With ``return_latent=True`` also returns the latent diameters ``V`` of
    the recorded inclusions (aligned with the output).
    """
    g = p.gpd
    mean_v = g.mean
    if not math.isfinite(mean_v):
        raise ValueError("stereology model needs GPD shape < 1")
    if p.rate * mean_v > MAX_EXPECTED_CUTS:
        raise ValueError(f"expected cut count {p.rate * mean_v:.3g} exceeds {MAX_EXPECTED_CUTS:.0g}")
    n_cut = rng.poisson(p.rate * mean_v)
    v = _size_biased_gpd(g, n_cut, rng)
    # Plane offset Z = u V with u ~ U(0, 1/2); W = sqrt(V^2 - 4 Z^2).
    u = rng.uniform(0.0, 0.5, size=n_cut)
    w = v * np.sqrt(np.maximum(1.0 - 4.0 * u * u, 0.0))
    if p.shape_model == "ellipsoidal":
        # Minor diameters V*U1, V*U2; plane orthogonal to the major axis, so
        # the section is an ellipse scaled by sqrt(1 - (2Z/V)^2).
        minor = rng.uniform(size=(n_cut, 2)).max(axis=1)
        w = w * minor
    keep = w >= g.threshold
    if return_latent:
        return w[keep], v[keep]
    return w[keep]


def _cut_integral(w, g: GPDParams, epsrel: float):
    """``I(w) = int_w^upper g(v) / sqrt(v^2 - w^2) dv`` for a vector of ``w``.

    Substituting ``v = w cosh t`` removes the endpoint singularity, leaving
    ``int_0^T g(w cosh t) dt`` with ``T = acosh(upper / w)``.
    """
    w = np.asarray(w, dtype=float)
    upper = g.upper_bound
    out = np.zeros_like(w)
    inside = w < upper
    if not inside.any():
        return out
    wi = w[inside]
    # A remote endpoint (shape just below zero) carries no mass; the
    # unbounded form then integrates more reliably than the rescaled one.
    if upper < 1e6 * wi.min():
        t_max = np.arccosh(upper / wi)

        def f(tau):
            return t_max * gpd_pdf(wi * np.cosh(tau * t_max), g)

        val, err = integrate.quad_vec(f, 0.0, 1.0, epsrel=epsrel, epsabs=0.0,
                                      norm="max", limit=200)
    else:
        def f(t):
            with np.errstate(over="ignore"):
                return gpd_pdf(wi * np.cosh(t), g)

        val, err = integrate.quad_vec(f, 0.0, np.inf, epsrel=epsrel,
                                      epsabs=0.0, norm="max", limit=200)
    if not np.all(np.isfinite(val)) or err > 10 * epsrel * max(np.max(np.abs(val)), 1e-300):
        raise QuadratureError(
            f"section-diameter quadrature did not converge (err={err:.3g}, "
            f"scale={g.scale}, shape={g.shape})")
    out[inside] = val
    return out


def retained_mass(g: GPDParams, epsrel: float = 1e-10) -> float:
    """``int sqrt(v^2 - nu0^2) g(v) dv``: expected recorded sections per unit rate.

    Integrated over ``s = -log(1 - G(v))``, where the integrand is smooth and
    decays like ``exp((xi - 1) s)`` whatever the sign of the shape, so a
    distant upper endpoint cannot hide the mass from the quadrature.
    """
    nu0, sc, xi = g.threshold, g.scale, g.shape

    def f(s):
        if xi * s > 600.0:  # integrand ~ exp((xi - 1) s), negligible here
            return 0.0
        excess = sc * (math.expm1(xi * s) / xi if abs(xi) >= XI_ZERO else s)
        if excess <= 0.0:
            return 0.0
        return math.exp(0.5 * (math.log(excess) + math.log(2.0 * nu0 + excess)) - s)

    val, err = integrate.quad(f, 0.0, math.inf, epsrel=epsrel, limit=200)
    if not math.isfinite(val) or val <= 0:
        raise QuadratureError(f"retention quadrature failed (value {val})")
    return val


def section_intensity(w, p: StereologyParams, epsrel: float = 1e-8):
    """Intensity of recorded spherical section diameters at ``w`` (per unit rate).

    Equals ``w * I(w)``; it integrates to :func:`retained_mass` over
    ``[nu0, upper)``.
    """
    w = np.asarray(w, dtype=float)
    return w * _cut_integral(w, p.gpd, epsrel)


def spherical_exact_loglik(p: StereologyParams, observed, epsrel: float = 1e-8) -> float:
    """Exact log-likelihood of recorded diameters under the spherical model.

    The recorded diameters form a Poisson process with intensity
    ``rate * w * I(w)`` on ``[nu0, upper)``, so the log-likelihood is the
    Poisson count term plus the log section densities.  Returns ``-inf``
    when an observation lies beyond the GPD upper endpoint.
    """
    if p.shape_model != "spherical":
        raise ValueError("exact likelihood is only available for spherical inclusions")
    g = p.gpd
    if g.shape >= 1:
        return -math.inf
    w = np.asarray(observed, dtype=float)
    n = w.size
    mass = retained_mass(g)
    mu = p.rate * mass
    ll = n * math.log(mu) - mu - gammaln(n + 1)
    if n == 0:
        return float(ll)
    if np.any(w < g.threshold) or np.any(w >= g.upper_bound):
        return -math.inf
    dens = section_intensity(w, p, epsrel) / mass
    if np.any(dens <= 0):
        return -math.inf
    return float(ll + np.log(dens).sum())


def load_diameters(path) -> np.ndarray:
    """Read an observed-data file: one diameter (micrometres) per line."""
    vals = [float(line) for line in Path(path).read_text().split() if line.strip()]
    return np.asarray(vals)


def save_diameters(path, diameters) -> None:
    Path(path).write_text("".join(f"{float(d)!r}\n" for d in diameters))


SYNTHETIC_THETA0 = (30.0, 1.5, -0.05)
SYNTHETIC_SEED = 2012


def synthetic_dataset() -> np.ndarray:
    """The bundled stand-in slice: spherical model at ``(30, 1.5, -0.05)``."""
    path = Path(__file__).with_name("data") / "stereology_synthetic.txt"
    return load_diameters(path)


# ---------------------------------------------------------------------------
# Conjugate Gaussian toy
# ---------------------------------------------------------------------------

def toy_sample(p: ConjugateToyParams, rng: np.random.Generator) -> np.ndarray:
    """``sample_size`` draws from ``N(mean, known_sd^2)``."""
    return rng.normal(p.mean, p.known_sd, size=p.sample_size)


def toy_summaries(x) -> np.ndarray:
    """``(sample mean, log sample sd)``."""
    x = np.asarray(x, dtype=float)
    if x.size < 2:
        raise ValueError("need at least 2 observations")
    return np.array([x.mean(), math.log(x.std(ddof=1))])


def toy_simulate(p: ConjugateToyParams, rng: np.random.Generator) -> np.ndarray:
    """Return ``(sample mean, log sample sd)`` of ``n`` normal draws."""
    return toy_summaries(toy_sample(p, rng))


def toy_exact_posterior(prior: dict, observed, p: ConjugateToyParams) -> dict:
    """Normal-normal update of the mean given the sample-mean summary."""
    xbar = float(observed[0])
    like_prec = p.sample_size / p.known_sd ** 2
    prior_sd = float(prior["sd"])
    if prior_sd == 0:
        return {"mean": float(prior["mean"]), "sd": 0.0}
    prior_prec = 1.0 / prior_sd ** 2
    prec = prior_prec + like_prec
    mean = (prior_prec * float(prior["mean"]) + like_prec * xbar) / prec
    return {"mean": mean, "sd": 1.0 / math.sqrt(prec)}
