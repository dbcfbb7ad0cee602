"""Full-covariance Gaussian mixtures: EM fitting, densities, sampling and
exact conditioning on a block of coordinates."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .errors import AggregateFitError, FitRejectedError


def logsumexp(a, axis=1, keepdims=False):
    """Lean log-sum-exp; scipy's version carries heavy per-call dispatch."""
    m = a.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))
    return out if keepdims else np.squeeze(out, axis=axis)

LOG_2PI = math.log(2.0 * math.pi)
VERSION = "gmm/1"


@dataclass
class FitReport:
    loglik: float = -math.inf
    iterations: int = 0
    converged: bool = False
    trace: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    restart: int = 0


def _cholesky(cov):
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise FitRejectedError("covariance is not positive definite", stage="gmm") from exc


class GaussianMixture:
    """Weighted mixture of multivariate normals.

    Parameters
    ----------
    weights : array_like, shape (L,)
        Non-negative, normalized to sum to one.  Zero weights are tolerated
        (they never contribute), fitting never produces them.
    means : array_like, shape (L, p)
    covariances : array_like, shape (L, p, p)
        Symmetric positive definite.

    Instances are treated as immutable; the Cholesky factors and
    log-determinants are computed once at construction.
    """

    def __init__(self, weights, means, covariances, report=None):
        w = np.array(weights, dtype=float).reshape(-1)
        mu = np.array(means, dtype=float)
        cov = np.array(covariances, dtype=float)
        if mu.ndim == 1:
            mu = mu[None, :]
        if cov.ndim == 2:
            cov = cov[None, :, :]
        n_comp, p = mu.shape
        if w.shape != (n_comp,) or cov.shape != (n_comp, p, p):
            raise ValueError(
                f"inconsistent shapes: weights {w.shape}, means {mu.shape}, "
                f"covariances {cov.shape}")
        if np.any(w < 0) or not np.all(np.isfinite(w)) or w.sum() <= 0:
            raise ValueError("weights must be finite, non-negative and not all zero")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(cov))):
            raise ValueError("non-finite mean or covariance")
        cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
        total = w.sum()
        self.weights = w if abs(total - 1.0) <= 1e-12 else w / total
        self.means = mu
        self.covariances = cov
        self.chol = np.stack([_cholesky(c) for c in cov])
        self.logdet = 2.0 * np.log(np.diagonal(self.chol, axis1=1, axis2=2)).sum(axis=1)
        with np.errstate(divide="ignore"):
            self.log_weights = np.log(self.weights)
        self.report = report
        for arr in (self.weights, self.means, self.covariances, self.chol,
                    self.logdet, self.log_weights):
            arr.flags.writeable = False

    @property
    def n_components(self) -> int:
        return self.weights.size

    @property
    def dimension(self) -> int:
        return self.means.shape[1]

    def component_log_pdf(self, x):
        """Per-component log normal densities, shape (n, L)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.dimension:
            raise ValueError(f"expected points of dimension {self.dimension}, got {x.shape[1]}")
        out = np.empty((x.shape[0], self.n_components))
        for l in range(self.n_components):
            y = solve_triangular(self.chol[l], (x - self.means[l]).T, lower=True, check_finite=False)
            out[:, l] = -0.5 * (self.dimension * LOG_2PI + self.logdet[l] + (y * y).sum(axis=0))
        return out

    def log_density(self, x):
        """log sum_l w_l N(x; mu_l, S_l), vectorized over rows of ``x``."""
        x = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(x)):
            raise ValueError("density evaluation needs finite points")
        lp = logsumexp(self.component_log_pdf(x) + self.log_weights, axis=1)
        return lp[0] if x.ndim == 1 else lp

    def sample(self, n: int, rng: np.random.Generator):
        if n < 1:
            raise ValueError("n must be at least 1")
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dimension))
        out = np.empty((n, self.dimension))
        for l in range(self.n_components):
            idx = comp == l
            out[idx] = self.means[l] + z[idx] @ self.chol[l].T
        return out

    def marginal(self, idx):
        idx = np.asarray(idx, dtype=int)
        return GaussianMixture(self.weights, self.means[:, idx],
                               self.covariances[:, idx[:, None], idx[None, :]])

    def conditional(self, given):
        """Precompute the conditional family ``x_A | x_B`` for block ``given``."""
        return ConditionalMixture(self, given)

    def n_parameters(self) -> int:
        p = self.dimension
        return (self.n_components - 1) + self.n_components * (p + p * (p + 1) // 2)

    def to_dict(self) -> dict:
        return {
            "version": VERSION,
            "dimension": self.dimension,
            "components": [
                {"weight": float(w), "mean": [float(v) for v in m],
                 "covariance_row_major": [float(v) for v in c.reshape(-1)]}
                for w, m, c in zip(self.weights, self.means, self.covariances)
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GaussianMixture":
        if doc.get("version") != VERSION:
            raise ValueError(f"expected a {VERSION!r} document, got {doc.get('version')!r}")
        p = int(doc["dimension"])
        comps = doc["components"]
        means = np.array([c["mean"] for c in comps], dtype=float)
        if means.shape[1] != p:
            raise ValueError("component mean length does not match dimension")
        covs = np.array([c["covariance_row_major"] for c in comps], dtype=float).reshape(-1, p, p)
        weights = [c["weight"] for c in comps]
        return cls(weights, means, covs)

    def __repr__(self):
        return f"GaussianMixture(L={self.n_components}, p={self.dimension})"


class ConditionalMixture:
    """Distribution of the free block ``A`` given the block ``B = b``.

    Component covariances and regression matrices do not depend on ``b`` and
    are computed once; only means and weights are recomputed per query.
    """

    def __init__(self, joint: GaussianMixture, given):
        p = joint.dimension
        given = np.atleast_1d(np.asarray(given, dtype=int))
        if given.size == 0 or np.any(given < 0) or np.any(given >= p) or len(set(given)) != given.size:
            raise ValueError(f"invalid conditioning indices {given!r} for dimension {p}")
        free = np.setdiff1d(np.arange(p), given)
        if free.size == 0:
            raise ValueError("conditioning on every coordinate leaves nothing to model")
        self.joint = joint
        self.given = given
        self.free = free
        self.marginal_given = joint.marginal(given)
        reg, cond_cov = [], []
        for l in range(joint.n_components):
            S = joint.covariances[l]
            s_ab = S[np.ix_(free, given)]
            s_aa = S[np.ix_(free, free)]
            chol_bb = self.marginal_given.chol[l]
            r = cho_solve((chol_bb, True), s_ab.T).T
            reg.append(r)
            cond_cov.append(s_aa - r @ s_ab.T)
        self.regression = np.stack(reg)
        self.cond_cov = np.stack(cond_cov)
        self.cond_cov = 0.5 * (self.cond_cov + np.swapaxes(self.cond_cov, 1, 2))
        self.cond_chol = np.stack([_cholesky(c) for c in self.cond_cov])
        self.cond_logdet = 2.0 * np.log(np.diagonal(self.cond_chol, axis1=1, axis2=2)).sum(axis=1)

    def _means_and_logw(self, b):
        b = np.atleast_2d(np.asarray(b, dtype=float))
        if b.shape[1] != self.given.size:
            raise ValueError(f"conditioning values must have length {self.given.size}")
        if not np.all(np.isfinite(b)):
            raise ValueError("conditioning values must be finite")
        mu_a = self.joint.means[:, self.free]
        mu_b = self.joint.means[:, self.given]
        # means[n, l, :] = mu_a[l] + R_l (b_n - mu_b[l])
        means = mu_a[None] + np.einsum("lij,nlj->nli", self.regression, b[:, None, :] - mu_b[None])
        logw = self.marginal_given.component_log_pdf(b) + self.joint.log_weights
        logw = logw - logsumexp(logw, axis=1, keepdims=True)
        return means, logw

    def at(self, b) -> GaussianMixture:
        b = np.asarray(b, dtype=float).reshape(-1)
        means, logw = self._means_and_logw(b)
        return GaussianMixture(np.exp(logw[0]), means[0], self.cond_cov)

    def log_density(self, a, b):
        """log g(a | b) for matching rows of ``a`` and ``b``."""
        a = np.asarray(a, dtype=float)
        scalar = a.ndim == 1
        a2 = np.atleast_2d(a)
        b2 = np.atleast_2d(np.asarray(b, dtype=float))
        if b2.shape[0] == 1 and a2.shape[0] > 1:
            b2 = np.repeat(b2, a2.shape[0], axis=0)
        if a2.shape[1] != self.free.size:
            raise ValueError(f"expected free-block values of length {self.free.size}")
        if not np.all(np.isfinite(a2)):
            raise ValueError("density evaluation needs finite points")
        means, logw = self._means_and_logw(b2)
        k = self.free.size
        lp = np.empty_like(logw)
        for l in range(logw.shape[1]):
            y = solve_triangular(self.cond_chol[l], (a2 - means[:, l]).T, lower=True, check_finite=False)
            lp[:, l] = -0.5 * (k * LOG_2PI + self.cond_logdet[l] + (y * y).sum(axis=0))
        out = logsumexp(lp + logw, axis=1)
        return out[0] if scalar else out


# ---------------------------------------------------------------------------
# Public functional interface
# ---------------------------------------------------------------------------

def gmm_log_density(model: GaussianMixture, x):
    return model.log_density(x)


def gmm_condition(model: GaussianMixture, b, given) -> GaussianMixture:
    """Mixture over the remaining coordinates given ``x[given] = b``."""
    return model.conditional(given).at(b)


def gmm_sample(model: GaussianMixture, n: int, rng: np.random.Generator):
    return model.sample(n, rng)


# ---------------------------------------------------------------------------
# EM
# ---------------------------------------------------------------------------

def _validate(data, n_components):
    X = np.asarray(data, dtype=float)
    if X.ndim != 2:
        raise FitRejectedError(f"data must be a 2-d array, got shape {X.shape}", stage="gmm")
    n, p = X.shape
    if n_components < 1:
        raise FitRejectedError("need at least one component", stage="gmm")
    bad = np.where(~np.all(np.isfinite(X), axis=0))[0]
    if bad.size:
        raise FitRejectedError(f"non-finite entries in column {int(bad[0])}", stage="gmm")
    if n <= n_components * (p + 1):
        raise FitRejectedError(
            f"insufficient rows: N={n} must exceed L*(p+1)={n_components * (p + 1)}", stage="gmm")
    sd = X.std(axis=0)
    flat = np.where(sd <= 1e-12 * np.maximum(np.abs(X).max(axis=0), 1.0))[0]
    if flat.size:
        raise FitRejectedError(f"zero-variance column {int(flat[0])}", stage="gmm")
    return X


def _kmeans_pp(Z, k, rng, n_iter=20):
    n = Z.shape[0]
    centres = [Z[rng.integers(n)]]
    d2 = ((Z - centres[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centres.append(Z[idx])
        d2 = np.minimum(d2, ((Z - Z[idx]) ** 2).sum(axis=1))
    C = np.array(centres)
    labels = np.zeros(n, dtype=int)
    for _ in range(n_iter):
        dist = ((Z[:, None, :] - C[None]) ** 2).sum(axis=2)
        new = dist.argmin(axis=1)
        if _ > 0 and np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            members = Z[labels == j]
            if len(members):
                C[j] = members.mean(axis=0)
    return labels


def _m_step(X, resp, ridge):
    n, p = X.shape
    nk = resp.sum(axis=0) + 10 * np.finfo(float).eps
    means = (resp.T @ X) / nk[:, None]
    covs = np.empty((resp.shape[1], p, p))
    eye = np.eye(p)
    for l in range(resp.shape[1]):
        diff = X - means[l]
        covs[l] = (resp[:, l, None] * diff).T @ diff / nk[l] + ridge * eye
    return nk / n, means, covs


def _em_once(X, n_components, rng, max_iter, tol, ridge):
    n, p = X.shape
    report = FitReport()
    mu, sd = X.mean(axis=0), X.std(axis=0)
    labels = _kmeans_pp((X - mu) / sd, n_components, rng)
    resp = np.zeros((n, n_components))
    resp[np.arange(n), labels] = 1.0
    weights, means, covs = _m_step(X, resp, ridge)
    global_cov = np.cov(X, rowvar=False).reshape(p, p) + ridge * np.eye(p)
    counts = resp.sum(axis=0)
    for l in range(n_components):
        if counts[l] < p + 1:
            covs[l] = global_cov
    weights = np.maximum(weights, 1.0 / n)
    prune_floor = 1e-8 / n
    model = None
    prev = -math.inf
    for it in range(max_iter + 1):
        keep = weights >= prune_floor
        if not keep.all():
            for l in np.where(~keep)[0]:
                report.warnings.append(
                    f"iteration {it}: pruned component with weight {weights[l]:.3g}")
            weights, means, covs = weights[keep], means[keep], covs[keep]
        model = GaussianMixture(weights, means, covs)
        lp = model.component_log_pdf(X) + model.log_weights
        row_ll = logsumexp(lp, axis=1)
        ll = float(row_ll.sum())
        if not math.isfinite(ll):
            raise FitRejectedError("log-likelihood became non-finite during EM", stage="gmm")
        report.trace.append(ll)
        report.iterations = it
        if it > 0 and ll - prev <= tol * abs(prev):
            report.converged = True
            break
        if it == max_iter:
            break
        prev = ll
        resp = np.exp(lp - row_ll[:, None])
        weights, means, covs = _m_step(X, resp, ridge)
    report.loglik = report.trace[-1]
    model.report = report
    return model


def fit_gmm(data, n_components: int, max_iter: int = 500, tol: float = 1e-10,
            ridge: float = 1e-6, restarts: int = 5, seed: int = 0) -> GaussianMixture:
    """Fit a full-covariance mixture by EM, keeping the best of ``restarts``.

    ``ridge`` is relative: ``ridge * mean(diag(cov(data)))`` is added to every
    component covariance at each M-step.  Components whose weight falls
    below ``1e-8 / N`` are pruned and a warning is recorded in ``report``.
    """
    X = _validate(data, n_components)
    ridge_abs = ridge * float(np.mean(X.var(axis=0)))
    best, errors = None, []
    for r, child in enumerate(np.random.SeedSequence(seed).spawn(restarts)):
        try:
            model = _em_once(X, n_components, np.random.default_rng(child), max_iter, tol, ridge_abs)
        except FitRejectedError as exc:
            errors.append(exc)
            continue
        model.report.restart = r
        if best is None or model.report.loglik > best.report.loglik:
            best = model
    if best is None:
        raise AggregateFitError("all EM restarts failed", errors, stage="gmm")
    return best


def gmm_bic(model: GaussianMixture, n: int) -> float:
    return -2.0 * model.report.loglik + model.n_parameters() * math.log(n)


def select_gmm(data, candidates, **config):
    """Fit each candidate component count and return the BIC minimizer.

    Returns ``(model, table)`` where ``table`` has one row per candidate with
    keys ``L``, ``loglik``, ``bic`` and ``error`` (``None`` on success).
    """
    candidates = list(candidates)
    if not candidates:
        raise ValueError("need at least one candidate component count")
    n = np.asarray(data).shape[0]
    table, errors, best = [], [], None
    for L in candidates:
        try:
            model = fit_gmm(data, L, **config)
        except FitRejectedError as exc:
            errors.append(exc)
            table.append({"L": L, "loglik": math.nan, "bic": math.nan, "error": str(exc)})
            continue
        bic = gmm_bic(model, n)
        table.append({"L": L, "loglik": model.report.loglik, "bic": bic, "error": None})
        if best is None or bic < best[0]:
            best = (bic, model)
    if best is None:
        raise AggregateFitError("every candidate mixture fit was rejected", errors, stage="gmm")
    return best[1], table
