"""Mixture-of-experts regression for one scalar summary given parameters.

Each summary ``s`` is modelled as a mixture of ``J`` normals whose softmax
gates, means and log-variances are all linear in the parameter vector.
Fitting is by generalized EM: weighted least squares for the means, Newton
steps on the log-variance link and multinomial-logistic Newton steps for the
gates, every update guarded by step halving so the observed-data
log-likelihood never decreases.

Parameters are standardized internally (and so is ``s``); coefficients are
stored against the standardized parameters but in the original units of
``s``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri

from .errors import AggregateFitError, FitRejectedError
from .gmm import logsumexp

VERSION = "moe/1"
CDF_EPS = 1e-12
VAR_FLOOR = 1e-12
LOGVAR_WINDOW = 30.0
LOG_2PI = math.log(2.0 * math.pi)


def log_softmax(a, axis=1):
    return a - logsumexp(a, axis=axis, keepdims=True)


@dataclass
class MoEFitReport:
    loglik: float = -math.inf
    iterations: int = 0
    converged: bool = False
    trace: list = field(default_factory=list)
    flags: list = field(default_factory=list)
    restart: int = 0

    def to_dict(self):
        return {"loglik": self.loglik, "iterations": self.iterations,
                "converged": self.converged, "flags": list(self.flags)}


@dataclass(frozen=True)
class ExpertComponent:
    gate_intercept: float
    gate_coef: tuple
    mean_intercept: float
    mean_coef: tuple
    logvar_intercept: float
    logvar_coef: tuple


class MoEModel:
    """Fitted conditional density ``f(s | theta)``.

    Parameters
    ----------
    gate, mean, logvar : array_like, shape (J, d + 1)
        Rows are experts, column 0 is the intercept.  Coefficients act on
        standardized parameters ``(theta - theta_mean) / theta_sd``.  The
        first gate row must be zero (identifiability).
    theta_mean, theta_sd : array_like, shape (d,)
    """

    def __init__(self, gate, mean, logvar, theta_mean, theta_sd,
                 summary_index: int = 0, report: MoEFitReport | None = None):
        gate = np.array(gate, dtype=float, ndmin=2)
        mean = np.array(mean, dtype=float, ndmin=2)
        logvar = np.array(logvar, dtype=float, ndmin=2)
        theta_mean = np.array(theta_mean, dtype=float).reshape(-1)
        theta_sd = np.array(theta_sd, dtype=float).reshape(-1)
        J, q = gate.shape
        if mean.shape != (J, q) or logvar.shape != (J, q) or theta_mean.shape != (q - 1,) \
                or theta_sd.shape != (q - 1,):
            raise ValueError("inconsistent coefficient shapes")
        if np.any(gate[0] != 0):
            raise ValueError("first expert's gate coefficients must be zero")
        if not all(np.all(np.isfinite(a)) for a in (gate, mean, logvar, theta_mean, theta_sd)):
            raise ValueError("coefficients must be finite")
        if np.any(theta_sd <= 0):
            raise ValueError("theta_sd must be positive")
        self.gate, self.mean, self.logvar = gate, mean, logvar
        self.theta_mean, self.theta_sd = theta_mean, theta_sd
        self.summary_index = int(summary_index)
        self.report = report
        for a in (gate, mean, logvar, theta_mean, theta_sd):
            a.flags.writeable = False

    @property
    def n_experts(self) -> int:
        return self.gate.shape[0]

    @property
    def theta_dim(self) -> int:
        return self.gate.shape[1] - 1

    @property
    def experts(self):
        return [ExpertComponent(g[0], tuple(g[1:]), m[0], tuple(m[1:]), v[0], tuple(v[1:]))
                for g, m, v in zip(self.gate, self.mean, self.logvar)]

    def n_parameters(self) -> int:
        J, q = self.gate.shape
        return (J - 1) * q + J * 2 * q

    # -- evaluation -------------------------------------------------------

    def _design(self, theta):
        theta = np.asarray(theta, dtype=float)
        t2 = np.atleast_2d(theta)
        if t2.shape[1] != self.theta_dim:
            raise ValueError(f"theta must have length {self.theta_dim}, got {t2.shape[1]}")
        if not np.all(np.isfinite(t2)):
            raise ValueError("theta must be finite")
        z = (t2 - self.theta_mean) / self.theta_sd
        return np.hstack([np.ones((z.shape[0], 1)), z])

    def components(self, theta):
        """Gate log-weights, means, standard deviations and clamp count.

        Arrays have shape (n, J) for ``n`` parameter rows.
        """
        X = self._design(theta)
        logw = log_softmax(X @ self.gate.T, axis=1)
        mu = X @ self.mean.T
        eta = X @ self.logvar.T
        clamped = int(np.count_nonzero(np.abs(eta) > LOGVAR_WINDOW))
        eta = np.clip(eta, -LOGVAR_WINDOW, LOGVAR_WINDOW)
        return logw, mu, np.exp(0.5 * eta), clamped

    def gate_weights(self, theta):
        X = self._design(theta)
        w = np.exp(log_softmax(X @ self.gate.T, axis=1))
        return w[0] if np.ndim(theta) == 1 else w

    def _prep(self, s, theta):
        s = np.asarray(s, dtype=float)
        scalar = s.ndim == 0 and np.ndim(theta) <= 1
        logw, mu, sd, _ = self.components(theta)
        s1 = np.atleast_1d(s)
        if mu.shape[0] == 1 and s1.size > 1:
            logw, mu, sd = (np.repeat(a, s1.size, axis=0) for a in (logw, mu, sd))
        if s1.size != mu.shape[0]:
            if s1.size == 1:
                s1 = np.repeat(s1, mu.shape[0])
            else:
                raise ValueError("s and theta have mismatched lengths")
        return scalar, s1, logw, mu, sd

    def log_density(self, s, theta):
        scalar, s1, logw, mu, sd = self._prep(s, theta)
        z = (s1[:, None] - mu) / sd
        lp = logsumexp(logw - 0.5 * z * z - np.log(sd) - 0.5 * LOG_2PI, axis=1)
        return float(lp[0]) if scalar else lp

    def density(self, s, theta):
        return np.exp(self.log_density(s, theta))

    def _cdf_sf(self, s, theta):
        scalar, s1, logw, mu, sd = self._prep(s, theta)
        z = (s1[:, None] - mu) / sd
        w = np.exp(logw)
        return scalar, (w * ndtr(z)).sum(axis=1), (w * ndtr(-z)).sum(axis=1)

    def cdf(self, s, theta):
        scalar, F, _ = self._cdf_sf(s, theta)
        F = np.clip(F, 0.0, 1.0)
        return float(F[0]) if scalar else F

    def normal_score(self, s, theta, return_clamps: bool = False):
        """``Phi^{-1}(F(s | theta))`` with ``F`` clamped to ``[eps, 1 - eps]``.

        The upper half is computed from the survival function so scores in
        the right tail keep full precision.
        """
        scalar, F, S = self._cdf_sf(s, theta)
        lower = F <= 0.5
        p = np.where(lower, F, S)
        clamped = p < CDF_EPS
        p = np.maximum(p, CDF_EPS)
        u = np.where(lower, ndtri(p), -ndtri(p))
        out = float(u[0]) if scalar else u
        if return_clamps:
            return out, int(np.count_nonzero(clamped))
        return out

    def score_and_log_density(self, s, theta):
        """Normal scores, log densities and clamp count in one pass (vector inputs)."""
        _, s1, logw, mu, sd = self._prep(s, theta)
        z = (s1[:, None] - mu) / sd
        lp = logsumexp(logw - 0.5 * z * z - np.log(sd) - 0.5 * LOG_2PI, axis=1)
        w = np.exp(logw)
        F, S = (w * ndtr(z)).sum(axis=1), (w * ndtr(-z)).sum(axis=1)
        lower = F <= 0.5
        p = np.where(lower, F, S)
        clamps = int(np.count_nonzero(p < CDF_EPS))
        p = np.maximum(p, CDF_EPS)
        return np.where(lower, ndtri(p), -ndtri(p)), lp, clamps

    # -- persistence ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "version": VERSION,
            "summary_index": self.summary_index,
            "theta_dim": self.theta_dim,
            "standardization": {"mean": [float(v) for v in self.theta_mean],
                                "sd": [float(v) for v in self.theta_sd]},
            "experts": [
                {"gate_intercept": float(g[0]), "gate_coef": [float(v) for v in g[1:]],
                 "mean_intercept": float(m[0]), "mean_coef": [float(v) for v in m[1:]],
                 "logvar_intercept": float(v[0]), "logvar_coef": [float(x) for x in v[1:]]}
                for g, m, v in zip(self.gate, self.mean, self.logvar)
            ],
            "fit_report": self.report.to_dict() if self.report else None,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MoEModel":
        if doc.get("version") != VERSION:
            raise ValueError(f"expected a {VERSION!r} document, got {doc.get('version')!r}")
        d = int(doc["theta_dim"])
        rows = doc["experts"]

        def coefs(key):
            out = np.array([[e[f"{key}_intercept"], *e[f"{key}_coef"]] for e in rows], dtype=float)
            if out.shape[1] != d + 1:
                raise ValueError(f"{key} coefficients do not match theta_dim={d}")
            return out

        rep = doc.get("fit_report")
        report = None
        if rep:
            report = MoEFitReport(loglik=rep["loglik"], iterations=rep["iterations"],
                                  converged=rep["converged"], flags=list(rep["flags"]))
        std = doc["standardization"]
        return cls(coefs("gate"), coefs("mean"), coefs("logvar"), std["mean"], std["sd"],
                   summary_index=doc["summary_index"], report=report)

    def __repr__(self):
        return f"MoEModel(j={self.summary_index}, J={self.n_experts}, d={self.theta_dim})"


# ---------------------------------------------------------------------------
# Functional interface
# ---------------------------------------------------------------------------

def moe_density(model: MoEModel, s, theta):
    return model.density(s, theta)


def moe_cdf(model: MoEModel, s, theta):
    return model.cdf(s, theta)


def normal_score(model: MoEModel, s, theta):
    return model.normal_score(s, theta)


# ---------------------------------------------------------------------------
# Generalized EM
# ---------------------------------------------------------------------------

def _expert_terms(X, y, gate, mean, logvar):
    logw = log_softmax(X @ gate.T, axis=1)
    eta = X @ logvar.T
    resid = y[:, None] - X @ mean.T
    logn = -0.5 * (LOG_2PI + eta + resid * resid * np.exp(-eta))
    return logw, logn


def _loglik(X, y, gate, mean, logvar):
    logw, logn = _expert_terms(X, y, gate, mean, logvar)
    joint = logw + logn
    rows = logsumexp(joint, axis=1)
    return float(rows.sum()), joint, rows


def _wls(X, y, a):
    XtA = X.T * a
    A = XtA @ X
    A[np.diag_indices_from(A)] += 1e-10 * (np.trace(A) / A.shape[0] + 1e-300)
    return np.linalg.solve(A, XtA @ y)


def _update_logvar(X, r, e2, gamma, flags, max_newton=2):
    """Newton ascent on sum r * (-eta/2 - e2 exp(-eta)/2), eta = X gamma.

    Candidates leaving the log-variance window on the training rows are
    treated as infeasible, so the ascent stays inside it.
    """
    def q(g):
        eta = X @ g
        if np.max(np.abs(eta)) > LOGVAR_WINDOW:
            return -math.inf
        return float((r * (-0.5 * eta - 0.5 * e2 * np.exp(-eta))).sum())

    if (r * e2).sum() <= VAR_FLOOR * max(r.sum(), 1e-300):
        flags.add("variance_floor")
        floor = np.zeros_like(gamma)
        floor[0] = math.log(VAR_FLOOR)
        return floor if q(floor) >= q(gamma) else gamma

    cur = q(gamma)
    for _ in range(max_newton):
        eta = X @ gamma
        a = 0.5 * r * e2 * np.exp(-eta)
        grad = X.T @ (a - 0.5 * r)
        H = (X.T * a) @ X
        H[np.diag_indices_from(H)] += 1e-10 * (np.trace(H) / H.shape[0] + 1e-300)
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = grad
        t = 1.0
        for _ in range(40):
            cand = gamma + t * step
            val = q(cand)
            if val >= cur:
                break
            t *= 0.5
        else:
            break
        improvement = val - cur
        gamma, cur = cand, val
        if improvement <= 1e-12 * abs(cur):
            break
    return gamma


def _update_gates(X, r, gate, flags, max_newton=1):
    """Multinomial-logistic Newton ascent with responsibilities as targets."""
    J, q = gate.shape
    if J == 1:
        return gate

    def obj(G):
        return float((r * log_softmax(X @ G.T, axis=1)).sum())

    cur = obj(gate)
    m = J - 1
    n = X.shape[0]
    XX = (X[:, :, None] * X[:, None, :]).reshape(n, q * q)
    for _ in range(max_newton):
        p = np.exp(log_softmax(X @ gate.T, axis=1))
        grad = (X.T @ (r[:, 1:] - p[:, 1:] * r.sum(axis=1, keepdims=True))).T.reshape(-1)
        P = p[:, 1:]
        W = P[:, :, None] * (np.eye(m)[None] - P[:, None, :])
        W *= r.sum(axis=1)[:, None, None]
        H = (W.reshape(n, m * m).T @ XX).reshape(m, m, q, q)
        H = H.transpose(0, 2, 1, 3).reshape(m * q, m * q)
        H[np.diag_indices_from(H)] += 1e-8 * (np.trace(H) / H.shape[0] + 1e-300)
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = grad
        accepted = False
        for direction in (step, grad):
            t = 1.0
            for _ in range(30):
                cand = gate.copy()
                cand[1:] += t * direction.reshape(m, q)
                val = obj(cand)
                if val >= cur:
                    accepted = True
                    break
                t *= 0.5
            if accepted:
                break
            flags.add("gate_gradient_fallback")
        if not accepted:
            break
        improvement = val - cur
        gate, cur = cand, val
        if improvement <= 1e-12 * abs(cur):
            break
    return gate


def _update_mean(X, y, a, beta):
    """Weighted least squares for one expert's mean, never decreasing
    ``-sum a (y - X beta)^2``; weights may span many orders of magnitude."""
    def q(b):
        e = y - X @ b
        return -float((a * e * e).sum())

    cur = q(beta)
    sw = np.sqrt(a)
    try:
        target = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)[0]
    except np.linalg.LinAlgError:
        return beta
    if not np.all(np.isfinite(target)):
        return beta
    t = 1.0
    for _ in range(40):
        cand = beta + t * (target - beta)
        if q(cand) >= cur:
            return cand
        t *= 0.5
    return beta


def _m_step(X, y, r, gate, mean, logvar, flags):
    J = gate.shape[0]
    mean = mean.copy()
    logvar = logvar.copy()
    for l in range(J):
        var = np.exp(X @ logvar[l])
        mean[l] = _update_mean(X, y, r[:, l] / var, mean[l])
        e2 = (y - X @ mean[l]) ** 2
        logvar[l] = _update_logvar(X, r[:, l], e2, logvar[l], flags)
    gate = _update_gates(X, r, gate, flags)
    return gate, mean, logvar


def _init_params(X, y, J, rng):
    from .gmm import _kmeans_pp

    n, q = X.shape
    labels = _kmeans_pp(np.column_stack([X[:, 1:], y]), J, rng)
    r = np.full((n, J), 0.2 / J)
    r[np.arange(n), labels] += 0.8
    mean = np.zeros((J, q))
    logvar = np.zeros((J, q))
    for l in range(J):
        mean[l] = _wls(X, y, r[:, l])
        e2 = (y - X @ mean[l]) ** 2
        logvar[l, 0] = math.log(max((r[:, l] * e2).sum() / r[:, l].sum(), VAR_FLOOR))
    gate = _update_gates(X, r, np.zeros((J, q)), set(), max_newton=2)
    return gate, mean, logvar


def _em_once(X, y, J, rng, max_iter, tol):
    report = MoEFitReport()
    flags = set()
    gate, mean, logvar = _init_params(X, y, J, rng)
    prev = -math.inf
    for it in range(max_iter + 1):
        ll, joint, rows = _loglik(X, y, gate, mean, logvar)
        if not math.isfinite(ll):
            raise FitRejectedError("log-likelihood became non-finite during EM", stage="moe")
        report.trace.append(ll)
        report.iterations = it
        if it > 0 and ll - prev <= tol * abs(prev):
            report.converged = True
            break
        if it == max_iter:
            break
        prev = ll
        r = np.exp(joint - rows[:, None])
        gate, mean, logvar = _m_step(X, y, r, gate, mean, logvar, flags)
    report.loglik = report.trace[-1]
    report.flags = sorted(flags)
    return gate, mean, logvar, report


def moe_fit(theta, s, n_experts: int, max_iter: int = 300, tol: float = 1e-8,
            restarts: int = 3, seed: int = 0, summary_index: int = 0,
            readapt: bool = False) -> MoEModel:
    """Fit ``f(s | theta)`` with ``n_experts`` experts by generalized EM.

    Parameters
    ----------
    theta : array_like, shape (N, d)
    s : array_like, shape (N,)
    readapt : bool
        Reserved for re-fitting the marginal law of the normal scores;
        not implemented.
    """
    if readapt:
        raise NotImplementedError("marginal re-adaptation of normal scores is not implemented")
    theta = np.asarray(theta, dtype=float)
    if theta.ndim == 1:
        theta = theta[:, None]
    y = np.asarray(s, dtype=float).reshape(-1)
    n, d = theta.shape
    J = int(n_experts)
    stage = f"moe[{summary_index}]"
    if J < 1:
        raise FitRejectedError("need at least one expert", stage=stage)
    if y.size != n:
        raise FitRejectedError("theta and s have different row counts", stage=stage)
    if n <= J * (2 * d + 3):
        raise FitRejectedError(f"insufficient rows: N={n} must exceed J*(2d+3)={J * (2 * d + 3)}",
                               stage=stage)
    if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(y))):
        raise FitRejectedError("non-finite training values", stage=stage)
    t_mean, t_sd = theta.mean(axis=0), theta.std(axis=0)
    if np.any(t_sd <= 0):
        raise FitRejectedError(f"theta column {int(np.argmin(t_sd))} has zero variance", stage=stage)
    s_mean, s_sd = y.mean(), y.std()
    if s_sd <= 0:
        raise FitRejectedError("summary column has zero variance", stage=stage)
    X = np.hstack([np.ones((n, 1)), (theta - t_mean) / t_sd])
    ys = (y - s_mean) / s_sd

    best, errors = None, []
    for r_idx, child in enumerate(np.random.SeedSequence(seed).spawn(restarts)):
        try:
            fit = _em_once(X, ys, J, np.random.default_rng(child), max_iter, tol)
        except (FitRejectedError, np.linalg.LinAlgError) as exc:
            errors.append(exc)
            continue
        fit[3].restart = r_idx
        if best is None or fit[3].loglik > best[3].loglik:
            best = fit
    if best is None:
        raise AggregateFitError("all EM restarts failed", errors, stage=stage)
    gate, mean, logvar, report = best
    # Back to original s units: s = s_mean + s_sd * s_std.
    mean = mean * s_sd
    mean[:, 0] += s_mean
    logvar = logvar.copy()
    logvar[:, 0] += 2.0 * math.log(s_sd)
    report.loglik -= n * math.log(s_sd)
    report.trace = [v - n * math.log(s_sd) for v in report.trace]
    eta = X @ logvar.T
    if np.any(np.abs(eta) > LOGVAR_WINDOW):
        report.flags = sorted(set(report.flags) | {"logvar_window"})
    return MoEModel(gate, mean, logvar, t_mean, t_sd, summary_index=summary_index, report=report)


def moe_bic(model: MoEModel, n: int) -> float:
    return -2.0 * model.report.loglik + model.n_parameters() * math.log(n)


def select_moe(theta, s, candidates, **config):
    """Fit each expert count, return ``(BIC-minimizing model, table)``."""
    candidates = list(candidates)
    if not candidates:
        raise ValueError("need at least one candidate expert count")
    n = np.asarray(s).size
    table, errors, best = [], [], None
    for J in candidates:
        try:
            model = moe_fit(theta, s, J, **config)
        except FitRejectedError as exc:
            errors.append(exc)
            table.append({"J": J, "loglik": math.nan, "bic": math.nan, "error": str(exc)})
            continue
        bic = moe_bic(model, n)
        table.append({"J": J, "loglik": model.report.loglik, "bic": bic, "error": None})
        if best is None or bic < best[0]:
            best = (bic, model)
    if best is None:
        raise AggregateFitError("every candidate expert count was rejected", errors,
                                stage=f"moe[{config.get('summary_index', 0)}]")
    return best[1], table
