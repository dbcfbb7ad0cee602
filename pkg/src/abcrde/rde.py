"""Regression density estimate of an intractable likelihood.

The estimator combines ``k`` per-summary mixture-of-experts margins with a
Gaussian mixture over ``(U, theta)``, where ``U`` are the normal scores of
the summaries under their fitted margins::

    log L(S | theta) = log g(U | theta)
                       + sum_j [log f_j(S_j | theta) - log phi(U_j)]

Everything is evaluated in log space; with a hundred summaries the product
form underflows.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .errors import AggregateFitError, FitRejectedError, NumericalInstabilityError
from .gmm import GaussianMixture, fit_gmm, select_gmm
from .moe import MoEModel, moe_fit, select_moe

VERSION = "rde/1"
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class TrainingSet:
    """Paired simulations: row ``i`` of ``summaries`` was simulated at row ``i``
    of ``parameters``."""

    summaries: np.ndarray
    parameters: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        S = np.array(self.summaries, dtype=float)
        T = np.array(self.parameters, dtype=float)
        if S.ndim == 1:
            S = S[:, None]
        if T.ndim == 1:
            T = T[:, None]
        if S.shape[0] != T.shape[0] or S.shape[0] < 1:
            raise ValueError(f"summaries ({S.shape[0]} rows) and parameters "
                             f"({T.shape[0]} rows) must pair up and be non-empty")
        if not (np.all(np.isfinite(S)) and np.all(np.isfinite(T))):
            raise ValueError("training set contains non-finite entries")
        S.flags.writeable = False
        T.flags.writeable = False
        self.summaries, self.parameters = S, T

    @property
    def n(self) -> int:
        return self.summaries.shape[0]

    @property
    def k(self) -> int:
        return self.summaries.shape[1]

    @property
    def d(self) -> int:
        return self.parameters.shape[1]

    def to_csv(self, path) -> None:
        """Write ``theta_1..theta_d,S_1..S_k`` plus a provenance sidecar."""
        path = Path(path)
        header = [f"theta_{i + 1}" for i in range(self.d)] + [f"S_{j + 1}" for j in range(self.k)]
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for t, s in zip(self.parameters, self.summaries):
                writer.writerow([repr(float(v)) for v in (*t, *s)])
        sidecar = path.with_name(path.name + ".provenance.json")
        sidecar.write_text(json.dumps(self.provenance, indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_csv(cls, path) -> "TrainingSet":
        path = Path(path)
        with path.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        d = sum(h.startswith("theta_") for h in header)
        k = sum(h.startswith("S_") for h in header)
        if d + k != len(header) or d == 0 or k == 0:
            raise ValueError(f"unexpected training-set header {header!r}")
        data = np.array(body, dtype=float).reshape(-1, d + k)
        sidecar = path.with_name(path.name + ".provenance.json")
        prov = json.loads(sidecar.read_text()) if sidecar.exists() else {}
        return cls(data[:, d:], data[:, :d], prov)


class LikelihoodEstimator:
    """Fitted likelihood approximation; immutable and safe to share."""

    def __init__(self, margins, joint: GaussianMixture, meta: dict | None = None):
        margins = list(margins)
        k = len(margins)
        if k == 0:
            raise ValueError("need at least one margin")
        d = margins[0].theta_dim
        if any(m.theta_dim != d for m in margins):
            raise ValueError("margins disagree on the parameter dimension")
        if joint.dimension != k + d:
            raise ValueError(f"joint dimension {joint.dimension} != k + d = {k + d}")
        self.margins = margins
        self.joint = joint
        self.k, self.d = k, d
        self.meta = dict(meta or {})
        self._cond = joint.conditional(np.arange(k, k + d))

    def _check(self, S, theta):
        S = np.asarray(S, dtype=float)
        theta = np.asarray(theta, dtype=float)
        S2, T2 = np.atleast_2d(S), np.atleast_2d(theta)
        if S2.shape[1] != self.k:
            raise ValueError(f"summary vector must have length {self.k}")
        if T2.shape[1] != self.d:
            raise ValueError(f"parameter vector must have length {self.d}")
        if not (np.all(np.isfinite(S2)) and np.all(np.isfinite(T2))):
            raise ValueError("inputs must be finite")
        n = max(S2.shape[0], T2.shape[0])
        if S2.shape[0] == 1:
            S2 = np.repeat(S2, n, axis=0)
        if T2.shape[0] == 1:
            T2 = np.repeat(T2, n, axis=0)
        if S2.shape[0] != T2.shape[0]:
            raise ValueError("S and theta row counts differ")
        return S2, T2, S.ndim <= 1 and theta.ndim <= 1

    def _scores(self, S2, T2):
        U = np.empty_like(S2)
        logf = np.zeros(S2.shape[0])
        clamps = 0
        for j, m in enumerate(self.margins):
            U[:, j], lf, c = m.score_and_log_density(S2[:, j], T2)
            clamps += c
            logf += lf
        return U, logf, clamps

    def transform(self, S, theta, return_clamps: bool = False):
        """Normal scores ``U_j = Phi^{-1}(F_j(S_j | theta))``."""
        S2, T2, single = self._check(S, theta)
        U, _, clamps = self._scores(S2, T2)
        out = U[0] if single else U
        return (out, clamps) if return_clamps else out

    def log_likelihood(self, S, theta):
        """``log L_hat(S | theta)``; vectorized over matching rows."""
        S2, T2, single = self._check(S, theta)
        U, logf, _ = self._scores(S2, T2)
        ll = self._cond.log_density(U, T2) + logf + (0.5 * U * U).sum(axis=1) + self.k * HALF_LOG_2PI
        if not np.all(np.isfinite(ll)):
            raise NumericalInstabilityError("likelihood estimate is not finite")
        return float(ll[0]) if single else ll

    def to_dict(self) -> dict:
        return {"version": VERSION, "k": self.k, "d": self.d,
                "margins": [m.to_dict() for m in self.margins],
                "joint": self.joint.to_dict(), "meta": self.meta}

    @classmethod
    def from_dict(cls, doc: dict) -> "LikelihoodEstimator":
        if doc.get("version") != VERSION:
            raise ValueError(f"expected a {VERSION!r} document, got {doc.get('version')!r}")
        margins = [MoEModel.from_dict(m) for m in doc["margins"]]
        joint = GaussianMixture.from_dict(doc["joint"])
        k, d = int(doc["k"]), int(doc["d"])
        if len(margins) != k or any(m.theta_dim != d for m in margins) or joint.dimension != k + d:
            raise ValueError("estimator document has inconsistent dimensions")
        return cls(margins, joint, doc.get("meta"))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "LikelihoodEstimator":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def __repr__(self):
        return f"LikelihoodEstimator(k={self.k}, d={self.d}, L={self.joint.n_components})"


def _fit_or_select(fit, select, spec, *args, **kw):
    if isinstance(spec, (int, np.integer)):
        return fit(*args, int(spec), **kw), None
    return select(*args, list(spec), **kw)


def rde_fit(training: TrainingSet, margin_spec=3, joint_spec=5,
            moe_config: dict | None = None, gmm_config: dict | None = None,
            seed: int = 0) -> LikelihoodEstimator:
    """Fit margins, compute normal scores and fit the joint mixture.

    ``margin_spec`` and ``joint_spec`` are either a fixed count or a list of
    candidate counts chosen by BIC.
    """
    moe_config = dict(moe_config or {})
    gmm_config = dict(gmm_config or {})
    S, T = training.summaries, training.parameters
    k = training.k
    margins, tables, errors = [], {}, []
    for j in range(k):
        cfg = dict(moe_config, seed=int(np.random.SeedSequence([seed, 1, j]).generate_state(1)[0]),
                   summary_index=j)
        try:
            m, table = _fit_or_select(moe_fit, select_moe, margin_spec, T, S[:, j], **cfg)
        except FitRejectedError as exc:
            errors.append(FitRejectedError(str(exc), stage=f"margin {j}"))
            continue
        margins.append(m)
        if table is not None:
            tables[j] = table
    if errors:
        raise AggregateFitError(f"{len(errors)} of {k} margin fits failed", errors, stage="moe")

    U = np.empty_like(S)
    clamps, ks = [], []
    for j, m in enumerate(margins):
        U[:, j], c = m.normal_score(S[:, j], T, return_clamps=True)
        clamps.append(c)
        res = stats.kstest(U[:, j], "norm")
        ks.append({"statistic": float(res.statistic), "pvalue": float(res.pvalue)})

    gcfg = dict(gmm_config, seed=int(np.random.SeedSequence([seed, 2]).generate_state(1)[0]))
    try:
        joint, joint_table = _fit_or_select(fit_gmm, select_gmm, joint_spec,
                                            np.hstack([U, T]), **gcfg)
    except FitRejectedError as exc:
        raise FitRejectedError(str(exc), stage="joint") from exc

    meta = {
        "k": k, "d": training.d, "N": training.n,
        "J": [m.n_experts for m in margins], "L": joint.n_components,
        "seed": seed,
        "diagnostics": {
            "clamp_counts": clamps,
            "clamp_fraction": float(sum(clamps)) / U.size,
            "ks": ks,
            "margin_flags": [list(m.report.flags) for m in margins],
            "joint_loglik": joint.report.loglik,
            "joint_warnings": list(joint.report.warnings),
        },
        "selection": {"margins": {str(j): t for j, t in tables.items()},
                      "joint": joint_table},
        "provenance": training.provenance,
    }
    return LikelihoodEstimator(margins, joint, meta)


def rde_transform(est: LikelihoodEstimator, S, theta):
    return est.transform(S, theta)


def rde_log_likelihood(est: LikelihoodEstimator, S, theta):
    return est.log_likelihood(S, theta)


class DirectGMMLikelihood:
    """Baseline: a Gaussian mixture on raw ``(S, theta)`` conditioned on ``theta``.

    Evaluation refuses to return values from a conditional covariance whose
    condition number exceeds ``max_condition``; such a fit cannot resolve the
    summary density and the value would be dominated by round-off.
    """

    def __init__(self, joint: GaussianMixture, k: int, max_condition: float = 1e12):
        self.joint = joint
        self.k = k
        self.d = joint.dimension - k
        self._cond = joint.conditional(np.arange(k, joint.dimension))
        eig = np.linalg.eigvalsh(self._cond.cond_cov)
        self.condition_numbers = eig[:, -1] / eig[:, 0]
        self.max_condition = max_condition

    def log_likelihood(self, S, theta):
        worst = float(self.condition_numbers.max())
        if not worst < self.max_condition:
            raise NumericalInstabilityError(
                f"conditional covariance condition number {worst:.3g} exceeds "
                f"{self.max_condition:.3g}")
        ll = self._cond.log_density(np.asarray(S, dtype=float), np.asarray(theta, dtype=float))
        if not np.all(np.isfinite(ll)):
            raise NumericalInstabilityError("direct mixture likelihood is not finite")
        return ll


def fit_direct_gmm(training: TrainingSet, L, seed: int = 0, **gmm_config) -> DirectGMMLikelihood:
    data = np.hstack([training.summaries, training.parameters])
    joint, _ = _fit_or_select(fit_gmm, select_gmm, L, data, seed=seed, **gmm_config)
    return DirectGMMLikelihood(joint, training.k)


def direct_gmm_log_likelihood(training: TrainingSet, L, S, theta, seed: int = 0, **gmm_config):
    """Fit the raw-space baseline and evaluate ``log g(S | theta)``."""
    return fit_direct_gmm(training, L, seed=seed, **gmm_config).log_likelihood(S, theta)
