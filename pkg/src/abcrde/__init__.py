"""Likelihood-free inference by regression density estimation.

The likelihood of a summary vector S given parameters theta is modelled as
a product of mixture-of-experts margins ``f_j(S_j | theta)`` coupled by a
Gaussian-mixture copula on their normal scores.  Submodules:

``gmm``     full-covariance Gaussian mixtures, EM fitting, exact conditioning
``moe``     heteroscedastic mixture-of-experts regression densities
``rde``     the composed likelihood estimator and the direct-mixture baseline
``design``  simulators, summary statistics, rejection pilot, training design
``models``  stereological inclusion model (GPD sizes) and a conjugate toy
``infer``   Metropolis sampling, maximum likelihood, prior sensitivity
``cli``     the ``abcrde`` command-line front end
"""
from .errors import AggregateFitError, FitRejectedError, NumericalInstabilityError
from .gmm import GaussianMixture, fit_gmm, gmm_condition, select_gmm
from .moe import MoEModel, moe_fit, select_moe
from .rde import (DirectGMMLikelihood, LikelihoodEstimator, TrainingSet, direct_gmm_log_likelihood,
                  fit_direct_gmm, rde_fit, rde_log_likelihood, rde_transform)
from .design import (PilotConfig, Simulator, TruncatedNormalProposal, build_proposal,
                     generate_training, pilot_sample, semi_automatic_pilot, stereology_simulator,
                     toy_simulator)
from .models import (ConjugateToyParams, GPDParams, StereologyParams, spherical_exact_loglik,
                     stereology_simulate, synthetic_dataset, toy_exact_posterior)
from .infer import (ChainConfig, PriorSpec, mc_likelihood, mcmc_posterior, exact_mcmc_posterior,
                    mle, posterior_summaries, sensitivity, stereology_prior)

__version__ = "0.1.0"

__all__ = [
    "AggregateFitError", "FitRejectedError", "NumericalInstabilityError",
    "GaussianMixture", "fit_gmm", "gmm_condition", "select_gmm",
    "MoEModel", "moe_fit", "select_moe",
    "DirectGMMLikelihood", "LikelihoodEstimator", "TrainingSet", "direct_gmm_log_likelihood",
    "fit_direct_gmm", "rde_fit", "rde_log_likelihood", "rde_transform",
    "PilotConfig", "Simulator", "TruncatedNormalProposal", "build_proposal", "generate_training",
    "pilot_sample", "semi_automatic_pilot", "stereology_simulator", "toy_simulator",
    "ConjugateToyParams", "GPDParams", "StereologyParams", "spherical_exact_loglik",
    "stereology_simulate", "synthetic_dataset", "toy_exact_posterior",
    "ChainConfig", "PriorSpec", "mc_likelihood", "mcmc_posterior", "exact_mcmc_posterior", "mle",
    "posterior_summaries", "sensitivity", "stereology_prior",
]
