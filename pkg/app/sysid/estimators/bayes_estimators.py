"""Kernel-based estimators: Empirical Bayes and Full Bayes."""

import logging
from typing import List, Tuple

from ..bayes import GaussianPosterior, Hyperparams, eb_confidence_set, maximize_marginal_likelihood, posterior
from ..core import ImpulseResponse
from ..errors import SysIdError
from ..mcmc import fb_confidence_set, fb_estimate
from ..pem import estimate_noise_variance_ls
from .base import EstimateOutcome, Estimator, RunContext

logger = logging.getLogger(__name__)


def bayes_noise_variance(ctx: RunContext) -> float:
    """True noise variance, or the residual variance of a least-squares FIR(n) fit."""
    if ctx.sigma2_mode == 'true':
        return ctx.data.sigma2
    return ctx.cached('sigma2_ls', lambda: estimate_noise_variance_ls(ctx.data, ctx.n))


def empirical_bayes(ctx: RunContext) -> Tuple[Hyperparams, GaussianPosterior]:
    """Marginal-likelihood hyperparameters and their posterior, computed once per run."""

    def compute():
        sigma2 = bayes_noise_variance(ctx)
        eta = maximize_marginal_likelihood(ctx.data.y, ctx.phi, sigma2)
        return eta, posterior(eta, ctx.data.y, ctx.phi, sigma2)

    return ctx.cached('eb', compute)


class EmpiricalBayesEstimator(Estimator):
    """EB: posterior mean at the marginal-likelihood maximizer, ellipsoidal set."""

    def __init__(self):
        super().__init__('EB', ['ELLIPSOID'])

    def estimate(self, ctx: RunContext) -> List[EstimateOutcome]:
        eta, post = empirical_bayes(ctx)
        outcome = EstimateOutcome(variant='ELLIPSOID', estimate=ImpulseResponse(post.mean), eta=eta)
        try:
            outcome.confidence_set = eb_confidence_set(post, ctx.samples_N, ctx.alpha, ctx.rng('EB/ELLIPSOID'))
        except (SysIdError, ValueError) as e:
            logger.error(f"[EB] Run {ctx.run_index} ellipsoid failed: {e}")
            outcome.error = type(e).__name__
        return [outcome]


class FullBayesEstimator(Estimator):
    """FB: hyperparameters integrated out by Adaptive Metropolis, mixture-density set."""

    def __init__(self):
        super().__init__('FB', ['MIXTURE'])

    def estimate(self, ctx: RunContext) -> List[EstimateOutcome]:
        eta_eb, _ = empirical_bayes(ctx)
        sigma2 = bayes_noise_variance(ctx)
        result = fb_estimate(
            ctx.data,
            ctx.phi,
            sigma2,
            eta_eb,
            burn_in=ctx.fb_burn_in,
            N=ctx.samples_N,
            rng=ctx.rng('FB'),
            chain_sink=ctx.chain_sink('FB', ['c', 'rho', 'lambda']),
        )
        eta_mean = Hyperparams.from_array(result.eta_samples.mean(axis=0))
        outcome = EstimateOutcome(
            variant='MIXTURE',
            estimate=result.h_fb,
            accept_rate=result.acceptance_rate,
            eta=eta_mean,
        )
        try:
            outcome.confidence_set = fb_confidence_set(result, ctx.data, ctx.phi, sigma2, ctx.alpha)
        except (SysIdError, ValueError) as e:
            logger.error(f"[FB] Run {ctx.run_index} mixture set failed: {e}")
            outcome.error = type(e).__name__
        return [outcome]
