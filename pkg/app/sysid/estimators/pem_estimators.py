"""PEM estimators: oracle and BIC order selection, each with ASYMP and LIK confidence sets."""

import logging
from abc import abstractmethod
from typing import Dict, List, Optional

from ..errors import SysIdError
from ..mcmc import AMChain
from ..pem import (
    PemFit,
    asymptotic_covariance,
    fit_order_range,
    sample_asymptotic_confidence,
    sample_likelihood_confidence,
    select_order_bic,
    select_order_oracle,
)
from .base import EstimateOutcome, Estimator, RunContext

logger = logging.getLogger(__name__)

PEM_VARIANTS = ['ASYMP', 'LIK']


def shared_fits(ctx: RunContext) -> Dict[int, PemFit]:
    """Per-order fits over the run's order range, shared by both selectors."""
    return ctx.cached('pem_fits', lambda: fit_order_range(ctx.data, ctx.bic_order_range, ctx.rng('PEM-FITS')))


class PemEstimator(Estimator):
    """Output-error PEM fit at a selected order plus sampled parametric sets."""

    def __init__(self, name: str, variants: Optional[List[str]] = None):
        super().__init__(name, list(variants) if variants is not None else list(PEM_VARIANTS))
        unknown = set(self.variants) - set(PEM_VARIANTS)
        if unknown:
            raise ValueError(f"Unsupported PEM variants: {sorted(unknown)}")

    @abstractmethod
    def select(self, ctx: RunContext, fits: Dict[int, PemFit]) -> PemFit:
        pass

    def estimate(self, ctx: RunContext) -> List[EstimateOutcome]:
        fit = self.select(ctx, shared_fits(ctx))
        estimate = fit.impulse(ctx.n)
        outcomes = []
        for variant in self.variants:
            outcome = EstimateOutcome(variant=variant, estimate=estimate, order_selected=fit.order)
            try:
                if variant == 'ASYMP':
                    outcome.confidence_set = self._asymptotic_set(ctx, fit)
                else:
                    outcome.confidence_set, outcome.accept_rate = self._likelihood_set(ctx, fit)
            except (SysIdError, ValueError) as e:
                logger.error(f"[{self.name}] Run {ctx.run_index} {variant} set failed: {e}")
                outcome.error = type(e).__name__
            outcomes.append(outcome)
        return outcomes

    def _asymptotic_set(self, ctx: RunContext, fit: PemFit):
        cov = asymptotic_covariance(fit, ctx.data)
        return sample_asymptotic_confidence(
            fit, cov, ctx.data.T, ctx.samples_N, ctx.alpha, ctx.n, ctx.rng(f"{self.name}/ASYMP")
        )

    def _likelihood_set(self, ctx: RunContext, fit: PemFit):
        sigma2 = ctx.data.sigma2 if ctx.sigma2_mode == 'true' else fit.sigma2_hat
        chains: List[AMChain] = []
        names = [f"b{k}" for k in range(1, fit.theta.nb + 1)] + [f"f{k}" for k in range(1, fit.theta.nf + 1)]
        dump = ctx.chain_sink(f"{self.name.replace('+', '-')}-LIK", names)

        def sink(chain: AMChain) -> None:
            chains.append(chain)
            if dump is not None:
                dump(chain)

        confidence_set = sample_likelihood_confidence(
            fit,
            ctx.data,
            sigma2,
            ctx.samples_N,
            ctx.alpha,
            ctx.n,
            ctx.rng(f"{self.name}/LIK"),
            burn_in=ctx.lik_burn_in,
            chain_sink=sink,
        )
        return confidence_set, chains[0].acceptance_rate


class OracleEstimator(PemEstimator):
    """PEM+OR: the order whose impulse response best fits the true one."""

    def __init__(self, variants: Optional[List[str]] = None):
        super().__init__('PEM+OR', variants)

    def select(self, ctx: RunContext, fits: Dict[int, PemFit]) -> PemFit:
        return select_order_oracle(ctx.data, ctx.bic_order_range, ctx.true_h, fits=fits)


class BicEstimator(PemEstimator):
    """PEM+BIC: the order minimizing BIC."""

    def __init__(self, variants: Optional[List[str]] = None):
        super().__init__('PEM+BIC', variants)

    def select(self, ctx: RunContext, fits: Dict[int, PemFit]) -> PemFit:
        return select_order_bic(ctx.data, ctx.bic_order_range, fits=fits)
