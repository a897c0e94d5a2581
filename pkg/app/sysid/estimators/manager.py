"""Estimator manager: runs the configured estimators on one Monte Carlo run."""

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional

from ..errors import EmptySet, SysIdError
from ..metrics import RunMetrics
from .base import Envelope, EstimateOutcome, Estimator, RunContext, RunRecord

logger = logging.getLogger(__name__)

ESTIMATOR_ORDER = ['PEM+OR', 'PEM+BIC', 'EB', 'FB']


@dataclass
class RunOutput:
    """Records and envelope data of one run."""
    records: List[RunRecord] = field(default_factory=list)
    envelopes: List[Envelope] = field(default_factory=list)


class EstimatorManager:
    """Registers estimators and evaluates them on a run, never letting one failure stop the others."""

    def __init__(
        self,
        estimators: Optional[List[str]] = None,
        variants: Optional[List[str]] = None,
        record_wall_time: bool = False,
    ):
        """Initialize the estimator manager.

        Args:
            estimators: Estimator tags to load (default: all four)
            variants: PEM confidence-set variants (default: ASYMP and LIK)
            record_wall_time: Store per-estimator wall time in the records
        """
        self.estimators: Dict[str, Estimator] = {}
        self.requested = list(estimators) if estimators is not None else list(ESTIMATOR_ORDER)
        self.variants = list(variants) if variants is not None else ['ASYMP', 'LIK']
        self.record_wall_time = record_wall_time

        unknown = set(self.requested) - set(ESTIMATOR_ORDER)
        if unknown:
            raise ValueError(f"Unknown estimators: {sorted(unknown)}")
        self._load_estimators()

    def _load_estimators(self):
        """Instantiate the requested estimators in canonical order."""
        from .bayes_estimators import EmpiricalBayesEstimator, FullBayesEstimator
        from .pem_estimators import BicEstimator, OracleEstimator

        factories = {
            'PEM+OR': lambda: OracleEstimator(self.variants),
            'PEM+BIC': lambda: BicEstimator(self.variants),
            'EB': EmpiricalBayesEstimator,
            'FB': FullBayesEstimator,
        }
        for name in ESTIMATOR_ORDER:
            if name in self.requested:
                self.register_estimator(factories[name]())
        logger.debug(f"[EstimatorManager] Loaded {len(self.estimators)} estimators")

    def register_estimator(self, estimator: Estimator):
        """Register an estimator, replacing any with the same name."""
        self.estimators[estimator.name] = estimator
        logger.debug(f"[EstimatorManager] Registered estimator: {estimator.name}")

    def get_estimator_names(self) -> List[str]:
        return list(self.estimators)

    def run(self, ctx: RunContext) -> RunOutput:
        """Evaluate every registered estimator on the run.

        An estimator whose point estimate fails yields one error record per
        variant; the remaining estimators still run.
        """
        output = RunOutput()
        for name, estimator in self.estimators.items():
            start = time.perf_counter()
            try:
                outcomes = estimator.estimate(ctx)
            except Exception as e:
                logger.error(f"[EstimatorManager] Run {ctx.run_index}: {name} failed: {e}")
                for variant in estimator.variants:
                    output.records.append(RunRecord(
                        run_index=ctx.run_index,
                        seed=ctx.seed,
                        estimator=name,
                        variant=variant,
                        error=type(e).__name__,
                    ))
                continue
            wall_ms = (time.perf_counter() - start) * 1000.0 if self.record_wall_time else None

            for outcome in outcomes:
                try:
                    record, envelope = self._evaluate(ctx, name, outcome)
                except (SysIdError, ValueError) as e:
                    logger.error(f"[EstimatorManager] Run {ctx.run_index}: {name}/{outcome.variant} not scored: {e}")
                    record, envelope = RunRecord(
                        run_index=ctx.run_index,
                        seed=ctx.seed,
                        estimator=name,
                        variant=outcome.variant,
                        error=type(e).__name__,
                    ), None
                record.wall_ms = wall_ms
                output.records.append(record)
                if envelope is not None:
                    output.envelopes.append(envelope)
        return output

    def _evaluate(self, ctx: RunContext, name: str, outcome: EstimateOutcome):
        confidence_set = outcome.confidence_set
        error = outcome.error
        try:
            metrics = RunMetrics.evaluate(ctx.true_h, outcome.estimate, confidence_set, name, outcome.variant)
        except EmptySet as e:
            logger.warning(f"[EstimatorManager] Run {ctx.run_index}: {name}/{outcome.variant} set is empty")
            metrics = RunMetrics.evaluate(ctx.true_h, outcome.estimate, estimator_tag=name, variant=outcome.variant)
            confidence_set, error = None, type(e).__name__

        record = RunRecord(
            run_index=ctx.run_index,
            seed=ctx.seed,
            estimator=metrics.estimator_tag,
            variant=metrics.variant,
            fit=metrics.fit,
            coverage=metrics.coverage,
            set_size=metrics.set_size,
            order_selected=outcome.order_selected,
            accept_rate=outcome.accept_rate,
            error=error,
        )
        if outcome.eta is not None:
            record.eta_c, record.eta_rho, record.eta_lambda = outcome.eta.c, outcome.eta.rho, outcome.eta.lam
        if confidence_set is None:
            return record, None

        envelope = Envelope(
            run_index=ctx.run_index,
            estimator=name,
            variant=outcome.variant,
            true_h=ctx.true_h.taps,
            estimate=outcome.estimate.taps,
            lower=confidence_set.lower,
            upper=confidence_set.upper,
        )
        return record, envelope

    def __repr__(self) -> str:
        return f"<EstimatorManager estimators={self.get_estimator_names()}>"
