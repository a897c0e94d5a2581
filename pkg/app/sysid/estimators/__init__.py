"""Pluggable impulse-response estimators and their manager."""

from .base import Envelope, EstimateOutcome, Estimator, RECORD_COLUMNS, RunContext, RunRecord
from .bayes_estimators import EmpiricalBayesEstimator, FullBayesEstimator
from .manager import ESTIMATOR_ORDER, EstimatorManager, RunOutput
from .pem_estimators import BicEstimator, OracleEstimator

__all__ = [
    'BicEstimator',
    'ESTIMATOR_ORDER',
    'EmpiricalBayesEstimator',
    'Envelope',
    'EstimateOutcome',
    'Estimator',
    'EstimatorManager',
    'FullBayesEstimator',
    'OracleEstimator',
    'RECORD_COLUMNS',
    'RunContext',
    'RunOutput',
    'RunRecord',
]
