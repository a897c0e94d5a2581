"""Backend services for the identification benchmark.

This module contains the Monte Carlo orchestration, separated from the CLI.
All functions are testable without the command-line layer.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional

import pandas as pd

from settings import BenchConfig
from sysid.core import generate_benchmark_data, impulse_response
from sysid.estimators import (
    ESTIMATOR_ORDER,
    RECORD_COLUMNS,
    Envelope,
    EstimatorManager,
    RunContext,
    RunOutput,
    RunRecord,
)
from sysid.seeding import derive_seed, make_rng

logger = logging.getLogger(__name__)

METRICS = ['fit', 'coverage', 'set_size']
SUMMARY_COLUMNS = ['estimator', 'variant', 'metric', 'count', 'mean', 'median', 'q1', 'q3', 'min', 'max']
VARIANT_ORDER = ['ASYMP', 'LIK', 'ELLIPSOID', 'MIXTURE']
INTEGER_COLUMNS = ['run_index', 'seed', 'order_selected']


@dataclass
class BenchmarkResult:
    """All records and envelope data of a study, ordered by run index."""
    records: List[RunRecord] = field(default_factory=list)
    envelopes: List[Envelope] = field(default_factory=list)


def run_single(config: BenchConfig, run_index: int, chain_dir: Optional[Path] = None) -> RunOutput:
    """Generate the dataset of one run and evaluate every configured estimator on it.

    Args:
        config: Study configuration
        run_index: Index of the run (0-based)
        chain_dir: Directory for chain dumps, or None

    Returns:
        RunOutput with one record per (estimator, variant)
    """
    seed = derive_seed(config.master_seed, run_index)
    manager = EstimatorManager(config.estimators, config.confidence_variants, config.record_wall_time)
    try:
        system, data = generate_benchmark_data(
            config.order, config.pole_radius, config.T, config.band, config.snr,
            make_rng(seed, 'data'), seed=seed,
        )
        true_h = impulse_response(system, config.n)
    except Exception as e:
        logger.error(f"[Bench] Run {run_index}: data generation failed: {e}")
        records = [
            RunRecord(run_index=run_index, seed=seed, estimator=name, variant=variant, error=type(e).__name__)
            for name, estimator in manager.estimators.items()
            for variant in estimator.variants
        ]
        return RunOutput(records=records)

    ctx = RunContext(
        run_index=run_index,
        seed=seed,
        system=system,
        data=data,
        true_h=true_h,
        alpha=config.alpha,
        samples_N=config.samples_N,
        fb_burn_in=config.fb_burn_in,
        lik_burn_in=config.lik_burn_in,
        bic_order_range=tuple(config.bic_order_range),
        sigma2_mode=config.sigma2_mode,
        chain_dir=chain_dir,
    )
    output = manager.run(ctx)
    logger.info(f"[Bench] Run {run_index} finished with {len(output.records)} records")
    return output


class BenchmarkService:
    """Service for running and summarizing Monte Carlo studies."""

    def __init__(self, config: BenchConfig):
        """Initialize the benchmark service.

        Args:
            config: Validated study configuration
        """
        self.config = config

    def run_benchmark(self, chain_dir: Optional[Path] = None) -> BenchmarkResult:
        """Run every Monte Carlo run, in parallel when ``config.jobs > 1``.

        Per-run failures end up as error records; the study never aborts
        because of one estimator.
        """
        config = self.config
        indices = list(range(config.runs))
        chain_dir = chain_dir if config.dump_chains else None
        logger.info(
            f"[Bench] Starting {config.runs} runs with {config.estimators} "
            f"(N={config.samples_N}, jobs={config.jobs}, seed={config.master_seed})"
        )

        if config.jobs > 1 and len(indices) > 1:
            with ProcessPoolExecutor(max_workers=config.jobs) as pool:
                outputs = list(pool.map(run_single, [config] * len(indices), indices, [chain_dir] * len(indices)))
        else:
            outputs = [run_single(config, index, chain_dir) for index in indices]

        result = BenchmarkResult()
        for output in outputs:
            result.records.extend(output.records)
            result.envelopes.extend(output.envelopes)
        failures = sum(1 for record in result.records if record.error)
        logger.info(f"[Bench] Finished: {len(result.records)} records, {failures} with errors")
        return result

    @staticmethod
    def summarize(records: Iterable[RunRecord]) -> pd.DataFrame:
        """Boxplot statistics of fit, coverage and set size per estimator and variant."""
        return summarize_records(records)


def records_frame(records: Iterable[RunRecord]) -> pd.DataFrame:
    """Records as a DataFrame in canonical (run, estimator, variant) order."""
    frame = pd.DataFrame([record.to_dict() for record in records], columns=RECORD_COLUMNS)
    for column in INTEGER_COLUMNS:
        frame[column] = frame[column].astype('Int64')
    if frame.empty:
        return frame
    frame['_estimator_rank'] = frame['estimator'].map(_rank(ESTIMATOR_ORDER))
    frame['_variant_rank'] = frame['variant'].map(_rank(VARIANT_ORDER))
    frame = frame.sort_values(['run_index', '_estimator_rank', 'estimator', '_variant_rank', 'variant'], kind='mergesort')
    return frame.drop(columns=['_estimator_rank', '_variant_rank']).reset_index(drop=True)


def _rank(order: List[str]):
    ranks = {name: index for index, name in enumerate(order)}
    return lambda name: ranks.get(name, len(order))


def summarize_records(records: Iterable[RunRecord]) -> pd.DataFrame:
    """Per (estimator, variant, metric): count, mean, median, quartiles, min and max.

    Records are put in canonical order first, so the result does not depend
    on the order in which record sets were concatenated.
    """
    frame = records_frame(records)
    if frame.empty:
        return pd.DataFrame(columns=SUMMARY_COLUMNS)

    rows = []
    for (estimator, variant), group in frame.groupby(['estimator', 'variant'], sort=False):
        for metric in METRICS:
            values = pd.to_numeric(group[metric], errors='coerce').dropna()
            if values.empty:
                continue
            rows.append({
                'estimator': estimator,
                'variant': variant,
                'metric': metric,
                'count': int(values.size),
                'mean': float(values.mean()),
                'median': float(values.median()),
                'q1': float(values.quantile(0.25)),
                'q3': float(values.quantile(0.75)),
                'min': float(values.min()),
                'max': float(values.max()),
            })
    summary = pd.DataFrame(rows, columns=SUMMARY_COLUMNS)
    summary['_estimator_rank'] = summary['estimator'].map(_rank(ESTIMATOR_ORDER))
    summary['_variant_rank'] = summary['variant'].map(_rank(VARIANT_ORDER))
    summary['_metric_rank'] = summary['metric'].map(_rank(METRICS))
    summary = summary.sort_values(['_estimator_rank', '_variant_rank', '_metric_rank'], kind='mergesort')
    return summary.drop(columns=['_estimator_rank', '_variant_rank', '_metric_rank']).reset_index(drop=True)


def fit_table(records: Iterable[RunRecord]) -> pd.DataFrame:
    """Average impulse-response fit per estimator (one value per run and estimator)."""
    frame = records_frame(records)
    columns = ['estimator', 'runs', 'mean_fit', 'median_fit']
    if frame.empty:
        return pd.DataFrame(columns=columns)
    fits = frame.dropna(subset=['fit']).drop_duplicates(subset=['run_index', 'estimator'])
    rows = [
        {
            'estimator': name,
            'runs': int(group['fit'].size),
            'mean_fit': float(group['fit'].astype(float).mean()),
            'median_fit': float(group['fit'].astype(float).median()),
        }
        for name, group in fits.groupby('estimator', sort=False)
    ]
    return pd.DataFrame(rows, columns=columns)
