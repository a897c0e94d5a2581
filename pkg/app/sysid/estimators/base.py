"""Base abstraction for impulse-response estimators in the benchmark."""

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from ..bayes import Hyperparams
from ..confidence import ConfidenceSet
from ..core import Dataset, DiscreteSystem, ImpulseResponse, RegressorMatrix, build_regressor
from ..mcmc import AMChain
from ..seeding import make_rng


@dataclass
class RunRecord:
    """One row of the records table: a (run, estimator, variant) combination."""
    run_index: int
    seed: int
    estimator: str
    variant: str
    fit: Optional[float] = None
    coverage: Optional[float] = None
    set_size: Optional[float] = None
    wall_ms: Optional[float] = None
    order_selected: Optional[int] = None
    accept_rate: Optional[float] = None
    error: Optional[str] = None
    eta_c: Optional[float] = None
    eta_rho: Optional[float] = None
    eta_lambda: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary format."""
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> 'RunRecord':
        """Build a record from a parsed row; NaN and empty cells become None."""
        kwargs = {}
        for f in fields(cls):
            value = values.get(f.name)
            if value is None or (isinstance(value, float) and math.isnan(value)) or value == "":
                kwargs[f.name] = None
            elif f.name in ('run_index', 'seed', 'order_selected'):
                kwargs[f.name] = int(value)
            elif f.name in ('estimator', 'variant', 'error'):
                kwargs[f.name] = str(value)
            else:
                kwargs[f.name] = float(value)
        return cls(**kwargs)


RECORD_COLUMNS = [f.name for f in fields(RunRecord)]


@dataclass
class EstimateOutcome:
    """Point estimate and (optional) confidence set of one estimator variant."""
    variant: str
    estimate: ImpulseResponse
    confidence_set: Optional[ConfidenceSet] = None
    order_selected: Optional[int] = None
    accept_rate: Optional[float] = None
    eta: Optional[Hyperparams] = None
    error: Optional[str] = None


@dataclass
class Envelope:
    """Tap-wise envelope of a confidence set next to the true and estimated responses."""
    run_index: int
    estimator: str
    variant: str
    true_h: np.ndarray
    estimate: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def to_rows(self) -> List[Dict[str, Any]]:
        return [
            {
                'run_index': self.run_index,
                'estimator': self.estimator,
                'variant': self.variant,
                'tap': k + 1,
                'true': float(self.true_h[k]),
                'estimate': float(self.estimate[k]),
                'lower': float(self.lower[k]),
                'upper': float(self.upper[k]),
            }
            for k in range(self.true_h.size)
        ]


@dataclass
class RunContext:
    """Everything the estimators of one Monte Carlo run share.

    Intermediate results that several estimators need (the per-order PEM
    fits, the Empirical Bayes hyperparameters) are computed once and cached.
    Random streams are derived from the run seed and a label, so the
    estimators never share a generator.
    """
    run_index: int
    seed: int
    system: DiscreteSystem
    data: Dataset
    true_h: ImpulseResponse
    alpha: float = 0.95
    samples_N: int = 7200
    fb_burn_in: int = 3000
    lik_burn_in: int = 3000
    bic_order_range: Sequence[int] = tuple(range(2, 31))
    sigma2_mode: str = "estimated"
    chain_dir: Optional[Path] = None
    cache: Dict[str, Any] = field(default_factory=dict, repr=False)

    @property
    def n(self) -> int:
        return len(self.true_h)

    def rng(self, label: str) -> np.random.Generator:
        """Independent generator for ``label`` within this run."""
        return make_rng(self.seed, label)

    def cached(self, key: str, compute: Callable[[], Any]) -> Any:
        if key not in self.cache:
            self.cache[key] = compute()
        return self.cache[key]

    @property
    def phi(self) -> RegressorMatrix:
        return self.cached('phi', lambda: build_regressor(self.data.u, self.n))

    def chain_sink(self, tag: str, names: Optional[Sequence[str]] = None) -> Optional[Callable[[AMChain], None]]:
        """Callback writing a chain to ``chain_dir`` (None when dumps are off)."""
        if self.chain_dir is None:
            return None
        path = Path(self.chain_dir) / f"run{self.run_index:04d}_{tag}.csv"

        def write(chain: AMChain) -> None:
            path.parent.mkdir(parents=True, exist_ok=True)
            chain.to_frame(names).to_csv(path, index=False)

        return write


class Estimator(ABC):
    """Abstract base class for all estimators."""

    def __init__(self, name: str, variants: List[str]):
        """Initialize estimator.

        Args:
            name: Unique tag of this estimator (e.g. "EB")
            variants: Confidence-set variants this estimator produces
        """
        self.name = name
        self.variants = variants

    @abstractmethod
    def estimate(self, ctx: RunContext) -> List[EstimateOutcome]:
        """Compute the point estimate and one outcome per variant.

        Failures of a single confidence set are reported in the outcome's
        ``error``; a failing point estimate raises.

        Args:
            ctx: Shared state of the run

        Returns:
            One EstimateOutcome per variant
        """
        pass

    def __repr__(self) -> str:
        return f"<{self.__class__.__name__} name='{self.name}' variants={self.variants}>"
