"""Adaptive Metropolis sampling and Full Bayes impulse-response estimation.

The sampler keeps the running mean and the unbiased sample covariance C of
every point it has produced (the starting mode included). Once
``adapt_start`` points exist the proposal covariance is s_d C + eps I,
which is the usual Adaptive Metropolis recursion written for C instead of
for the scaled proposal. Before that the proposal is the negative inverse
Hessian at the mode.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import logsumexp

from .bayes import C_MAX, GaussianPosterior, Hyperparams, MarginalLikelihood
from .confidence import ConfidenceSet, select_highest_density
from .core import Dataset, ImpulseResponse, RegressorMatrix
from .errors import ChainStalled, NonPositiveDefinite

logger = logging.getLogger(__name__)

LogTarget = Callable[[np.ndarray], float]

TARGET_ACCEPTANCE = 0.30
EPSILON = 1e-8
HESSIAN_STEP = 1e-4
FALLBACK_SCALE = 1e-2
SCALE_FACTOR = 1.3
SCALE_WINDOW = 200
MIN_ACCEPTANCE = 0.01
DEFAULT_BURN_IN = 3000
# Mixture components scored per logsumexp block
SCORING_BLOCK = 256
# Shared variance floor of the mixture components, relative to their spread
MIXTURE_FLOOR = 1e-10


@dataclass
class AMState:
    """Mutable state of one Adaptive Metropolis chain."""
    current: np.ndarray
    current_log_target: float
    initial_cov: np.ndarray
    mean: np.ndarray
    sample_cov: np.ndarray
    s_d: float
    epsilon: float = EPSILON
    adapt_start: int = 100
    i: int = 1
    accepts: int = 0

    @property
    def dim(self) -> int:
        return self.current.size

    @property
    def cov(self) -> np.ndarray:
        """Proposal covariance for the next step."""
        if self.i < self.adapt_start:
            return self.initial_cov
        return self.s_d * self.sample_cov + self.epsilon * np.eye(self.dim)

    def absorb(self, x: np.ndarray) -> None:
        """Add a chain point to the running mean and sample covariance."""
        self.i += 1
        k = self.i
        delta = x - self.mean
        self.mean = self.mean + delta / k
        self.sample_cov = ((k - 2) / (k - 1)) * self.sample_cov + np.outer(delta, delta) / k


@dataclass(frozen=True)
class AMChain:
    """Kept samples of an Adaptive Metropolis run."""
    samples: np.ndarray
    log_target: np.ndarray
    acceptance_rate: float
    accepted: np.ndarray
    s_d: float
    burn_in: int

    def __len__(self) -> int:
        return self.samples.shape[0]

    def to_frame(self, names: Optional[Sequence[str]] = None) -> pd.DataFrame:
        """One row per kept sample: iteration, parameters, log-target, accept flag."""
        names = list(names) if names is not None else [f"x{j}" for j in range(self.samples.shape[1])]
        frame = pd.DataFrame(self.samples, columns=names)
        frame.insert(0, "iteration", np.arange(self.burn_in, self.burn_in + len(self)))
        frame["log_target"] = self.log_target
        frame["accepted"] = self.accepted
        return frame


@dataclass(frozen=True)
class FbResult:
    """Full Bayes output: hyperparameter chain and one impulse response per kept state."""
    eta_samples: np.ndarray
    h_samples: np.ndarray
    h_fb: ImpulseResponse
    acceptance_rate: float
    chain: Optional[AMChain] = field(default=None, compare=False)
    components: Tuple[GaussianPosterior, ...] = field(default=(), compare=False)
    component_counts: Optional[np.ndarray] = field(default=None, compare=False)


def _hessian(log_target: LogTarget, x: np.ndarray, step: np.ndarray) -> np.ndarray:
    """Central finite-difference Hessian, symmetrized."""
    d = x.size
    center = log_target(x)
    hessian = np.empty((d, d))
    basis = np.eye(d) * step
    for a in range(d):
        plus, minus = log_target(x + basis[a]), log_target(x - basis[a])
        hessian[a, a] = (plus - 2.0 * center + minus) / step[a] ** 2
        for b in range(a + 1, d):
            value = (
                log_target(x + basis[a] + basis[b])
                - log_target(x + basis[a] - basis[b])
                - log_target(x - basis[a] + basis[b])
                + log_target(x - basis[a] - basis[b])
            ) / (4.0 * step[a] * step[b])
            hessian[a, b] = hessian[b, a] = value
    return (hessian + hessian.T) / 2.0


def am_init(
    mode: np.ndarray,
    log_target: LogTarget,
    step: Union[float, np.ndarray] = HESSIAN_STEP,
    epsilon: float = EPSILON,
    adapt_start: Optional[int] = None,
) -> AMState:
    """Initial chain state at the mode.

    The initial proposal covariance is the negative inverse Hessian of the
    log-target at the mode, or 1e-2 I when that is not positive definite.

    Args:
        mode: Starting point (posterior mode)
        log_target: Log-density, -inf outside its support
        step: Finite-difference step, scalar or one per coordinate
        epsilon: Regularization added to the adapted covariance
        adapt_start: Points needed before the adapted covariance is used
            (default max(100, 10 d))

    Raises:
        ValueError: If the log-target is not finite at the mode
    """
    mode = np.atleast_1d(np.asarray(mode, dtype=float)).copy()
    d = mode.size
    value = log_target(mode)
    if not np.isfinite(value):
        raise ValueError("log_target must be finite at the mode")

    steps = np.broadcast_to(np.asarray(step, dtype=float), (d,)).copy()
    initial = FALLBACK_SCALE * np.eye(d)
    if np.all(steps > 0):
        hessian = _hessian(log_target, mode, steps)
        if np.all(np.isfinite(hessian)):
            try:
                candidate = -np.linalg.inv(hessian)
                candidate = (candidate + candidate.T) / 2.0
                np.linalg.cholesky(candidate)
                initial = candidate
            except np.linalg.LinAlgError:
                logger.debug("[AM] Hessian at the mode is not negative definite, using 1e-2 I")
        else:
            logger.debug("[AM] Hessian at the mode is not finite, using 1e-2 I")

    return AMState(
        current=mode,
        current_log_target=float(value),
        initial_cov=initial,
        mean=mode.copy(),
        sample_cov=np.zeros((d, d)),
        s_d=2.4 ** 2 / d,
        epsilon=epsilon,
        adapt_start=adapt_start if adapt_start is not None else max(100, 10 * d),
    )


def _draw_proposal(state: AMState, rng: np.random.Generator) -> np.ndarray:
    cov = state.cov
    try:
        lower = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        values, vectors = np.linalg.eigh(cov)
        lower = vectors * np.sqrt(np.maximum(values, state.epsilon))
    return state.current + lower @ rng.standard_normal(state.dim)


def am_step(state: AMState, log_target: LogTarget, rng: np.random.Generator) -> Tuple[AMState, np.ndarray]:
    """One Metropolis step followed by the covariance update.

    The state is updated in place and returned with the new chain point.
    Proposals with a non-finite log-target are rejected.
    """
    proposal = _draw_proposal(state, rng)
    proposal_value = log_target(proposal)
    accepted = False
    if np.isfinite(proposal_value):
        log_ratio = proposal_value - state.current_log_target
        accepted = bool(np.log(rng.uniform()) <= log_ratio)
    if accepted:
        state.current = proposal
        state.current_log_target = float(proposal_value)
        state.accepts += 1
    state.absorb(state.current)
    return state, state.current


def run_am(
    log_target: LogTarget,
    mode: np.ndarray,
    burn_in: int = DEFAULT_BURN_IN,
    N: int = 7200,
    target_rate: float = TARGET_ACCEPTANCE,
    rng: Optional[np.random.Generator] = None,
    epsilon: float = EPSILON,
    adapt_start: Optional[int] = None,
    step: Union[float, np.ndarray] = HESSIAN_STEP,
    state: Optional[AMState] = None,
) -> AMChain:
    """Run burn_in + N Adaptive Metropolis steps and keep the last N.

    During burn-in s_d is multiplied (divided) by 1.3 after every 200-step
    window whose acceptance rate is above (below) ``target_rate``; it is
    frozen afterwards.

    Args:
        log_target: Log-density, -inf outside its support
        mode: Starting point
        burn_in: Discarded steps
        N: Kept steps
        target_rate: Acceptance rate steered to during burn-in
        rng: Random generator
        epsilon: Covariance regularization
        adapt_start: See ``am_init``
        step: Finite-difference step of the initial Hessian
        state: Pre-built initial state (skips ``am_init``)

    Returns:
        AMChain with N samples and the post-burn-in acceptance rate

    Raises:
        ChainStalled: If fewer than 1% of the post-burn-in proposals are accepted
    """
    if burn_in < 1 or N < 1:
        raise ValueError(f"burn_in and N must be >= 1, got {burn_in} and {N}")
    rng = rng if rng is not None else np.random.default_rng()
    if state is None:
        state = am_init(mode, log_target, step=step, epsilon=epsilon, adapt_start=adapt_start)

    window_start = state.accepts
    for i in range(1, burn_in + 1):
        am_step(state, log_target, rng)
        if i % SCALE_WINDOW == 0:
            rate = (state.accepts - window_start) / SCALE_WINDOW
            state.s_d = state.s_d * SCALE_FACTOR if rate > target_rate else state.s_d / SCALE_FACTOR
            window_start = state.accepts

    samples = np.empty((N, state.dim))
    values = np.empty(N)
    accepted = np.zeros(N, dtype=bool)
    kept_start = state.accepts
    for k in range(N):
        before = state.accepts
        am_step(state, log_target, rng)
        samples[k] = state.current
        values[k] = state.current_log_target
        accepted[k] = state.accepts > before

    rate = (state.accepts - kept_start) / N
    logger.debug(f"[AM] d={state.dim}, acceptance {rate:.3f}, s_d={state.s_d:.4g}")
    if rate < MIN_ACCEPTANCE:
        raise ChainStalled(f"Acceptance rate {rate:.4f} after burn-in is below {MIN_ACCEPTANCE}")
    return AMChain(
        samples=samples,
        log_target=values,
        acceptance_rate=float(rate),
        accepted=accepted,
        s_d=float(state.s_d),
        burn_in=burn_in,
    )


def hyperparameter_log_target(likelihood: MarginalLikelihood, c_max: float = C_MAX) -> LogTarget:
    """ln p(Y | eta) under a flat prior on the hyperparameter box (else -inf)."""

    def log_target(values: np.ndarray) -> float:
        if not Hyperparams.in_box(values, c_max):
            return -np.inf
        try:
            return likelihood.log_likelihood(Hyperparams.from_array(values))
        except NonPositiveDefinite:
            return -np.inf

    return log_target


def _box_steps(eta: Hyperparams, c_max: float) -> np.ndarray:
    distance = np.array([
        min(eta.c, c_max - eta.c),
        1.0 - abs(eta.rho),
        min(eta.lam, 1.0 - eta.lam),
    ])
    return np.minimum(HESSIAN_STEP, 0.1 * distance)


def fb_estimate(
    data: Dataset,
    phi: RegressorMatrix,
    sigma2: float,
    eta_eb: Hyperparams,
    burn_in: int = DEFAULT_BURN_IN,
    N: int = 7200,
    rng: Optional[np.random.Generator] = None,
    c_max: float = C_MAX,
    chain_sink: Optional[Callable[[AMChain], None]] = None,
) -> FbResult:
    """Full Bayes impulse response by sampling the hyperparameter posterior.

    Runs Adaptive Metropolis on p(eta | Y) from the Empirical Bayes estimate,
    then draws one impulse response from p(h | Y, eta) for every kept eta.
    Repeated chain states share one conditional posterior.

    Args:
        data: Identification data
        phi: Regressor matrix of ``data.u``
        sigma2: Noise variance
        eta_eb: Empirical Bayes hyperparameters (chain start)
        burn_in: Discarded chain steps
        N: Kept samples
        rng: Random generator
        c_max: Upper bound on c
        chain_sink: Optional callback receiving the hyperparameter chain

    Returns:
        FbResult with h_fb the mean of the impulse-response draws
    """
    rng = rng if rng is not None else np.random.default_rng()
    likelihood = MarginalLikelihood(data.y, phi, sigma2)
    log_target = hyperparameter_log_target(likelihood, c_max)
    chain = run_am(
        log_target,
        eta_eb.as_array(),
        burn_in=burn_in,
        N=N,
        rng=rng,
        step=_box_steps(eta_eb, c_max),
    )
    if chain_sink is not None:
        chain_sink(chain)

    unique, inverse, counts = np.unique(chain.samples, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    h_samples = np.empty((N, likelihood.n))
    components = []
    for index, values in enumerate(unique):
        post = likelihood.posterior(Hyperparams.from_array(values))
        members = np.flatnonzero(inverse == index)
        h_samples[members] = post.draw(rng, members.size)
        components.append(post)

    logger.info(f"[FB] {unique.shape[0]} distinct eta states, acceptance {chain.acceptance_rate:.3f}")
    return FbResult(
        eta_samples=chain.samples,
        h_samples=h_samples,
        h_fb=ImpulseResponse(h_samples.mean(axis=0)),
        acceptance_rate=chain.acceptance_rate,
        chain=chain,
        components=tuple(components),
        component_counts=counts,
    )


def mixture_floor(components: Sequence[GaussianPosterior]) -> float:
    """Shared variance floor: MIXTURE_FLOOR times the largest average tap variance."""
    spread = max((float(np.trace(post.cov)) / post.n for post in components), default=0.0)
    return MIXTURE_FLOOR * spread if spread > 0 else MIXTURE_FLOOR


def mixture_log_density(
    x: np.ndarray,
    components: Sequence[GaussianPosterior],
    counts: Optional[np.ndarray] = None,
    delta: Optional[float] = None,
) -> np.ndarray:
    """log[(1/N) sum_j p(x | Y, eta_j)] with component multiplicities ``counts``.

    Every component is a full n-dimensional Gaussian with covariance
    cov_j + delta I, one ``delta`` for all of them (default ``mixture_floor``).
    """
    x = np.atleast_2d(x)
    counts = np.ones(len(components)) if counts is None else np.asarray(counts, dtype=float)
    weights = counts / counts.sum()
    delta = mixture_floor(components) if delta is None else float(delta)
    total = np.full(x.shape[0], -np.inf)
    for start in range(0, len(components), SCORING_BLOCK):
        block = components[start:start + SCORING_BLOCK]
        log_densities = np.vstack([post.full_logpdf(x, delta) for post in block])
        partial = logsumexp(log_densities, axis=0, b=weights[start:start + SCORING_BLOCK, None])
        total = np.logaddexp(total, partial)
    return total


def fb_confidence_set(
    result: FbResult,
    data: Dataset,
    phi: RegressorMatrix,
    sigma2: float,
    alpha: float,
) -> ConfidenceSet:
    """Keep the alpha-fraction of FB draws with the highest mixture density."""
    if result.components:
        components, counts = result.components, result.component_counts
    else:
        likelihood = MarginalLikelihood(data.y, phi, sigma2)
        unique, counts = np.unique(result.eta_samples, axis=0, return_counts=True)
        components = [likelihood.posterior(Hyperparams.from_array(values)) for values in unique]
    scores = mixture_log_density(result.h_samples, components, counts)
    return select_highest_density(result.h_samples, scores, alpha)
