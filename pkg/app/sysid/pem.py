"""Prediction-error identification of output-error models.

Covers the PEM point estimator (Levenberg-Marquardt with multi-start), BIC
and oracle order selection, the asymptotic parameter covariance and the two
sampled parametric confidence sets (truncated asymptotic Gaussian and
likelihood sampling).
"""

import logging
from dataclasses import dataclass, replace
from typing import Callable, Dict, Iterable, Optional

import numpy as np
from scipy.signal import lfilter
from scipy.stats import multivariate_normal

from .confidence import ConfidenceSet, select_highest_density
from .core import (
    Dataset,
    DiscreteSystem,
    ImpulseResponse,
    build_regressor,
    impulse_response,
    is_stable_polynomial,
    sample_disk_roots,
)
from .errors import AllFitsFailed, ChainStalled, SingularInformation, SysIdError, TruncationStarvation
from .metrics import impulse_fit
from .mcmc import AMChain, LogTarget, am_init, run_am

logger = logging.getLogger(__name__)

MAX_ITERATIONS = 200
INITIAL_DAMPING = 1e-3
DAMPING_FACTOR = 10.0
# Above this damping no step reduced J; the fit is reported as stalled
MAX_DAMPING = 1e16
RELATIVE_DECREASE_TOL = 1e-10
GRADIENT_TOL = 1e-8
RANDOM_STARTS = 5
CONDITION_LIMIT = 1e12
RIDGE_SCALE = 1e-10
TRUNCATION_ATTEMPTS_PER_SAMPLE = 1000
# Likelihood chains that stall are restarted with a smaller proposal and longer burn-in
LIKELIHOOD_CHAIN_ATTEMPTS = 3
RESTART_SHRINK = 4.0
# Radius used for randomized denominator initializations
INIT_POLE_RADIUS = 0.9
# Poles of the ARX initialization are pulled inside this radius
ARX_MAX_POLE_RADIUS = 0.99


@dataclass(frozen=True)
class OEParams:
    """Output-error parameters: B(q) = b1 q^-1 + ... , F(q) = 1 + f1 q^-1 + ..."""
    b: np.ndarray
    f: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'b', np.atleast_1d(np.asarray(self.b, dtype=float)))
        object.__setattr__(self, 'f', np.asarray(self.f, dtype=float).reshape(-1))

    @property
    def nb(self) -> int:
        return self.b.size

    @property
    def nf(self) -> int:
        return self.f.size

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate((self.b, self.f))

    @classmethod
    def from_vector(cls, vector: np.ndarray, nb: int, nf: int) -> 'OEParams':
        vector = np.asarray(vector, dtype=float)
        if vector.size != nb + nf:
            raise ValueError(f"Expected {nb + nf} parameters, got {vector.size}")
        return cls(b=vector[:nb], f=vector[nb:])

    @property
    def numerator(self) -> np.ndarray:
        return np.concatenate(([0.0], self.b))

    @property
    def denominator(self) -> np.ndarray:
        return np.concatenate(([1.0], self.f))

    def to_system(self) -> DiscreteSystem:
        return DiscreteSystem(self.numerator, self.denominator)

    def is_stable(self) -> bool:
        return is_stable_polynomial(self.denominator)


@dataclass(frozen=True)
class PemFit:
    """Result of a prediction-error fit."""
    theta: OEParams
    cost: float
    sigma2_hat: float
    converged: bool
    iterations: int
    stalled: bool = False

    @property
    def order(self) -> int:
        return self.theta.nb

    def impulse(self, n: int) -> ImpulseResponse:
        return impulse_response(self.theta.to_system(), n)


@dataclass(frozen=True)
class AsymptoticCovariance:
    """Estimated asymptotic covariance of sqrt(T) (theta_hat - theta)."""
    sigma_theta: np.ndarray


def predict_oe(theta: OEParams, u: np.ndarray) -> np.ndarray:
    """One-step OE predictor, i.e. the noiseless simulation [B/F] u with zero initial conditions."""
    return lfilter(theta.numerator, theta.denominator, np.asarray(u, dtype=float))


def pem_cost(theta: OEParams, data: Dataset) -> float:
    """Mean squared prediction error J(theta); inf if the prediction diverges."""
    residual = data.y - predict_oe(theta, data.u)
    with np.errstate(over='ignore', invalid='ignore'):
        cost = float(np.mean(residual ** 2))
    return cost if np.isfinite(cost) else np.inf


def _lagged(signal: np.ndarray, lags: int) -> np.ndarray:
    """Columns signal(t-1), ..., signal(t-lags) with zero pre-samples."""
    if lags == 0:
        return np.empty((signal.size, 0))
    return build_regressor(signal, lags).phi


def gradient_psi(theta: OEParams, u: np.ndarray) -> np.ndarray:
    """Predictor gradient d yhat / d theta, one row per time step.

    d yhat/d b_k = (1/F) u(t-k) and d yhat/d f_k = -(1/F) yhat(t-k).
    """
    u = np.asarray(u, dtype=float)
    if u.size == 0:
        return np.empty((0, theta.nb + theta.nf))
    denominator = theta.denominator
    filtered_u = lfilter([1.0], denominator, u)
    y_hat = lfilter(theta.numerator, denominator, u)
    filtered_y = lfilter([1.0], denominator, y_hat)
    return np.hstack((_lagged(filtered_u, theta.nb), -_lagged(filtered_y, theta.nf)))


def _stabilize(den: np.ndarray) -> np.ndarray:
    """Reflect unstable roots into the unit disk and cap their radius."""
    if den.size <= 1:
        return den
    roots = np.roots(den)
    outside = np.abs(roots) >= 1.0
    roots[outside] = 1.0 / np.conj(roots[outside])
    magnitude = np.abs(roots)
    too_close = magnitude > ARX_MAX_POLE_RADIUS
    roots[too_close] *= ARX_MAX_POLE_RADIUS / magnitude[too_close]
    return np.real(np.poly(roots))


def _solve_least_squares(regressors: np.ndarray, target: np.ndarray) -> np.ndarray:
    solution, *_ = np.linalg.lstsq(regressors, target, rcond=None)
    return solution


def arx_initialization(data: Dataset, nb: int, nf: int) -> OEParams:
    """Least-squares ARX fit F(q) y = B(q) u + e, with F made stable."""
    regressors = np.hstack((-_lagged(data.y, nf), _lagged(data.u, nb)))
    solution = _solve_least_squares(regressors, data.y)
    den = _stabilize(np.concatenate(([1.0], solution[:nf])))
    return OEParams(b=solution[nf:], f=den[1:])


def random_initialization(data: Dataset, nb: int, nf: int, rng: np.random.Generator) -> OEParams:
    """Random stable F, with B fitted by least squares on the F-filtered input."""
    den = np.real(np.poly(sample_disk_roots(nf, INIT_POLE_RADIUS, rng)))
    filtered_u = lfilter([1.0], den, data.u)
    b = _solve_least_squares(_lagged(filtered_u, nb), data.y)
    return OEParams(b=b, f=np.atleast_1d(den)[1:])


def _levenberg_marquardt(theta: OEParams, data: Dataset, max_iter: int) -> PemFit:
    """Damped Gauss-Newton descent on J, keeping every iterate stable."""
    nb, nf = theta.nb, theta.nf
    vector = theta.vector
    cost = pem_cost(theta, data)
    damping = INITIAL_DAMPING
    converged = stalled = False
    psi = residual = None
    iterations = 0

    for iterations in range(1, max_iter + 1):
        if psi is None:
            current = OEParams.from_vector(vector, nb, nf)
            residual = data.y - predict_oe(current, data.u)
            psi = gradient_psi(current, data.u)

        gradient = -2.0 * psi.T @ residual / data.T
        if cost == 0.0 or np.max(np.abs(gradient)) < GRADIENT_TOL:
            converged = True
            break

        gram = psi.T @ psi
        scaling = np.diag(gram) + np.finfo(float).tiny
        try:
            step = np.linalg.solve(gram + damping * np.diag(scaling), psi.T @ residual)
        except np.linalg.LinAlgError:
            damping *= DAMPING_FACTOR
            continue

        candidate = OEParams.from_vector(vector + step, nb, nf)
        new_cost = pem_cost(candidate, data) if candidate.is_stable() else np.inf

        if new_cost < cost:
            decrease = (cost - new_cost) / cost
            vector, cost = candidate.vector, new_cost
            psi = None
            damping = max(damping / DAMPING_FACTOR, 1e-12)
            if decrease < RELATIVE_DECREASE_TOL:
                converged = True
                break
        else:
            damping *= DAMPING_FACTOR
            if damping > MAX_DAMPING:
                logger.debug(f"[PEM] Damping saturated with gradient {np.max(np.abs(gradient)):.3g}, stopping")
                stalled = True
                break

    final = OEParams.from_vector(vector, nb, nf)
    return PemFit(
        theta=final, cost=cost, sigma2_hat=cost, converged=converged, iterations=iterations, stalled=stalled
    )


def fit_oe(
    data: Dataset,
    nb: int,
    nf: int,
    init: Optional[OEParams] = None,
    rng: Optional[np.random.Generator] = None,
    random_starts: int = RANDOM_STARTS,
    max_iter: int = MAX_ITERATIONS,
) -> PemFit:
    """Minimize J(theta) over OE models of orders (nb, nf).

    Runs Levenberg-Marquardt from an ARX-based start, ``random_starts``
    randomized starts and, when given, ``init``; returns the lowest-cost fit.

    Args:
        data: Identification data
        nb: Numerator order (>= 1)
        nf: Denominator order (>= 1)
        init: Optional extra starting point
        rng: Generator for randomized starts
        random_starts: Number of randomized starts
        max_iter: Iteration cap per start

    Returns:
        PemFit; ``converged`` is False when the best start hit the iteration
        cap or stalled (``stalled``: no damped step reduced J)

    Raises:
        ValueError: If orders are invalid or T <= nb + nf
        SysIdError: If no start produced a finite cost
    """
    if nb < 1 or nf < 1:
        raise ValueError(f"Orders must be >= 1, got nb={nb}, nf={nf}")
    if data.T <= nb + nf:
        raise ValueError(f"Need T > nb + nf, got T={data.T}, nb + nf={nb + nf}")
    rng = rng if rng is not None else np.random.default_rng(0)

    starts = [arx_initialization(data, nb, nf)]
    starts += [random_initialization(data, nb, nf, rng) for _ in range(random_starts)]
    if init is not None:
        if (init.nb, init.nf) != (nb, nf):
            raise ValueError(f"init has orders ({init.nb}, {init.nf}), expected ({nb}, {nf})")
        starts.append(init)

    best: Optional[PemFit] = None
    for start in starts:
        if not start.is_stable() or not np.isfinite(pem_cost(start, data)):
            continue
        fit = _levenberg_marquardt(start, data, max_iter)
        if best is None or fit.cost < best.cost:
            best = fit

    if best is None:
        raise SysIdError(f"No start produced a finite cost for nb={nb}, nf={nf}")
    if best.stalled:
        logger.warning(f"[PEM] Order ({nb}, {nf}) stalled before the gradient test passed (J={best.cost:.6g})")
    elif not best.converged:
        logger.warning(f"[PEM] Order ({nb}, {nf}) hit the iteration cap, keeping best iterate (J={best.cost:.6g})")
    return best


def asymptotic_covariance(fit: PemFit, data: Dataset) -> AsymptoticCovariance:
    """Sigma_theta = J(theta_hat) [(1/T) sum psi psi^T]^-1.

    Raises:
        SingularInformation: If the information matrix cannot be inverted
    """
    psi = gradient_psi(fit.theta, data.u)
    information = psi.T @ psi / data.T
    dim = information.shape[0]
    trace = float(np.trace(information))
    if not np.isfinite(trace) or trace <= 0.0:
        raise SingularInformation("Information matrix is zero or non-finite")

    if np.linalg.cond(information) > CONDITION_LIMIT:
        information = information + RIDGE_SCALE * trace / dim * np.eye(dim)
    try:
        inverse = np.linalg.inv(information)
    except np.linalg.LinAlgError as e:
        raise SingularInformation(f"Information matrix is singular: {e}")
    if not np.all(np.isfinite(inverse)):
        raise SingularInformation("Information matrix inverse is not finite")

    sigma_theta = fit.cost * inverse
    return AsymptoticCovariance(sigma_theta=(sigma_theta + sigma_theta.T) / 2.0)


def bic(fit: PemFit, T: int) -> float:
    """BIC(k) = T ln J + dim(theta) ln T."""
    dim = fit.theta.nb + fit.theta.nf
    return T * np.log(max(fit.cost, np.finfo(float).tiny)) + dim * np.log(T)


def fit_order_range(
    data: Dataset,
    order_range: Iterable[int],
    rng: Optional[np.random.Generator] = None,
) -> Dict[int, PemFit]:
    """Fit nb = nf = k for every k; orders that fail are logged and skipped."""
    orders = list(order_range)
    if not orders:
        raise ValueError("order_range must not be empty")
    rng = rng if rng is not None else np.random.default_rng(0)
    seeds = rng.integers(0, 2 ** 62, size=len(orders))

    fits: Dict[int, PemFit] = {}
    for order, seed in zip(orders, seeds):
        try:
            fits[order] = fit_oe(data, order, order, rng=np.random.default_rng(int(seed)))
        except (SysIdError, ValueError, np.linalg.LinAlgError) as e:
            logger.warning(f"[PEM] Skipping order {order}: {e}")
    return fits


def _fits_for(data, order_range, fits, rng) -> Dict[int, PemFit]:
    orders = list(order_range)
    if not orders:
        raise ValueError("order_range must not be empty")
    if fits is None:
        fits = fit_order_range(data, orders, rng)
    available = {k: fits[k] for k in orders if k in fits}
    if not available:
        raise AllFitsFailed(f"No order in {orders[0]}..{orders[-1]} could be fitted")
    return available


def select_order_bic(
    data: Dataset,
    order_range: Iterable[int],
    fits: Optional[Dict[int, PemFit]] = None,
    rng: Optional[np.random.Generator] = None,
) -> PemFit:
    """Return the fit minimizing BIC over the order range.

    Args:
        data: Identification data
        order_range: Candidate orders k (nb = nf = k)
        fits: Optional precomputed fits from ``fit_order_range``
        rng: Generator for the fits when they are not precomputed
    """
    available = _fits_for(data, order_range, fits, rng)
    scores = {k: bic(fit, data.T) for k, fit in available.items()}
    chosen = min(scores, key=lambda k: (scores[k], k))
    logger.info(f"[PEM] BIC selected order {chosen}")
    return available[chosen]


def select_order_oracle(
    data: Dataset,
    order_range: Iterable[int],
    true_h: ImpulseResponse,
    fits: Optional[Dict[int, PemFit]] = None,
    rng: Optional[np.random.Generator] = None,
) -> PemFit:
    """Return the fit whose impulse response best fits the true one."""
    available = _fits_for(data, order_range, fits, rng)
    n = len(true_h)
    scores = {k: impulse_fit(true_h, fit.impulse(n)) for k, fit in available.items()}
    chosen = max(scores, key=lambda k: (scores[k], -k))
    logger.info(f"[PEM] Oracle selected order {chosen} (fit {scores[chosen]:.2f})")
    return available[chosen]


def theta_impulse_responses(vectors: np.ndarray, nb: int, nf: int, n: int) -> np.ndarray:
    """Map each parameter vector (row) to its length-n impulse response."""
    pulse = np.zeros(n + 1)
    pulse[0] = 1.0
    responses = np.empty((vectors.shape[0], n))
    for i, vector in enumerate(vectors):
        theta = OEParams.from_vector(vector, nb, nf)
        responses[i] = lfilter(theta.numerator, theta.denominator, pulse)[1:]
    return responses


def sample_asymptotic_confidence(
    fit: PemFit,
    cov: AsymptoticCovariance,
    T: int,
    N: int,
    alpha: float,
    n: int,
    rng: np.random.Generator,
) -> ConfidenceSet:
    """Confidence set from the asymptotic Gaussian truncated to stable F.

    Draws theta ~ N(theta_hat, Sigma_theta / T), rejects unstable
    denominators until N draws are accepted, and keeps the alpha-fraction
    with the highest Gaussian density.

    Raises:
        TruncationStarvation: If 1000 N attempts yield fewer than N stable draws
    """
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    nb, nf = fit.theta.nb, fit.theta.nf
    mean = fit.theta.vector
    covariance = cov.sigma_theta / T
    max_attempts = TRUNCATION_ATTEMPTS_PER_SAMPLE * N

    accepted = []
    attempts = 0
    while len(accepted) < N:
        if attempts >= max_attempts:
            rate = len(accepted) / attempts
            raise TruncationStarvation(
                f"Only {len(accepted)} of {attempts} draws were stable (rate {rate:.2e})"
            )
        batch = min(max(N - len(accepted), 64) * 2, max_attempts - attempts)
        draws = rng.multivariate_normal(mean, covariance, size=batch, method='eigh')
        attempts += batch
        for draw in draws:
            if is_stable_polynomial(np.concatenate(([1.0], draw[nb:]))):
                accepted.append(draw)
                if len(accepted) == N:
                    break

    samples = np.array(accepted)
    logger.debug(f"[PEM] Truncated sampling accepted {N} of {attempts} draws")
    density = multivariate_normal(mean=mean, cov=covariance, allow_singular=True)
    scores = np.atleast_1d(density.logpdf(samples))
    return select_highest_density(theta_impulse_responses(samples, nb, nf, n), scores, alpha)


def likelihood_log_target(data: Dataset, sigma2_hat: float, nb: int, nf: int) -> Callable[[np.ndarray], float]:
    """log p(Y | theta, sigma2_hat) restricted to stable F (else -inf)."""
    T = data.T
    constant = -0.5 * T * np.log(2.0 * np.pi * sigma2_hat)

    def log_target(vector: np.ndarray) -> float:
        theta = OEParams.from_vector(vector, nb, nf)
        if not theta.is_stable():
            return -np.inf
        return constant - T / (2.0 * sigma2_hat) * pem_cost(theta, data)

    return log_target


def run_restarting_am(
    log_target: LogTarget,
    mode: np.ndarray,
    burn_in: int,
    N: int,
    rng: np.random.Generator,
    attempts: int = LIKELIHOOD_CHAIN_ATTEMPTS,
) -> AMChain:
    """Adaptive Metropolis from the mode, restarted when the chain stalls.

    Restart k (k = 0, 1, ...) divides the initial proposal covariance and
    s_d by 4^k and runs 2^k times the burn-in, so the window rescaling has
    room to reach the target acceptance. The initial Hessian is computed once.

    Raises:
        ChainStalled: If the last attempt stalls too
    """
    if attempts < 1:
        raise ValueError(f"attempts must be >= 1, got {attempts}")
    base = am_init(mode, log_target)
    for attempt in range(attempts):
        shrink = RESTART_SHRINK ** attempt
        state = replace(base, initial_cov=base.initial_cov / shrink, s_d=base.s_d / shrink)
        try:
            return run_am(log_target, mode, burn_in=burn_in * 2 ** attempt, N=N, rng=rng, state=state)
        except ChainStalled as e:
            if attempt == attempts - 1:
                raise
            logger.warning(
                f"[PEM] Likelihood chain stalled ({e}), restarting with a {shrink * RESTART_SHRINK:g}x smaller proposal"
            )


def sample_likelihood_confidence(
    fit: PemFit,
    data: Dataset,
    sigma2_hat: float,
    N: int,
    alpha: float,
    n: int,
    rng: np.random.Generator,
    burn_in: int = 3000,
    chain_sink: Optional[Callable[[AMChain], None]] = None,
) -> ConfidenceSet:
    """Confidence set from Adaptive Metropolis samples of the likelihood.

    Args:
        fit: PEM fit used as the chain's starting mode
        data: Identification data
        sigma2_hat: Noise variance plugged into the likelihood
        N: Number of kept samples
        alpha: Level in (0, 1)
        n: Impulse-response length
        rng: Random generator
        burn_in: Burn-in steps
        chain_sink: Optional callback receiving the chain (for dumps)

    Raises:
        ChainStalled: If every restart of the chain stalls
    """
    if not sigma2_hat > 0:
        raise ValueError(f"sigma2_hat must be positive, got {sigma2_hat}")
    nb, nf = fit.theta.nb, fit.theta.nf
    log_target = likelihood_log_target(data, sigma2_hat, nb, nf)
    chain = run_restarting_am(log_target, fit.theta.vector, burn_in, N, rng)
    if chain_sink is not None:
        chain_sink(chain)
    logger.debug(f"[PEM] Likelihood chain acceptance {chain.acceptance_rate:.3f}")
    responses = theta_impulse_responses(chain.samples, nb, nf, n)
    return select_highest_density(responses, chain.log_target, alpha)


def estimate_noise_variance_ls(data: Dataset, n: int) -> float:
    """Residual variance of the least-squares FIR(n) fit, ridge-regularized if ill-conditioned."""
    if data.T <= n:
        raise ValueError(f"Need T > n, got T={data.T}, n={n}")
    phi = build_regressor(data.u, n).phi
    gram = phi.T @ phi
    rhs = phi.T @ data.y
    if np.linalg.cond(gram) > CONDITION_LIMIT:
        gram = gram + RIDGE_SCALE * np.trace(gram) / n * np.eye(n)
        coefficients = np.linalg.solve(gram, rhs)
    else:
        coefficients = _solve_least_squares(phi, data.y)
    residual = data.y - phi @ coefficients
    return float(residual @ residual / (data.T - n))
