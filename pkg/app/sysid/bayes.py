"""Kernel-based Bayesian impulse-response estimation with the DC kernel.

The prior is h ~ N(0, K_eta) with K_eta(k, j) = c rho^|k-j| lambda^((k+j)/2).
Every evaluation works on n x n matrices through the factor K = L L^T,
where L = sqrt(c) diag(lambda^(k/2)) L_rho and L_rho is the closed-form
Cholesky factor of the Toeplitz matrix rho^|k-j|. With M = s2 I + L^T Phi^T Phi L:

    ln det Sigma_y = (T - n) ln s2 + ln det M
    Y^T Sigma_y^-1 Y = (Y^T Y - z^T M^-1 z) / s2,     z = L^T Phi^T Y
    mu = L M^-1 z,    Sigma = s2 L M^-1 L^T

These hold for singular K (rho = +-1, lambda = 0, c = 0).
"""

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, cholesky, solve_triangular
from scipy.optimize import brentq, minimize
from scipy.special import expit, gammainc, logit

from .confidence import ConfidenceSet
from .core import Dataset, ImpulseResponse, RegressorMatrix, build_regressor
from .errors import NonPositiveDefinite

logger = logging.getLogger(__name__)

# Upper end of the scale range (the flat hyperprior support is bounded here)
C_MAX = 1e4
JITTER_SCALE = 1e-10
# Transformed coordinates are kept inside these limits during the search
LOG_C_MIN = -40.0
ATANH_LIMIT = 20.0
LOGIT_LIMIT = 40.0
_INTERIOR = 1.0 - 1e-9
# Relative eigenvalue floor defining the numerical support of a posterior
EIGEN_CUTOFF = 1e-10
# Coarse grid searched for an extra marginal-likelihood start
GRID_SCALES = (1e-3, 1e-2, 1e-1, 1.0, 10.0)
GRID_CORRELATIONS = (-0.5, 0.0, 0.5, 0.9)
GRID_DECAYS = (0.5, 0.7, 0.8, 0.9, 0.95, 0.98)


@dataclass(frozen=True)
class Hyperparams:
    """DC-kernel hyperparameters eta = {c, rho, lambda}."""
    c: float
    rho: float
    lam: float

    def __post_init__(self):
        if not self.in_box(self.as_array()):
            raise ValueError(f"Hyperparameters outside the box: c={self.c}, rho={self.rho}, lambda={self.lam}")

    def as_array(self) -> np.ndarray:
        return np.array([self.c, self.rho, self.lam], dtype=float)

    @classmethod
    def from_array(cls, values: np.ndarray) -> 'Hyperparams':
        c, rho, lam = (float(v) for v in values)
        return cls(c=c, rho=rho, lam=lam)

    @staticmethod
    def in_box(values: np.ndarray, c_max: float = np.inf) -> bool:
        """Check c in [0, c_max], |rho| <= 1, lambda in [0, 1]."""
        c, rho, lam = values
        return bool(0.0 <= c <= c_max and abs(rho) <= 1.0 and 0.0 <= lam <= 1.0)

    def to_unconstrained(self) -> np.ndarray:
        """(ln c, atanh rho, logit lambda), boundary values pulled slightly inside."""
        c = max(self.c, np.exp(LOG_C_MIN))
        rho = np.clip(self.rho, -_INTERIOR, _INTERIOR)
        lam = np.clip(self.lam, 1.0 - _INTERIOR, _INTERIOR)
        return np.array([np.log(c), np.arctanh(rho), logit(lam)])

    @classmethod
    def from_unconstrained(cls, x: np.ndarray, c_max: float = C_MAX) -> 'Hyperparams':
        log_c = np.clip(x[0], LOG_C_MIN, np.log(c_max))
        rho = np.tanh(np.clip(x[1], -ATANH_LIMIT, ATANH_LIMIT))
        lam = expit(np.clip(x[2], -LOGIT_LIMIT, LOGIT_LIMIT))
        return cls(c=float(np.exp(log_c)), rho=float(rho), lam=float(lam))


@dataclass(frozen=True)
class KernelMatrix:
    """Prior covariance matrix K_eta of the impulse response."""
    k: np.ndarray


def dc_kernel(eta: Hyperparams, n: int) -> KernelMatrix:
    """K(k, j) = c rho^|k-j| lambda^((k+j)/2), 1-indexed."""
    index = np.arange(1, n + 1)
    lag = np.abs(index[:, None] - index[None, :])
    total = index[:, None] + index[None, :]
    return KernelMatrix(eta.c * np.power(eta.rho, lag) * np.power(eta.lam, total / 2.0))


def dc_factor(eta: Hyperparams, n: int) -> np.ndarray:
    """Lower-triangular L with L L^T = K_eta, valid on the whole box."""
    index = np.arange(n)
    lag = index[:, None] - index[None, :]
    lower = np.tril(np.power(eta.rho, np.maximum(lag, 0)))
    lower[:, 1:] *= np.sqrt(max(0.0, 1.0 - eta.rho ** 2))
    decay = np.power(eta.lam, (index + 1) / 2.0)
    return np.sqrt(eta.c) * decay[:, None] * lower


def sample_dc_prior(eta: Hyperparams, n: int, rng: np.random.Generator) -> ImpulseResponse:
    """Draw one impulse response from the DC prior."""
    return ImpulseResponse(dc_factor(eta, n) @ rng.standard_normal(n))


def _cholesky_with_jitter(matrix: np.ndarray) -> Tuple[np.ndarray, bool]:
    """Lower Cholesky factor, retrying once with 1e-10 trace/n jitter."""
    if not np.all(np.isfinite(matrix)):
        raise NonPositiveDefinite("Matrix has non-finite entries")
    try:
        return cho_factor(matrix, lower=True)
    except LinAlgError:
        size = matrix.shape[0]
        jitter = JITTER_SCALE * np.trace(matrix) / size
        try:
            return cho_factor(matrix + jitter * np.eye(size), lower=True)
        except LinAlgError as e:
            raise NonPositiveDefinite(f"Cholesky failed after jitter: {e}")


class MarginalLikelihood:
    """Marginal likelihood and posterior for fixed data, evaluated for many eta.

    Phi^T Phi, Phi^T Y and Y^T Y are computed once.
    """

    def __init__(self, Y: np.ndarray, phi: RegressorMatrix, sigma2: float):
        if not sigma2 > 0:
            raise ValueError(f"sigma2 must be positive, got {sigma2}")
        self.phi = phi.phi if isinstance(phi, RegressorMatrix) else np.atleast_2d(phi)
        self.Y = np.asarray(Y, dtype=float)
        self.sigma2 = float(sigma2)
        self.T, self.n = self.phi.shape
        self.gram = self.phi.T @ self.phi
        self.cross = self.phi.T @ self.Y
        self.energy = float(self.Y @ self.Y)

    def _reduced(self, eta: Hyperparams):
        lower = dc_factor(eta, self.n)
        reduced = self.sigma2 * np.eye(self.n) + lower.T @ self.gram @ lower
        factor = _cholesky_with_jitter(reduced)
        z = lower.T @ self.cross
        return lower, factor, z

    def log_likelihood(self, eta: Hyperparams) -> float:
        """ln p(Y | eta).

        Raises:
            NonPositiveDefinite: If the reduced system cannot be factorized
        """
        _, factor, z = self._reduced(eta)
        chol = factor[0]
        log_det = (self.T - self.n) * np.log(self.sigma2) + 2.0 * np.sum(np.log(np.diag(chol)))
        quadratic = (self.energy - z @ cho_solve(factor, z)) / self.sigma2
        return float(-0.5 * (self.T * np.log(2.0 * np.pi) + log_det + quadratic))

    def posterior(self, eta: Hyperparams) -> 'GaussianPosterior':
        """Posterior of h given Y for fixed eta; falls back to the T x T form."""
        try:
            lower, factor, z = self._reduced(eta)
        except NonPositiveDefinite as e:
            logger.warning(f"[EB] Reduced posterior failed ({e}), using the T x T form")
            return posterior_dense(eta, self.Y, self.phi, self.sigma2)

        chol = np.tril(factor[0])
        mean = lower @ cho_solve(factor, z)
        whitened = solve_triangular(chol, lower.T, lower=True)
        cov = self.sigma2 * whitened.T @ whitened
        return GaussianPosterior(
            mean=mean,
            cov=(cov + cov.T) / 2.0,
            eta=eta,
            factor=np.sqrt(self.sigma2) * whitened.T,
        )


@dataclass(frozen=True)
class GaussianPosterior:
    """Posterior N(mean, cov) of the impulse response for fixed eta.

    ``factor`` (optional) satisfies factor @ factor.T == cov. ``logpdf`` and
    ``mahalanobis`` work on the numerical support of ``cov`` (eigen-directions
    below 1e-10 of the largest eigenvalue are dropped); ``full_logpdf``
    keeps every direction.
    """
    mean: np.ndarray
    cov: np.ndarray
    eta: Hyperparams
    factor: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return self.mean.size

    @cached_property
    def _eigh(self) -> Tuple[np.ndarray, np.ndarray]:
        return np.linalg.eigh(self.cov)

    @cached_property
    def _spectrum(self) -> Tuple[np.ndarray, np.ndarray]:
        values, vectors = self._eigh
        largest = values.max() if values.size else 0.0
        keep = values > EIGEN_CUTOFF * largest if largest > 0 else np.zeros(values.size, dtype=bool)
        return values[keep], vectors[:, keep]

    @property
    def rank(self) -> int:
        return self._spectrum[0].size

    def draw(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Draw ``size`` impulse responses, one per row."""
        if self.factor is not None:
            return self.mean + rng.standard_normal((size, self.n)) @ self.factor.T
        values, vectors = self._spectrum
        return self.mean + (rng.standard_normal((size, values.size)) * np.sqrt(values)) @ vectors.T

    def mahalanobis(self, x: np.ndarray) -> np.ndarray:
        """Squared Mahalanobis distance (x - mean)^T cov^+ (x - mean), one value per row."""
        values, vectors = self._spectrum
        white = (np.atleast_2d(x) - self.mean) @ vectors / np.sqrt(values)
        return np.sum(white ** 2, axis=1)

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        values, _ = self._spectrum
        normalizer = values.size * np.log(2.0 * np.pi) + np.sum(np.log(values))
        return -0.5 * (normalizer + self.mahalanobis(x))

    def full_logpdf(self, x: np.ndarray, delta: float = 0.0) -> np.ndarray:
        """Log-density of N(mean, cov + delta I) on all of R^n.

        Every direction counts here, so posteriors with different numerical
        support can be compared when they share the same ``delta``.

        Raises:
            NonPositiveDefinite: If cov + delta I is singular
        """
        deviation = np.atleast_2d(x) - self.mean
        try:
            chol = cholesky(self.cov + delta * np.eye(self.n), lower=True)
        except LinAlgError:
            values, vectors = self._eigh
            values = np.maximum(values, 0.0) + delta
            if not values.min() > 0:
                raise NonPositiveDefinite("Posterior covariance is singular and no floor was given")
            white = deviation @ vectors / np.sqrt(values)
            log_det = np.sum(np.log(values))
            distance = np.sum(white ** 2, axis=1)
        else:
            white = solve_triangular(chol, deviation.T, lower=True)
            log_det = 2.0 * np.sum(np.log(np.diag(chol)))
            distance = np.sum(white ** 2, axis=0)
        return -0.5 * (self.n * np.log(2.0 * np.pi) + log_det + distance)

    def ellipsoid_bound(self, alpha: float) -> float:
        """chi2 quantile at level alpha with rank(cov) degrees of freedom."""
        return chi2_quantile(alpha, self.rank) if self.rank else 0.0

    def contains(self, x: np.ndarray, alpha: float) -> np.ndarray:
        """Membership in the level-alpha ellipsoid."""
        return self.mahalanobis(x) <= self.ellipsoid_bound(alpha)


def log_marginal_likelihood(eta: Hyperparams, Y: np.ndarray, phi: RegressorMatrix, sigma2: float) -> float:
    """ln p(Y | eta) with Sigma_y = Phi K Phi^T + sigma2 I, via the n x n reduction."""
    return MarginalLikelihood(Y, phi, sigma2).log_likelihood(eta)


def log_marginal_likelihood_dense(eta: Hyperparams, Y: np.ndarray, phi: RegressorMatrix, sigma2: float) -> float:
    """Direct T x T evaluation of ln p(Y | eta)."""
    phi = phi.phi if isinstance(phi, RegressorMatrix) else np.atleast_2d(phi)
    Y = np.asarray(Y, dtype=float)
    sigma_y = phi @ dc_kernel(eta, phi.shape[1]).k @ phi.T + sigma2 * np.eye(Y.size)
    try:
        chol = cholesky(sigma_y, lower=True)
    except LinAlgError as e:
        raise NonPositiveDefinite(f"Sigma_y is not positive definite: {e}")
    white = solve_triangular(chol, Y, lower=True)
    log_det = 2.0 * np.sum(np.log(np.diag(chol)))
    return float(-0.5 * (Y.size * np.log(2.0 * np.pi) + log_det + white @ white))


def _best_grid_point(likelihood: MarginalLikelihood, c_max: float) -> Optional[Hyperparams]:
    """Coarse-grid maximizer of ln p(Y | eta), used as an extra optimizer start."""
    best, best_value = None, -np.inf
    for c in GRID_SCALES:
        for rho in GRID_CORRELATIONS:
            for lam in GRID_DECAYS:
                eta = Hyperparams(min(c, c_max), rho, lam)
                try:
                    value = likelihood.log_likelihood(eta)
                except NonPositiveDefinite:
                    continue
                if value > best_value:
                    best, best_value = eta, value
    return best


def maximize_marginal_likelihood(
    Y: np.ndarray,
    phi: RegressorMatrix,
    sigma2: float,
    init: Optional[Hyperparams] = None,
    c_max: float = C_MAX,
) -> Hyperparams:
    """Empirical Bayes hyperparameters: arg max ln p(Y | eta) over the box.

    Nelder-Mead in (ln c, atanh rho, logit lambda) from four fixed starts
    {c=1} x {rho=+-0.5} x {lambda in 0.8, 0.95}, the best point of a coarse
    grid over the box, and ``init``.

    Args:
        Y: Output vector
        phi: Regressor matrix
        sigma2: Noise variance
        init: Optional extra starting point
        c_max: Upper bound on c

    Returns:
        Best hyperparameters found
    """
    likelihood = MarginalLikelihood(Y, phi, sigma2)

    def objective(x: np.ndarray) -> float:
        try:
            value = likelihood.log_likelihood(Hyperparams.from_unconstrained(x, c_max))
        except NonPositiveDefinite:
            return np.inf
        return -value if np.isfinite(value) else np.inf

    starts = [Hyperparams(1.0, rho, lam) for rho in (0.5, -0.5) for lam in (0.8, 0.95)]
    grid_start = _best_grid_point(likelihood, c_max)
    if grid_start is not None:
        starts.append(grid_start)
    if init is not None:
        starts.append(init)

    best_x, best_value = None, np.inf
    for start in starts:
        x0 = start.to_unconstrained()
        start_value = objective(x0)
        if start_value < best_value:
            best_x, best_value = x0, start_value
        result = minimize(
            objective,
            x0,
            method='Nelder-Mead',
            options={'xatol': 1e-8, 'fatol': 1e-8, 'maxiter': 2000, 'maxfev': 4000},
        )
        if result.fun < best_value:
            best_x, best_value = result.x, float(result.fun)

    if best_x is None:
        raise NonPositiveDefinite("Marginal likelihood is undefined at every start")
    eta = Hyperparams.from_unconstrained(best_x, c_max)
    logger.info(f"[EB] eta = (c={eta.c:.4g}, rho={eta.rho:.4f}, lambda={eta.lam:.4f}), ln p = {-best_value:.4f}")
    return eta


def posterior(eta: Hyperparams, Y: np.ndarray, phi: RegressorMatrix, sigma2: float) -> GaussianPosterior:
    """Posterior mean and covariance of h for fixed eta."""
    return MarginalLikelihood(Y, phi, sigma2).posterior(eta)


def posterior_dense(eta: Hyperparams, Y: np.ndarray, phi: RegressorMatrix, sigma2: float) -> GaussianPosterior:
    """T x T form: mu = K Phi^T Sigma_y^-1 Y, Sigma = K - K Phi^T Sigma_y^-1 Phi K."""
    phi = phi.phi if isinstance(phi, RegressorMatrix) else np.atleast_2d(phi)
    Y = np.asarray(Y, dtype=float)
    kernel = dc_kernel(eta, phi.shape[1]).k
    cross = phi @ kernel
    sigma_y = cross @ phi.T + sigma2 * np.eye(Y.size)
    try:
        factor = cho_factor(sigma_y, lower=True)
    except LinAlgError as e:
        raise NonPositiveDefinite(f"Sigma_y is not positive definite: {e}")
    mean = cross.T @ cho_solve(factor, Y)
    cov = kernel - cross.T @ cho_solve(factor, cross)
    return GaussianPosterior(mean=mean, cov=(cov + cov.T) / 2.0, eta=eta)


def eb_estimate(
    data: Dataset,
    n: int,
    sigma2: float,
    init: Optional[Hyperparams] = None,
) -> Tuple[ImpulseResponse, GaussianPosterior, Hyperparams]:
    """Empirical Bayes impulse response: posterior mean at the marginal-likelihood maximizer."""
    phi = build_regressor(data.u, n)
    eta = maximize_marginal_likelihood(data.y, phi, sigma2, init=init)
    post = posterior(eta, data.y, phi, sigma2)
    return ImpulseResponse(post.mean), post, eta


def eb_confidence_set(post: GaussianPosterior, N: int, alpha: float, rng: np.random.Generator) -> ConfidenceSet:
    """Posterior samples falling inside the level-alpha ellipsoid.

    The ellipsoid bound is the chi2 quantile with rank(cov) degrees of
    freedom (n for a non-degenerate posterior). It is a superlevel set of the
    Gaussian density, so retained samples score higher than rejected ones.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    samples = post.draw(rng, N)
    scores = post.logpdf(samples)
    bound = post.ellipsoid_bound(alpha)
    peak = float(post.logpdf(post.mean)[0])
    kept = np.flatnonzero(post.mahalanobis(samples) <= bound)
    logger.debug(f"[EB] Ellipsoid kept {kept.size} of {N} samples")
    return ConfidenceSet(
        members=samples[kept].reshape(-1, post.n),
        scores=scores[kept],
        alpha=alpha,
        threshold=peak - bound / 2.0,
        raw_count=N,
        kept_indices=kept,
    )


def chi2_cdf(x: float, n: int) -> float:
    """Chi-square CDF through the regularized lower incomplete gamma function."""
    return float(gammainc(n / 2.0, max(x, 0.0) / 2.0))


def chi2_quantile(alpha: float, n: int) -> float:
    """Inverse chi-square CDF with n degrees of freedom."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    upper = max(1.0, float(n))
    while chi2_cdf(upper, n) < alpha:
        upper *= 2.0
    return float(brentq(lambda x: chi2_cdf(x, n) - alpha, 0.0, upper, xtol=1e-12, rtol=1e-14, maxiter=500))
