"""Discrete-time SISO systems, benchmark data generation and regressors."""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.linalg import toeplitz
from scipy.signal import firwin, lfilter

logger = logging.getLogger(__name__)

# Impulse-response length used to normalize generated systems
NORMALIZATION_TAPS = 100
# Order of the windowed-sinc low-pass used for band-limited inputs
INPUT_FILTER_ORDER = 64
# Random systems: chance that a drawn pole is complex, and the redraw budget
COMPLEX_POLE_PROBABILITY = 0.5
MAX_SYSTEM_DRAWS = 1000


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=float)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class DiscreteSystem:
    """Rational transfer function B(q)/F(q) in powers of q^-1.

    ``num[0]`` is the coefficient of q^0; strictly proper systems have
    ``num[0] == 0``. ``den`` is monic.
    """
    num: np.ndarray
    den: np.ndarray

    def __post_init__(self):
        num = _frozen(np.atleast_1d(self.num))
        den = _frozen(np.atleast_1d(self.den))
        if den.size == 0 or den[0] != 1.0:
            raise ValueError("Denominator must be monic (den[0] == 1)")
        object.__setattr__(self, 'num', num)
        object.__setattr__(self, 'den', den)

    @property
    def poles(self) -> np.ndarray:
        return np.roots(self.den) if self.den.size > 1 else np.empty(0, dtype=complex)

    @property
    def order(self) -> int:
        return self.den.size - 1

    def is_stable(self) -> bool:
        """True if every pole lies strictly inside the unit circle."""
        return is_stable_polynomial(self.den)


@dataclass(frozen=True)
class ImpulseResponse:
    """Impulse response taps at lags 1..n."""
    taps: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'taps', _frozen(np.atleast_1d(self.taps)))

    def __len__(self) -> int:
        return self.taps.size


@dataclass(frozen=True)
class Dataset:
    """Input/output records of one identification experiment."""
    u: np.ndarray
    y: np.ndarray
    sigma2: float
    seed: Optional[int] = None

    def __post_init__(self):
        u = _frozen(np.atleast_1d(self.u))
        y = _frozen(np.atleast_1d(self.y))
        if u.shape != y.shape or u.size < 1:
            raise ValueError(f"u and y must have equal non-zero length, got {u.size} and {y.size}")
        if not self.sigma2 > 0:
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")
        object.__setattr__(self, 'u', u)
        object.__setattr__(self, 'y', y)

    @property
    def T(self) -> int:
        return self.u.size


@dataclass(frozen=True)
class RegressorMatrix:
    """T x n matrix whose row t holds u(t-1), ..., u(t-n)."""
    phi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'phi', _frozen(np.atleast_2d(self.phi)))

    @property
    def shape(self):
        return self.phi.shape


def is_stable_polynomial(den: np.ndarray) -> bool:
    """Check that all roots of a monic polynomial are inside the unit circle."""
    den = np.asarray(den, dtype=float)
    if den.size <= 1:
        return True
    if not np.all(np.isfinite(den)):
        return False
    return bool(np.all(np.abs(np.roots(den)) < 1.0))


def sample_disk_roots(count: int, radius: float, rng: np.random.Generator) -> np.ndarray:
    """Conjugate pairs plus (count mod 2) real roots, uniform on a disk of the given radius."""
    pairs = count // 2
    magnitude = radius * np.sqrt(rng.uniform(0.0, 1.0, size=pairs))
    angle = rng.uniform(0.0, np.pi, size=pairs)
    upper = magnitude * np.exp(1j * angle)
    roots = [upper, np.conj(upper)]
    if count % 2:
        real = radius * np.sqrt(rng.uniform(0.0, 1.0)) * rng.choice([-1.0, 1.0])
        roots.append(np.array([real + 0j]))
    return np.concatenate(roots)


def sample_modal_terms(order: int, radius: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Poles and residues of a random stable modal state-space model.

    Each pole is complex with probability 1/2 (complex ones are paired with
    their conjugates); complex magnitudes are uniform on [0, radius) with
    angles uniform on [0, pi], real poles are uniform on (-radius, radius).
    Residues are c_i b_i for Gaussian input and output vectors of the modal
    realization.

    Returns:
        (poles, residues), conjugate pairs first
    """
    pairs = int(np.sum(rng.uniform(size=order) < COMPLEX_POLE_PROBABILITY)) // 2
    reals = order - 2 * pairs
    upper = radius * rng.uniform(size=pairs) * np.exp(1j * np.pi * rng.uniform(size=pairs))
    real = radius * rng.uniform(-1.0, 1.0, size=reals)

    b, c = rng.standard_normal((2, 2, pairs))
    upper_residues = (c[0] + 1j * c[1]) * (b[0] - 1j * b[1]) / 2.0
    real_residues = rng.standard_normal(reals) * rng.standard_normal(reals)

    poles = np.concatenate([upper, np.conj(upper), real.astype(complex)])
    residues = np.concatenate([upper_residues, np.conj(upper_residues), real_residues.astype(complex)])
    return poles, residues


def generate_random_system(order: int, pole_radius: float, rng: np.random.Generator) -> DiscreteSystem:
    """Draw a random stable, strictly proper system of the given order.

    The system is sum_i r_i q^-1 / (1 - p_i q^-1) with poles and residues
    from ``sample_modal_terms``, so h(k) = sum_i r_i p_i^(k-1). Draws whose
    computed denominator roots reach ``pole_radius`` are repeated. The gain
    is set so that the first 100 impulse-response taps have unit Euclidean
    norm.

    Args:
        order: Number of poles (>= 1)
        pole_radius: Upper bound on pole magnitudes, in (0, 1)
        rng: Random generator

    Returns:
        DiscreteSystem with ``order`` poles and a numerator of degree below it

    Raises:
        ValueError: On invalid arguments or when no admissible draw is found
    """
    if order < 1:
        raise ValueError(f"order must be >= 1, got {order}")
    if not 0.0 < pole_radius < 1.0:
        raise ValueError(f"pole_radius must be in (0, 1), got {pole_radius}")

    for _ in range(MAX_SYSTEM_DRAWS):
        poles, residues = sample_modal_terms(order, pole_radius, rng)
        den = np.real(np.poly(poles))
        if np.max(np.abs(np.roots(den))) >= pole_radius:
            continue
        partial = sum(r * np.poly(np.delete(poles, i)) for i, r in enumerate(residues))
        num = np.concatenate(([0.0], np.real(np.atleast_1d(partial))))
        energy = np.linalg.norm(impulse_response(DiscreteSystem(num, den), NORMALIZATION_TAPS).taps)
        if energy > 0:
            return DiscreteSystem(num / energy, den)
    raise ValueError(f"No admissible order-{order} system within radius {pole_radius}")


def impulse_response(sys: DiscreteSystem, n: int) -> ImpulseResponse:
    """Response of ``sys`` to a unit pulse at lags 1..n (lag 0 is not modeled)."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    pulse = np.zeros(n + 1)
    pulse[0] = 1.0
    return ImpulseResponse(lfilter(sys.num, sys.den, pulse)[1:])


def generate_bandlimited_input(T: int, band: float, rng: np.random.Generator) -> np.ndarray:
    """Unit-variance Gaussian input low-pass filtered to the normalized band [0, band].

    Args:
        T: Number of samples
        band: Normalized cutoff in (0, 1]; 1 means white noise
        rng: Random generator

    Returns:
        Real vector of length T
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0.0 < band <= 1.0:
        raise ValueError(f"band must be in (0, 1], got {band}")

    if band >= 1.0:
        u = rng.standard_normal(T)
    else:
        taps = firwin(INPUT_FILTER_ORDER + 1, band)
        white = rng.standard_normal(T + INPUT_FILTER_ORDER)
        u = lfilter(taps, [1.0], white)[INPUT_FILTER_ORDER:]

    scale = np.std(u)
    return u / scale if scale > 0 else u


def simulate_oe(sys: DiscreteSystem, u: np.ndarray, snr: float, rng: np.random.Generator) -> Dataset:
    """Simulate y(t) = [B/F] u(t) + e(t) with white Gaussian e at the given SNR."""
    if not snr > 0:
        raise ValueError(f"snr must be positive, got {snr}")
    if not sys.is_stable():
        raise ValueError("simulate_oe requires a stable system")

    u = np.asarray(u, dtype=float)
    noiseless = lfilter(sys.num, sys.den, u)
    signal_var = float(np.var(noiseless))
    if signal_var > 0:
        sigma2 = signal_var / snr
    else:
        logger.warning("[Data] Noiseless output has zero variance, using sigma2 = 1/snr")
        sigma2 = 1.0 / snr
    noise = rng.normal(0.0, np.sqrt(sigma2), size=u.size)
    return Dataset(u=u, y=noiseless + noise, sigma2=sigma2)


def build_regressor(u: np.ndarray, n: int) -> RegressorMatrix:
    """Toeplitz regressor with zero pre-experiment inputs."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    u = np.asarray(u, dtype=float)
    column = np.concatenate(([0.0], u[:-1]))
    return RegressorMatrix(toeplitz(column, np.zeros(n)))


def generate_benchmark_data(
    order: int,
    pole_radius: float,
    T: int,
    band: float,
    snr: float,
    rng: np.random.Generator,
    seed: Optional[int] = None,
) -> tuple[DiscreteSystem, Dataset]:
    """One benchmark experiment: random system, band-limited input, noisy output."""
    system = generate_random_system(order, pole_radius, rng)
    u = generate_bandlimited_input(T, band, rng)
    data = simulate_oe(system, u, snr, rng)
    return system, Dataset(u=data.u, y=data.y, sigma2=data.sigma2, seed=seed)
