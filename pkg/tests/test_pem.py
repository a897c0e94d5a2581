"""Tests for prediction-error identification and the parametric confidence sets."""

import logging

import numpy as np
import pytest
from scipy.signal import lfilter

# Add app directory to path
import sys
from pathlib import Path
sys.path.insert(0, str(Path(__file__).parent.parent / 'app'))

from sysid.core import (
    Dataset,
    build_regressor,
    generate_random_system,
    impulse_response,
    sample_disk_roots,
    simulate_oe,
)
from sysid.errors import AllFitsFailed, ChainStalled, TruncationStarvation
from sysid.metrics import impulse_fit, set_size_index
import sysid.pem as pem_module
from sysid.pem import (
    LIKELIHOOD_CHAIN_ATTEMPTS,
    MAX_ITERATIONS,
    AsymptoticCovariance,
    OEParams,
    PemFit,
    arx_initialization,
    asymptotic_covariance,
    bic,
    estimate_noise_variance_ls,
    fit_oe,
    fit_order_range,
    gradient_psi,
    pem_cost,
    predict_oe,
    run_restarting_am,
    sample_asymptotic_confidence,
    sample_likelihood_confidence,
    select_order_bic,
    select_order_oracle,
)


def random_stable_params(rng, nb, nf, radius=0.8):
    f = np.real(np.poly(sample_disk_roots(nf, radius, rng)))[1:] if nf else np.empty(0)
    return OEParams(b=rng.standard_normal(nb), f=f)


@pytest.fixture
def noiseless_dataset(second_order_system):
    """Noiseless data from the second-order system."""
    u = np.random.default_rng(3).standard_normal(300)
    return Dataset(u=u, y=lfilter(second_order_system.num, second_order_system.den, u), sigma2=1.0)


@pytest.fixture
def second_order_fit(noisy_dataset):
    """PEM fit of the noisy second-order data at the true orders."""
    return fit_oe(noisy_dataset, 2, 2, rng=np.random.default_rng(0))


class TestPredictor:
    """Tests for predict_oe and pem_cost."""

    def test_fir_predictor_is_delayed_input(self, rng):
        """Test b=[1], f=[] gives yhat(t) = u(t-1)."""
        u = rng.standard_normal(10)

        np.testing.assert_allclose(predict_oe(OEParams(b=[1.0], f=[]), u), np.concatenate(([0.0], u[:-1])))

    def test_first_order_recursion(self, rng):
        """Test yhat(t) = 0.5 yhat(t-1) + u(t-1)."""
        u = rng.standard_normal(12)
        expected = np.zeros(12)
        for t in range(1, 12):
            expected[t] = 0.5 * expected[t - 1] + u[t - 1]

        np.testing.assert_allclose(predict_oe(OEParams(b=[1.0], f=[-0.5]), u), expected, atol=1e-12)

    def test_true_parameters_reproduce_noiseless_output(self, noiseless_dataset):
        """Test yhat = y at the true parameters."""
        theta = OEParams(b=[1.0, 0.5], f=[-1.2, 0.5])

        np.testing.assert_allclose(predict_oe(theta, noiseless_dataset.u), noiseless_dataset.y, atol=1e-12)
        assert pem_cost(theta, noiseless_dataset) < 1e-24

    def test_cost_direct_arithmetic(self):
        """Test y=[1,1], yhat=[0,0] gives 1."""
        data = Dataset(u=np.zeros(2), y=np.ones(2), sigma2=1.0)

        assert pem_cost(OEParams(b=[0.0], f=[]), data) == 1.0

    def test_cost_matches_loop(self, rng):
        """Test pem_cost against a naive loop."""
        theta = random_stable_params(rng, 2, 2)
        u, y = rng.standard_normal(40), rng.standard_normal(40)
        y_hat = np.zeros(40)
        for t in range(40):
            y_hat[t] = sum(theta.b[k - 1] * u[t - k] for k in range(1, 3) if t - k >= 0)
            y_hat[t] -= sum(theta.f[k - 1] * y_hat[t - k] for k in range(1, 3) if t - k >= 0)

        expected = np.mean((y - y_hat) ** 2)
        assert pem_cost(theta, Dataset(u=u, y=y, sigma2=1.0)) == pytest.approx(expected, rel=1e-12)


class TestGradientPsi:
    """Tests for the predictor gradient."""

    def test_matches_central_differences(self, rng):
        """Test the analytic gradient against central differences on 50 random instances."""
        step = 1e-6
        for _ in range(50):
            nb, nf = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            theta = random_stable_params(rng, nb, nf)
            u = rng.standard_normal(60)
            numeric = np.empty((60, nb + nf))
            for j in range(nb + nf):
                shift = np.zeros(nb + nf)
                shift[j] = step
                plus = predict_oe(OEParams.from_vector(theta.vector + shift, nb, nf), u)
                minus = predict_oe(OEParams.from_vector(theta.vector - shift, nb, nf), u)
                numeric[:, j] = (plus - minus) / (2.0 * step)

            analytic = gradient_psi(theta, u)
            assert np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric) < 1e-4

    def test_fir_columns_are_shifted_input(self, rng):
        """Test that an FIR model has the regressor matrix as gradient."""
        u = rng.standard_normal(20)

        np.testing.assert_allclose(gradient_psi(OEParams(b=[1.0, 2.0], f=[]), u), build_regressor(u, 2).phi)

    def test_empty_input(self):
        """Test T = 0."""
        assert gradient_psi(OEParams(b=[1.0], f=[0.2]), np.array([])).shape == (0, 2)


class TestFitOE:
    """Tests for fit_oe."""

    def test_noiseless_in_class_recovery(self, noiseless_dataset, second_order_system):
        """Test exact recovery of an in-class model from noiseless data."""
        fit = fit_oe(noiseless_dataset, 2, 2, rng=np.random.default_rng(0))

        assert fit.cost < 1e-10
        np.testing.assert_allclose(
            fit.impulse(50).taps, impulse_response(second_order_system, 50).taps, atol=1e-5
        )
        assert fit.theta.is_stable()

    def test_cost_not_above_initialization(self, noisy_dataset):
        """Test descent from the ARX start."""
        start = arx_initialization(noisy_dataset, 2, 2)
        fit = fit_oe(noisy_dataset, 2, 2, rng=np.random.default_rng(1))

        assert fit.cost <= pem_cost(start, noisy_dataset)
        assert fit.sigma2_hat == fit.cost
        assert fit.cost >= 0.0

    def test_no_signal_gives_small_gain(self):
        """Test that output independent of the input yields b close to zero."""
        generator = np.random.default_rng(5)
        data = Dataset(u=generator.standard_normal(500), y=generator.standard_normal(500), sigma2=1.0)

        fit = fit_oe(data, 1, 1, rng=generator)

        assert abs(fit.theta.b[0]) < 0.25

    def test_invalid_orders(self, noisy_dataset):
        """Test contract violations."""
        with pytest.raises(ValueError):
            fit_oe(noisy_dataset, 0, 1)
        with pytest.raises(ValueError):
            fit_oe(Dataset(u=np.ones(4), y=np.ones(4), sigma2=1.0), 2, 2)

    def test_saturated_damping_is_not_converged(self, noisy_dataset, mocker):
        """Test that a start from which no damped step is accepted is reported as stalled."""
        mocker.patch.object(OEParams, 'is_stable', return_value=False)
        start = OEParams(b=[0.1, 0.0], f=[0.0, 0.0])

        fit = pem_module._levenberg_marquardt(start, noisy_dataset, MAX_ITERATIONS)

        assert fit.stalled
        assert not fit.converged
        assert fit.iterations < MAX_ITERATIONS
        np.testing.assert_array_equal(fit.theta.vector, start.vector)

    def test_stall_is_logged(self, noisy_dataset, mocker, caplog):
        """Test that fit_oe warns when its best start stalled."""
        stalled = PemFit(
            theta=OEParams(b=[0.1, 0.0], f=[0.0, 0.0]), cost=1.0, sigma2_hat=1.0,
            converged=False, iterations=20, stalled=True,
        )
        mocker.patch('sysid.pem._levenberg_marquardt', return_value=stalled)

        with caplog.at_level(logging.WARNING, logger='sysid.pem'):
            fit = fit_oe(noisy_dataset, 2, 2, random_starts=0)

        assert fit is stalled
        assert 'stalled' in caplog.text

    def test_converged_fit_is_not_stalled(self, noiseless_dataset):
        """Test the flags of a fit that passes the gradient test."""
        fit = fit_oe(noiseless_dataset, 2, 2, rng=np.random.default_rng(0))

        assert fit.converged
        assert not fit.stalled

    @pytest.mark.slow
    def test_noiseless_random_systems(self):
        """Test fit > 99 on noiseless in-class data for at least 18 of 20 random systems."""
        generator = np.random.default_rng(77)
        hits = 0
        for _ in range(20):
            order = int(generator.integers(2, 6))
            system = generate_random_system(order, 0.95, generator)
            u = generator.standard_normal(400)
            data = Dataset(u=u, y=lfilter(system.num, system.den, u), sigma2=1.0)

            fit = fit_oe(data, order, order, rng=generator)

            hits += impulse_fit(impulse_response(system, 100), fit.impulse(100)) > 99.0

        assert hits >= 18


class TestAsymptoticCovariance:
    """Tests for asymptotic_covariance."""

    def test_fir_white_input_is_scaled_identity(self):
        """Test Sigma_theta close to sigma2 I for an FIR model with white input."""
        generator = np.random.default_rng(8)
        u = generator.standard_normal(5000)
        h = np.array([0.5, -0.3, 0.2])
        y = build_regressor(u, 3).phi @ h + np.sqrt(0.5) * generator.standard_normal(5000)
        data = Dataset(u=u, y=y, sigma2=0.5)
        theta = OEParams(b=h, f=[])
        fit = PemFit(theta=theta, cost=pem_cost(theta, data), sigma2_hat=0.5, converged=True, iterations=0)

        sigma = asymptotic_covariance(fit, data).sigma_theta

        np.testing.assert_allclose(np.diag(sigma), 0.5, rtol=0.1)
        assert np.max(np.abs(sigma - np.diag(np.diag(sigma)))) < 0.05

    def test_symmetric_positive_semidefinite(self, second_order_fit, noisy_dataset):
        """Test symmetry and PSD."""
        sigma = asymptotic_covariance(second_order_fit, noisy_dataset).sigma_theta

        np.testing.assert_allclose(sigma, sigma.T)
        assert np.min(np.linalg.eigvalsh(sigma)) >= -1e-8 * np.max(np.abs(sigma))

    @pytest.mark.slow
    def test_doubles_with_noise_variance(self, second_order_system):
        """Test that doubling sigma2 doubles Sigma_theta on average over replications."""
        ratios = []
        for seed in range(5):
            generator = np.random.default_rng(200 + seed)
            u = generator.standard_normal(1000)
            noiseless = lfilter(second_order_system.num, second_order_system.den, u)
            noise = generator.standard_normal(1000)
            traces = []
            for sigma2 in (0.1, 0.2):
                data = Dataset(u=u, y=noiseless + np.sqrt(sigma2) * noise, sigma2=sigma2)
                fit = fit_oe(data, 2, 2, rng=np.random.default_rng(seed))
                traces.append(np.trace(asymptotic_covariance(fit, data).sigma_theta))
            ratios.append(traces[1] / traces[0])

        assert 1.8 < np.mean(ratios) < 2.2


class TestOrderSelection:
    """Tests for BIC and oracle order selection."""

    def test_bic_formula(self, second_order_fit):
        """Test T ln J + d ln T."""
        expected = 300 * np.log(second_order_fit.cost) + 4 * np.log(300)

        assert bic(second_order_fit, 300) == pytest.approx(expected)

    def test_bic_returns_minimum(self, noisy_dataset):
        """Test that the selected order has the minimum BIC."""
        fits = fit_order_range(noisy_dataset, [1, 2, 3], np.random.default_rng(2))

        chosen = select_order_bic(noisy_dataset, [1, 2, 3], fits=fits)

        assert bic(chosen, 300) == min(bic(fit, 300) for fit in fits.values())

    def test_single_order(self, noisy_dataset, second_order_system):
        """Test single-element ranges."""
        true_h = impulse_response(second_order_system, 50)

        assert select_order_bic(noisy_dataset, [2], rng=np.random.default_rng(0)).order == 2
        assert select_order_oracle(noisy_dataset, [2], true_h, rng=np.random.default_rng(0)).order == 2

    def test_oracle_dominates_bic(self, noisy_dataset, second_order_system):
        """Test that the oracle's fit is the best over the range."""
        true_h = impulse_response(second_order_system, 50)
        fits = fit_order_range(noisy_dataset, [1, 2, 3, 4], np.random.default_rng(4))

        oracle = select_order_oracle(noisy_dataset, [1, 2, 3, 4], true_h, fits=fits)
        chosen = select_order_bic(noisy_dataset, [1, 2, 3, 4], fits=fits)

        assert impulse_fit(true_h, oracle.impulse(50)) >= impulse_fit(true_h, chosen.impulse(50))
        assert impulse_fit(true_h, oracle.impulse(50)) == max(impulse_fit(true_h, f.impulse(50)) for f in fits.values())

    def test_oracle_noiseless_fit(self, noiseless_dataset, second_order_system):
        """Test that the oracle fits an in-class noiseless system almost perfectly."""
        true_h = impulse_response(second_order_system, 50)

        oracle = select_order_oracle(noiseless_dataset, [1, 2, 3], true_h, rng=np.random.default_rng(0))

        assert impulse_fit(true_h, oracle.impulse(50)) > 99.0

    def test_failed_orders_are_skipped(self, noisy_dataset):
        """Test that orders that cannot be fitted are skipped."""
        fits = fit_order_range(noisy_dataset, [2, 200], np.random.default_rng(0))

        assert list(fits) == [2]

    def test_all_failed(self, noisy_dataset):
        """Test AllFitsFailed."""
        with pytest.raises(AllFitsFailed):
            select_order_bic(noisy_dataset, [2, 3], fits={})

    @pytest.mark.slow
    def test_bic_recovers_true_order(self, second_order_system):
        """Test that BIC picks order 2 in most replications at high SNR."""
        hits = 0
        for seed in range(20):
            generator = np.random.default_rng(100 + seed)
            data = simulate_oe(second_order_system, generator.standard_normal(500), 100.0, generator)
            hits += select_order_bic(data, range(1, 7), rng=generator).order == 2

        assert hits > 10


class TestAsymptoticConfidence:
    """Tests for the truncated asymptotic Gaussian set."""

    def test_cardinality_and_threshold(self, second_order_fit, noisy_dataset):
        """Test 6840 members for N = 7200 and alpha = 0.95."""
        cov = asymptotic_covariance(second_order_fit, noisy_dataset)

        confidence_set = sample_asymptotic_confidence(
            second_order_fit, cov, noisy_dataset.T, 7200, 0.95, 50, np.random.default_rng(0)
        )

        assert len(confidence_set) == 6840
        assert confidence_set.members.shape == (6840, 50)
        assert np.all(confidence_set.scores >= confidence_set.threshold)

    def test_degenerate_covariance(self, second_order_fit, noisy_dataset):
        """Test that a vanishing covariance collapses the set onto the estimate."""
        cov = asymptotic_covariance(second_order_fit, noisy_dataset)
        tiny = AsymptoticCovariance(sigma_theta=cov.sigma_theta * 1e-12)

        confidence_set = sample_asymptotic_confidence(
            second_order_fit, tiny, noisy_dataset.T, 100, 0.9, 30, np.random.default_rng(1)
        )

        np.testing.assert_allclose(confidence_set.members, np.tile(second_order_fit.impulse(30).taps, (90, 1)), atol=1e-5)

    def test_truncation_starvation(self, noisy_dataset):
        """Test that an almost surely unstable sampling distribution raises."""
        theta = OEParams(b=[1.0], f=[-0.999])
        fit = PemFit(theta=theta, cost=1.0, sigma2_hat=1.0, converged=True, iterations=1)
        cov = AsymptoticCovariance(sigma_theta=1e8 * np.eye(2))

        with pytest.raises(TruncationStarvation):
            sample_asymptotic_confidence(fit, cov, 1, 5, 0.9, 10, np.random.default_rng(2))


class TestLikelihoodConfidence:
    """Tests for the likelihood-sampling set."""

    def test_cardinality_and_chain_sink(self, second_order_fit, noisy_dataset):
        """Test member count and that the chain is handed to the sink."""
        chains = []

        confidence_set = sample_likelihood_confidence(
            second_order_fit, noisy_dataset, second_order_fit.sigma2_hat, 200, 0.95, 40,
            np.random.default_rng(3), burn_in=500, chain_sink=chains.append,
        )

        assert len(confidence_set) == 190
        assert len(chains) == 1
        assert chains[0].samples.shape == (200, 4)
        assert np.all(confidence_set.scores >= confidence_set.threshold)

    def test_small_noise_concentrates(self, noiseless_dataset):
        """Test that a tiny sigma2 keeps the chain close to the exact fit."""
        fit = fit_oe(noiseless_dataset, 2, 2, rng=np.random.default_rng(0))

        confidence_set = sample_likelihood_confidence(
            fit, noiseless_dataset, 1e-6, 200, 0.9, 30, np.random.default_rng(4), burn_in=500
        )

        assert set_size_index(confidence_set) < 1e-2

    def test_rejects_non_positive_variance(self, second_order_fit, noisy_dataset):
        """Test sigma2_hat <= 0."""
        with pytest.raises(ValueError):
            sample_likelihood_confidence(
                second_order_fit, noisy_dataset, 0.0, 10, 0.9, 10, np.random.default_rng(0), burn_in=10
            )

    def test_stalled_chain_is_restarted(self, second_order_fit, noisy_dataset, mocker):
        """Test that a stall reruns the chain with a 4x smaller proposal and twice the burn-in."""
        real_run_am = pem_module.run_am
        calls = []

        def stall_once(log_target, mode, burn_in, N, rng, state):
            calls.append((burn_in, state.s_d, state.initial_cov.copy()))
            if len(calls) == 1:
                raise ChainStalled("Acceptance rate 0.0000 after burn-in is below 0.01")
            return real_run_am(log_target, mode, burn_in=burn_in, N=N, rng=rng, state=state)

        mocker.patch('sysid.pem.run_am', side_effect=stall_once)
        chains = []

        sample_likelihood_confidence(
            second_order_fit, noisy_dataset, second_order_fit.sigma2_hat, 100, 0.9, 20,
            np.random.default_rng(5), burn_in=200, chain_sink=chains.append,
        )

        assert [burn_in for burn_in, _, _ in calls] == [200, 400]
        assert calls[1][1] == pytest.approx(calls[0][1] / 4.0)
        np.testing.assert_allclose(calls[1][2], calls[0][2] / 4.0)
        assert len(chains) == 1 and chains[0].burn_in == 400

    def test_restarts_are_bounded(self, mocker):
        """Test that ChainStalled propagates once every attempt stalled."""
        stalled = mocker.patch('sysid.pem.run_am', side_effect=ChainStalled("stalled"))

        with pytest.raises(ChainStalled):
            run_restarting_am(lambda x: -0.5 * x @ x, np.zeros(2), 10, 10, np.random.default_rng(0))

        assert stalled.call_count == LIKELIHOOD_CHAIN_ATTEMPTS

    def test_first_attempt_is_plain_am(self, second_order_fit, noisy_dataset):
        """Test that a chain that does not stall matches run_am from the mode."""
        from sysid.mcmc import run_am
        log_target = pem_module.likelihood_log_target(noisy_dataset, second_order_fit.sigma2_hat, 2, 2)
        mode = second_order_fit.theta.vector

        restarted = run_restarting_am(log_target, mode, 300, 200, np.random.default_rng(8))
        plain = run_am(log_target, mode, burn_in=300, N=200, rng=np.random.default_rng(8))

        np.testing.assert_array_equal(restarted.samples, plain.samples)

    @pytest.mark.slow
    def test_fir_chain_matches_conjugate_posterior(self):
        """Test the likelihood chain of a linear FIR model against its flat-prior Gaussian posterior."""
        generator = np.random.default_rng(31)
        u = generator.standard_normal(500)
        phi = build_regressor(u, 3).phi
        sigma2 = 0.25
        y = phi @ np.array([0.5, -0.3, 0.2]) + np.sqrt(sigma2) * generator.standard_normal(500)
        data = Dataset(u=u, y=y, sigma2=sigma2)
        gram = phi.T @ phi
        mean = np.linalg.solve(gram, phi.T @ y)
        cov = sigma2 * np.linalg.inv(gram)
        theta = OEParams(b=mean, f=[])
        fit = PemFit(theta=theta, cost=pem_cost(theta, data), sigma2_hat=sigma2, converged=True, iterations=0)
        chains = []

        sample_likelihood_confidence(
            fit, data, sigma2, 20000, 0.9, 10, np.random.default_rng(32), burn_in=2000, chain_sink=chains.append,
        )

        samples = chains[0].samples
        sd = np.sqrt(np.diag(cov))
        assert np.all(np.abs(samples.mean(axis=0) - mean) < 0.1 * sd)
        np.testing.assert_allclose(np.cov(samples, rowvar=False), cov, atol=0.15 * sd.max() ** 2)


class TestNoiseVarianceLS:
    """Tests for estimate_noise_variance_ls."""

    def test_noiseless_fir(self, rng):
        """Test an exactly representable FIR system."""
        u = rng.standard_normal(200)
        y = build_regressor(u, 10).phi @ rng.standard_normal(10)

        assert estimate_noise_variance_ls(Dataset(u=u, y=y, sigma2=1.0), 10) < 1e-10

    def test_pure_noise(self):
        """Test y = e with white input, T = 500 and n = 100."""
        generator = np.random.default_rng(6)
        data = Dataset(u=generator.standard_normal(500), y=generator.standard_normal(500), sigma2=1.0)

        assert 0.8 < estimate_noise_variance_ls(data, 100) < 1.2

    def test_requires_more_samples_than_taps(self):
        """Test T <= n."""
        with pytest.raises(ValueError):
            estimate_noise_variance_ls(Dataset(u=np.ones(5), y=np.ones(5), sigma2=1.0), 5)
