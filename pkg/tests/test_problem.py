"""Priors, likelihoods, posterior assembly and data synthesis."""

import numpy as np
import pytest

from modalgp.problem import (
    BoxPrior,
    EvaluationArchive,
    InputError,
    ProblemSpec,
    log_likelihood,
    log_prior,
    log_unnormalized_posterior,
    synthesize_data,
)

from helpers import ConstantModel, LinearModel, scalar_problem


class TestBoxPrior:
    def test_log_density_inside_unit_square(self):
        prior = BoxPrior(np.array([-1.0, -1.0]), np.array([1.0, 1.0]))
        assert prior.log_density(np.array([0.0, 0.0])) == pytest.approx(np.log(0.25))

    def test_log_density_outside_support(self):
        prior = BoxPrior(np.array([-1.0, -1.0]), np.array([1.0, 1.0]))
        assert prior.log_density(np.array([2.0, 0.0])) == -np.inf

    def test_log_density_mixed_box(self):
        prior = BoxPrior(np.array([0.0, 0.0, -2.0]), np.array([1.0, 1.0, 2.0]))
        assert prior.log_density(np.array([0.5, 0.5, 0.0])) == pytest.approx(np.log(0.25))

    def test_invalid_bounds_rejected(self):
        with pytest.raises(InputError):
            BoxPrior(np.array([1.0]), np.array([1.0]))

    def test_samples_land_inside(self):
        prior = BoxPrior(np.array([-2.0, 3.0]), np.array([-1.0, 7.0]))
        draws = prior.sample(np.random.default_rng(0), 200)
        assert np.all(draws >= prior.lower) and np.all(draws <= prior.upper)


class TestLikelihood:
    def test_zero_residual(self):
        spec = scalar_problem(d_obs=(3.0,))
        assert log_likelihood(spec, np.array([3.0])) == pytest.approx(0.0)

    def test_scalar_quadratic_form(self):
        spec = scalar_problem(g_matrix=((0.0,),), d_obs=(1.0,), noise_var=(1.0,))
        assert log_likelihood(spec, np.array([5.0])) == pytest.approx(-0.5)

    def test_diagonal_noise_hand_case(self):
        # independent oracle: explicit quadratic form with an inverted matrix
        spec = scalar_problem(
            g_matrix=((0.0,), (0.0,)), d_obs=(1.0, 2.0), noise_var=(1.0, 4.0)
        )
        residual = np.array([1.0, 2.0])
        expected = -0.5 * residual @ np.linalg.inv(np.diag([1.0, 4.0])) @ residual
        assert expected == pytest.approx(-1.0)
        assert log_likelihood(spec, np.array([0.0])) == pytest.approx(expected)

    def test_each_call_counts_one_forward_evaluation(self):
        spec = scalar_problem()
        log_likelihood(spec, np.array([1.0]))
        log_likelihood(spec, np.array([2.0]))
        assert spec.counter.count == 2

    def test_noise_scaling_inverse_in_loglik(self):
        theta = np.array([2.5])
        base = scalar_problem(d_obs=(1.0,), noise_var=(0.7,))
        scaled = scalar_problem(d_obs=(1.0,), noise_var=(7.0,))
        assert log_likelihood(base, theta) == pytest.approx(
            10.0 * log_likelihood(scaled, theta)
        )


class TestUnnormalizedPosterior:
    def test_out_of_support_short_circuits_forward_model(self):
        spec = scalar_problem(lower=(-1.0,), upper=(1.0,))
        assert log_unnormalized_posterior(spec, np.array([5.0])) == -np.inf
        assert spec.counter.count == 0

    def test_zero_residual_reduces_to_prior(self):
        spec = scalar_problem(d_obs=(0.5,), lower=(-1.0,), upper=(1.0,))
        assert log_unnormalized_posterior(spec, np.array([0.5])) == pytest.approx(
            log_prior(spec, np.array([0.5]))
        )

    def test_additivity_on_random_points(self):
        spec = scalar_problem(
            g_matrix=((1.0, 0.5), (0.0, 2.0)),
            d_obs=(0.3, -0.8),
            noise_var=(0.5, 2.0),
            lower=(-3.0, -3.0),
            upper=(3.0, 3.0),
        )
        rng = np.random.default_rng(1)
        for theta in spec.prior.sample(rng, 10):
            expected = log_prior(spec, theta) + log_likelihood(spec, theta)
            assert log_unnormalized_posterior(spec, theta) == pytest.approx(expected)


class TestSynthesizeData:
    def _forward(self):
        return LinearModel(((2.0, 0.0), (0.0, 4.0)))

    def test_zero_noise_returns_clean_observation(self):
        prior = BoxPrior(np.array([0.0, 0.0]), np.array([2.0, 2.0]))
        d, _ = synthesize_data(
            self._forward(), prior, np.array([1.0, 1.0]), 0.0, np.random.default_rng(0)
        )
        np.testing.assert_allclose(d, [2.0, 4.0])

    def test_fixed_seed_reproducible(self):
        prior = BoxPrior(np.array([0.0, 0.0]), np.array([2.0, 2.0]))
        args = (self._forward(), prior, np.array([1.0, 1.0]), 0.05)
        d1, c1 = synthesize_data(*args, np.random.default_rng(42))
        d2, c2 = synthesize_data(*args, np.random.default_rng(42))
        np.testing.assert_array_equal(d1, d2)
        np.testing.assert_array_equal(c1, c2)

    def test_per_observation_rule_covariance(self):
        # std = 5% of each observed value: (2, 4) -> diag(0.01, 0.04)
        prior = BoxPrior(np.array([0.0, 0.0]), np.array([2.0, 2.0]))
        _, cov = synthesize_data(
            self._forward(),
            prior,
            np.array([1.0, 1.0]),
            0.05,
            np.random.default_rng(0),
            rule="per_observation",
        )
        np.testing.assert_allclose(cov, np.diag([0.01, 0.04]))

    def test_shared_mean_rule_covariance(self):
        prior = BoxPrior(np.array([0.0, 0.0]), np.array([2.0, 2.0]))
        _, cov = synthesize_data(
            self._forward(), prior, np.array([1.0, 1.0]), 0.05, np.random.default_rng(0)
        )
        np.testing.assert_allclose(cov, np.diag([0.0225, 0.0225]))  # (0.05 * 3)^2

    def test_truth_outside_support_rejected(self):
        prior = BoxPrior(np.array([0.0, 0.0]), np.array([1.0, 1.0]))
        with pytest.raises(InputError):
            synthesize_data(
                self._forward(), prior, np.array([5.0, 0.0]), 0.05, np.random.default_rng(0)
            )


class TestEvaluationArchive:
    def test_rejects_non_finite_rows(self):
        archive = EvaluationArchive(2)
        with pytest.raises(InputError):
            archive.extend(np.zeros((1, 2)), np.array([-np.inf]), 0)

    def test_accumulates_generations(self):
        archive = EvaluationArchive(1)
        archive.extend(np.zeros((3, 1)), np.zeros(3), 0)
        archive.extend(np.ones((2, 1)), np.ones(2), 1)
        assert len(archive) == 5
        np.testing.assert_array_equal(archive.generations, [0, 0, 0, 1, 1])


class TestDirectLoglik:
    def test_prediction_is_loglik(self):
        spec = ProblemSpec(
            prior=BoxPrior(np.array([-1.0]), np.array([1.0])),
            forward=ConstantModel([-3.25]),
            d_obs=np.array([0.0]),
            noise_cov=np.array([[1.0]]),
            direct_loglik=True,
        )
        assert log_likelihood(spec, np.array([0.0])) == pytest.approx(-3.25)
