"""Ensemble smoother updates, combined scores, local updating."""

import numpy as np
import pytest

from modalgp.ensemble import (
    Ensemble,
    LocalUpdateConfig,
    _perturbed_observations,
    _updated_members,
    es_update,
    evaluate_members,
    ilues_run,
    ilues_step,
    j_scores,
)
from modalgp.forward import BimodalToyModel
from modalgp.mixture import kmeans
from modalgp.problem import BoxPrior, InputError

from helpers import scalar_problem


def identity_problem(d_obs, noise_var, lower=-100.0, upper=100.0):
    return scalar_problem(
        g_matrix=((1.0,),), d_obs=(d_obs,), noise_var=(noise_var,),
        lower=(lower,), upper=(upper,),
    )


def make_ensemble(spec, members):
    members = np.atleast_2d(np.asarray(members, dtype=float)).T.copy()
    preds, _ = evaluate_members(spec, members)
    return Ensemble(members, preds, iteration=0)


class TestEsUpdate:
    def test_hand_case_with_fixed_perturbed_data(self):
        # members {0, 2}, identity forward, noise 1, dtilde = 1 for both:
        # cross-cov = auto-cov = 2, gain = 2/3 -> {2/3, 4/3}
        spec = identity_problem(d_obs=1.0, noise_var=1.0)
        e = make_ensemble(spec, [0.0, 2.0])
        updated = _updated_members(
            e.members, e.predictions, spec, np.array([[1.0], [1.0]])
        )
        np.testing.assert_allclose(updated[:, 0], [2.0 / 3.0, 4.0 / 3.0])

    def test_huge_noise_leaves_members_unchanged(self):
        spec = identity_problem(d_obs=1.0, noise_var=1e12)
        e = make_ensemble(spec, [0.0, 2.0])
        updated = es_update(e, spec, np.random.default_rng(0))
        np.testing.assert_allclose(updated.members, e.members, atol=1e-6)

    def test_identical_members_unchanged(self):
        spec = identity_problem(d_obs=5.0, noise_var=1.0)
        e = make_ensemble(spec, [2.0, 2.0, 2.0])
        updated = es_update(e, spec, np.random.default_rng(1))
        np.testing.assert_allclose(updated.members, e.members)

    def test_iteration_index_increments(self):
        spec = identity_problem(d_obs=1.0, noise_var=1.0)
        e = make_ensemble(spec, [0.0, 2.0])
        assert es_update(e, spec, np.random.default_rng(2)).iteration == 1

    def test_update_clipped_to_prior_box(self):
        spec = identity_problem(d_obs=50.0, noise_var=1e-6, lower=-1.0, upper=1.0)
        e = make_ensemble(spec, [-0.5, 0.5])
        updated = es_update(e, spec, np.random.default_rng(3))
        assert np.all(updated.members >= -1.0) and np.all(updated.members <= 1.0)

    def test_kalman_posterior_mean_linear_gaussian(self):
        # conjugate oracle: ensemble moments + Kalman formula
        spec = identity_problem(d_obs=1.2, noise_var=0.5, lower=-1.0, upper=3.0)
        rng = np.random.default_rng(4)
        members = spec.prior.sample(rng, 2000)
        preds, _ = evaluate_members(spec, members)
        e = Ensemble(members, preds, 0)
        prior_mean = members.mean()
        prior_var = members.var(ddof=1)
        kalman = prior_mean + prior_var / (prior_var + 0.5) * (1.2 - prior_mean)
        updated = es_update(e, spec, rng)
        assert updated.members.mean() == pytest.approx(kalman, rel=0.05)


class TestJScores:
    def _three_member_ensemble(self):
        spec = identity_problem(d_obs=0.0, noise_var=1.0)
        return make_ensemble(spec, [0.0, 1.0, 2.0]), spec

    def test_hand_case(self):
        e, spec = self._three_member_ensemble()
        scores = j_scores(e, spec, 0)
        np.testing.assert_allclose(scores, [0.0, 0.5, 2.0], atol=1e-9)

    def test_self_term_is_pure_misfit(self):
        e, spec = self._three_member_ensemble()
        scores = j_scores(e, spec, 1)
        # member 1 relative to itself: J2 = 0, J1/J1max = 1/4
        assert scores[1] == pytest.approx(0.25, abs=1e-9)

    def test_double_maximum_scores_two(self):
        spec = identity_problem(d_obs=0.0, noise_var=1.0)
        e = make_ensemble(spec, [0.0, 1.0, 4.0])
        scores = j_scores(e, spec, 0)
        assert scores[2] == pytest.approx(2.0, abs=1e-9)

    def test_invariant_under_noise_rescaling(self):
        spec1 = identity_problem(d_obs=0.3, noise_var=1.0)
        spec10 = identity_problem(d_obs=0.3, noise_var=10.0)
        rng = np.random.default_rng(5)
        members = rng.normal(size=6)
        e1 = make_ensemble(spec1, members)
        e10 = make_ensemble(spec10, members)
        for j in range(6):
            np.testing.assert_allclose(
                j_scores(e1, spec1, j), j_scores(e10, spec10, j), atol=1e-9
            )

    def test_index_validated(self):
        e, spec = self._three_member_ensemble()
        with pytest.raises(InputError):
            j_scores(e, spec, 3)


class TestIluesStep:
    def test_alpha_one_reproduces_es_candidates(self):
        # replay the internal randomness: with alpha = 1 every member's
        # candidate set is the globally updated ensemble
        spec = identity_problem(d_obs=1.0, noise_var=1.0)
        e = make_ensemble(spec, [0.0, 0.7, 2.0, -1.0])
        seed = 11
        stepped = ilues_step(e, spec, LocalUpdateConfig(alpha=1.0), np.random.default_rng(seed))

        from modalgp.ensemble import _combined_scores, _distance_scores, _theta_cov_factor

        replay = np.random.default_rng(seed)
        children = replay.spawn(e.size)
        j1 = (e.predictions[:, 0] - spec.d_obs[0]) ** 2
        for j in range(e.size):
            child = children[j]
            dtilde = _perturbed_observations(spec, e.size, child)
            pick = int(child.integers(e.size))
            full_scores = _combined_scores(
                j1, _distance_scores(e, _theta_cov_factor(e.members), j)
            )
            order = np.argsort(full_scores, kind="stable")
            updated = _updated_members(
                e.members[order], e.predictions[order], spec, dtilde
            )
            np.testing.assert_allclose(stepped.members[j], updated[pick])

    def test_fixed_seed_reproducible(self):
        spec = identity_problem(d_obs=1.0, noise_var=1.0)
        e = make_ensemble(spec, [0.0, 2.0])
        cfg = LocalUpdateConfig(alpha=1.0)
        s1 = ilues_step(e, spec, cfg, np.random.default_rng(7))
        s2 = ilues_step(e, spec, cfg, np.random.default_rng(7))
        np.testing.assert_array_equal(s1.members, s2.members)

    def test_local_fraction_validated(self):
        with pytest.raises(InputError):
            LocalUpdateConfig(alpha=0.0)
        spec = identity_problem(d_obs=0.0, noise_var=1.0)
        e = make_ensemble(spec, [0.0, 1.0, 2.0, 3.0])
        with pytest.raises(InputError):
            ilues_step(e, spec, LocalUpdateConfig(alpha=0.1), np.random.default_rng(0))

    def test_bimodal_clusters_survive_one_step(self):
        toy = BimodalToyModel(
            np.array([-1.5, 0.0]), np.array([1.5, 0.0]), 0.09 * np.eye(2)
        )
        spec = toy.problem_spec(BoxPrior(np.array([-3.3, -1.8]), np.array([3.3, 1.8])))
        rng = np.random.default_rng(8)
        members = np.vstack(
            [
                toy.center_a + 0.2 * rng.standard_normal((25, 2)),
                toy.center_b + 0.2 * rng.standard_normal((25, 2)),
            ]
        )
        preds, _ = evaluate_members(spec, members)
        e = Ensemble(members, preds, 0)
        initial_gap = np.linalg.norm(toy.center_a - toy.center_b)
        stepped = ilues_step(e, spec, LocalUpdateConfig(alpha=0.1), rng)
        clustering = kmeans(stepped.members, 2, np.random.default_rng(9))
        gap = np.linalg.norm(clustering.centroids[0] - clustering.centroids[1])
        assert gap >= 0.5 * initial_gap


class TestIluesRun:
    def test_archive_counts_initial_plus_updates(self):
        spec = identity_problem(d_obs=1.0, noise_var=1.0)
        ens, archive = ilues_run(
            spec, 80, 1, LocalUpdateConfig(alpha=0.5), np.random.default_rng(10)
        )
        assert len(archive) == 160
        assert spec.counter.count == 160
        assert ens.iteration == 1

    def test_archive_rows_track_generations(self):
        spec = identity_problem(d_obs=1.0, noise_var=1.0)
        _, archive = ilues_run(
            spec, 10, 3, LocalUpdateConfig(alpha=0.5), np.random.default_rng(11)
        )
        np.testing.assert_array_equal(np.bincount(archive.generations), [10, 10, 10, 10])

    def test_all_archive_rows_finite_and_inside_box(self):
        spec = identity_problem(d_obs=1.0, noise_var=1.0, lower=-2.0, upper=2.0)
        _, archive = ilues_run(
            spec, 30, 2, LocalUpdateConfig(alpha=0.2), np.random.default_rng(12)
        )
        assert np.all(np.isfinite(archive.log_posts))
        assert np.all(archive.thetas >= -2.0) and np.all(archive.thetas <= 2.0)
