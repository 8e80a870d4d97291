"""Tests for output-discrepancy scores, the bound checks and loss-estimation quality metrics."""

import math

import numpy as np
import pytest

from errors import RejectedInputError
from loss_estimation import (
    cod_scores,
    emaod_scores,
    estimate_C,
    grad_norm_profile,
    lipschitz_check,
    loss_estimation_quality,
    record_trajectory,
    spectral_norm,
    tod,
    tod_scores,
    verify_corollary_accumulated,
    verify_corollary_T,
    verify_theorem1,
)
from model_core import forward, init_params, softmax
from models import MLPSpec, Snapshot


def _scalar_trials(n, seed):
    """Random scalar-output ReLU networks with an input and a target."""
    rng = np.random.default_rng(seed)
    for trial in range(n):
        d = int(rng.integers(1, 5))
        hidden = [int(h) for h in rng.integers(2, 9, size=int(rng.integers(1, 3)))]
        spec = MLPSpec(layer_sizes=(d, *hidden, 1))
        yield trial, spec, init_params(spec, [seed, trial]), rng.standard_normal(d), float(rng.normal(0, 2))


class TestDiscrepancy:

    def test_identical_models_have_zero_tod(self, small_spec, rng):
        w = init_params(small_spec, 0)
        np.testing.assert_array_equal(tod_scores(small_spec, w, w, rng.standard_normal((5, 2))), 0.0)

    def test_linear_logit_tod(self, linear_spec):
        assert tod(linear_spec, np.array([1.0, 0.0]), np.array([2.0, 0.0]), np.array([3.0]), "logits") == 3.0

    def test_scorers_share_the_probs_default(self, small_spec, rng):
        a, b = init_params(small_spec, 0), init_params(small_spec, 1)
        X = rng.standard_normal((5, 2))
        np.testing.assert_array_equal(tod_scores(small_spec, a, b, X), tod_scores(small_spec, a, b, X, "probs"))
        np.testing.assert_array_equal(emaod_scores(small_spec, a, b, X), tod_scores(small_spec, a, b, X))

    def test_symmetric(self, small_spec, rng):
        a, b = init_params(small_spec, 0), init_params(small_spec, 1)
        X = rng.standard_normal((6, 2))
        np.testing.assert_allclose(tod_scores(small_spec, a, b, X), tod_scores(small_spec, b, a, X))

    def test_probs_space_matches_manual(self, small_spec, rng):
        a, b = init_params(small_spec, 0), init_params(small_spec, 1)
        x = rng.standard_normal(2)
        expected = np.linalg.norm(softmax(forward(small_spec, a, x)) - softmax(forward(small_spec, b, x)))
        assert tod(small_spec, a, b, x, "probs") == pytest.approx(expected, rel=1e-12)

    def test_empty_input(self, small_spec):
        w = init_params(small_spec, 0)
        assert tod_scores(small_spec, w, w, np.zeros((0, 2))).shape == (0,)

    def test_order_follows_inputs(self, small_spec, rng):
        a, b = init_params(small_spec, 0), init_params(small_spec, 1)
        X = rng.standard_normal((7, 2))
        perm = rng.permutation(7)
        np.testing.assert_array_equal(tod_scores(small_spec, a, b, X)[perm], tod_scores(small_spec, a, b, X[perm]))

    def test_cod_needs_consecutive_cycles(self, small_spec, rng):
        X = rng.standard_normal((4, 2))
        init = Snapshot(params=init_params(small_spec, 0), cycle=0, epoch=0, step=0)
        first = Snapshot(params=init_params(small_spec, 1), cycle=1, epoch=5, step=40)
        second = Snapshot(params=init_params(small_spec, 2), cycle=2, epoch=5, step=80)
        np.testing.assert_array_equal(cod_scores(small_spec, first, init, X),
                                      tod_scores(small_spec, first.params, init.params, X, "probs"))
        with pytest.raises(RejectedInputError):
            cod_scores(small_spec, second, init, X)

    def test_emaod_is_tod_against_teacher(self, small_spec, rng):
        w, teacher = init_params(small_spec, 0), init_params(small_spec, 5)
        X = rng.standard_normal((3, 2))
        np.testing.assert_array_equal(emaod_scores(small_spec, w, teacher, X),
                                      tod_scores(small_spec, w, teacher, X, "probs"))


class TestSingleStepBound:

    def test_linear_example(self, linear_spec):
        # f = w x + b at w=1, b=0, x=2, y=5: |grad f|^2 = 5, sqrt(2L) = 3
        report = verify_theorem1(linear_spec, np.array([1.0, 0.0]), np.array([2.0]), 5.0, eta=0.1)
        assert report.lhs == pytest.approx(1.5, rel=1e-12)
        assert report.rhs == pytest.approx(1.5, rel=1e-12)
        assert report.rhs_unsquared == pytest.approx(0.1 * 3 * math.sqrt(5), rel=1e-12)
        assert report.satisfied_with_slack

    def test_linear_models_hit_the_bound_exactly(self):
        rng = np.random.default_rng(3)
        for trial in range(30):
            d = int(rng.integers(1, 6))
            spec = MLPSpec(layer_sizes=(d, 1))
            params = rng.standard_normal(spec.n_params)
            report = verify_theorem1(spec, params, rng.standard_normal(d), float(rng.normal(0, 3)), eta=1e-2,
                                     trial=trial)
            assert report.lhs == pytest.approx(report.rhs, rel=1e-10)

    @pytest.mark.parametrize("eta", [1e-3, 1e-4])
    def test_relu_networks_within_slack_at_small_eta(self, eta):
        for trial, spec, params, x, y in _scalar_trials(100, seed=11):
            report = verify_theorem1(spec, params, x, y, eta, slack=0.05, trial=trial)
            assert report.satisfied_with_slack, report

    def test_zero_rhs_with_zero_movement(self, linear_spec):
        # target already met: L = 0, no movement
        report = verify_theorem1(linear_spec, np.array([1.0, 0.0]), np.array([2.0]), 2.0, eta=0.1)
        assert report.lhs == 0.0 and report.rhs == 0.0 and report.ratio == 0.0

    def test_vector_output_rejected(self, small_spec):
        with pytest.raises(RejectedInputError):
            verify_theorem1(small_spec, init_params(small_spec, 0), np.zeros(2), 1.0, eta=1e-3)


class TestTrajectoryBounds:

    def test_trajectory_records_every_step(self, scalar_spec, rng):
        traj = record_trajectory(scalar_spec, init_params(scalar_spec, 0), rng.standard_normal(3), 1.0, 1e-2, 10)
        assert traj.steps == list(range(11))
        assert len(traj.outputs) == len(traj.losses) == len(traj.grad_sq) == 11
        assert traj.losses[-1] <= traj.losses[0]

    def test_one_step_corollary_equals_single_step_bound(self, scalar_spec, rng):
        params, x = init_params(scalar_spec, 2), rng.standard_normal(3)
        traj = record_trajectory(scalar_spec, params, x, 0.7, 1e-3, 1)
        single = verify_theorem1(scalar_spec, params, x, 0.7, 1e-3)
        report = verify_corollary_T(traj, 0, 1)
        assert report.lhs == pytest.approx(single.lhs, rel=1e-12)
        assert report.rhs == pytest.approx(single.rhs, rel=1e-12)

    def test_corollaries_hold_along_gd_trajectories(self):
        for trial, spec, params, x, y in _scalar_trials(20, seed=21):
            traj = record_trajectory(spec, params, x, y, 1e-3, 50)
            C = max(traj.grad_sq[:50])
            summed = verify_corollary_T(traj, 0, 50, slack=0.05, trial=trial)
            assert summed.satisfied_with_slack, summed
            if C > 0:
                accumulated = verify_corollary_accumulated(traj, 0, 50, C, slack=0.05, trial=trial)
                assert accumulated.satisfied_with_slack, accumulated
                assert summed.rhs <= accumulated.rhs * (1 + 1e-12)

    def test_offset_window(self, scalar_spec, rng):
        traj = record_trajectory(scalar_spec, init_params(scalar_spec, 0), rng.standard_normal(3), 1.0, 1e-3, 20)
        report = verify_corollary_T(traj, 5, 10)
        assert report.lhs == pytest.approx(abs(traj.outputs[15] - traj.outputs[5]))

    def test_window_past_trajectory_rejected(self, scalar_spec, rng):
        traj = record_trajectory(scalar_spec, init_params(scalar_spec, 0), rng.standard_normal(3), 1.0, 1e-3, 5)
        with pytest.raises(RejectedInputError):
            verify_corollary_T(traj, 0, 6)

    def test_C_below_observed_rejected(self, scalar_spec, rng):
        traj = record_trajectory(scalar_spec, init_params(scalar_spec, 0), rng.standard_normal(3), 1.0, 1e-3, 5)
        with pytest.raises(RejectedInputError):
            verify_corollary_accumulated(traj, 0, 5, C=max(traj.grad_sq[:5]) * 0.5)


class TestGradientStatistics:

    def test_estimate_C(self, small_spec, rng):
        snapshots = [init_params(small_spec, s) for s in range(3)]
        stats = estimate_C(small_spec, snapshots, rng.standard_normal((4, 2)))
        assert stats.count == 12
        assert stats.max >= stats.mean >= 0

    def test_profile_has_one_value_per_snapshot(self, small_spec, rng):
        snapshots = [Snapshot(params=init_params(small_spec, s), cycle=s, epoch=0, step=0) for s in range(4)]
        assert len(grad_norm_profile(small_spec, snapshots, rng.standard_normal((5, 2)))) == 4

    def test_empty_rejected(self, small_spec):
        with pytest.raises(RejectedInputError):
            estimate_C(small_spec, [], np.zeros((1, 2)))


class TestLipschitz:

    @pytest.mark.parametrize("shape", [(5, 3), (3, 5), (4, 4), (1, 6)])
    def test_spectral_norm_matches_svd(self, shape):
        r = np.random.default_rng(sum(shape)).standard_normal(shape)
        assert spectral_norm(r) == pytest.approx(np.linalg.norm(r, 2), rel=1e-6)

    def test_spectral_norm_of_zero(self):
        assert spectral_norm(np.zeros((3, 2))) == 0.0

    def test_relu_layer_bound_has_no_failures(self):
        rng = np.random.default_rng(99)
        for trial in range(1000):
            d_in, d_out = int(rng.integers(2, 9)), int(rng.integers(1, 9))
            W = rng.standard_normal((d_in, d_out))
            r = rng.standard_normal((d_in, d_out)) * rng.uniform(0.01, 1.0)
            report = lipschitz_check(W, rng.standard_normal(d_out), r, rng.standard_normal(d_in), trial)
            assert report.satisfied, report

    def test_zero_perturbation(self):
        report = lipschitz_check(np.eye(2), np.zeros(2), np.zeros((2, 2)), np.array([1.0, -1.0]))
        assert report.lhs == 0.0 and report.satisfied

    def test_shape_mismatch_rejected(self):
        with pytest.raises(RejectedInputError):
            lipschitz_check(np.eye(2), np.zeros(2), np.zeros((3, 2)), np.ones(2))


class TestEstimationQuality:

    def test_perfect_estimator(self):
        losses = np.linspace(0.0, 1.0, 50)
        quality = loss_estimation_quality(losses * 3, losses)
        assert quality.spearman_rho == pytest.approx(1.0)
        assert all(v == 1.0 for v in quality.recall_at_p.values())
        assert quality.decile_mean_losses == sorted(quality.decile_mean_losses, reverse=True)
        assert len(quality.decile_mean_losses) == 10

    def test_reversed_estimator(self):
        losses = np.arange(20, dtype=float)
        quality = loss_estimation_quality(-losses, losses)
        assert quality.spearman_rho == pytest.approx(-1.0)
        assert quality.recall_at_p[10] == 0.0

    def test_constant_scores_have_no_correlation(self):
        quality = loss_estimation_quality(np.ones(20), np.arange(20, dtype=float))
        assert quality.spearman_rho is None

    def test_recall_uses_rounded_top_fraction(self):
        scores = np.arange(30, dtype=float)
        losses = scores.copy()
        losses[-1] = -1.0  # the top scorer is the lowest-loss sample
        quality = loss_estimation_quality(scores, losses)
        # p=5 -> top max(1, round(1.5)) = 2 samples: {29, 28} vs {28, 27}
        assert quality.recall_at_p[5] == 0.5

    def test_too_few_samples_rejected(self):
        with pytest.raises(RejectedInputError):
            loss_estimation_quality(np.ones(9), np.ones(9))

    def test_length_mismatch_rejected(self):
        with pytest.raises(RejectedInputError):
            loss_estimation_quality(np.ones(10), np.ones(11))
