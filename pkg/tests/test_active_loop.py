"""Tests for pool bookkeeping, acquisition scoring, the consistency objective and full active learning runs."""

import numpy as np
import pytest

from active_loop import (
    ConsistencyObjective,
    EMATeacher,
    acquisition_scores,
    combined_step,
    ema_update,
    grow_pool,
    init_pool,
    inject_label_noise,
    per_class_accuracy,
    ramped_alpha,
    run_active_learning,
    select_top_b,
    uncertainty_scores,
    unsup_loss_and_grad,
)
from data_io import gen_two_moons
from errors import RejectedInputError
from model_core import init_params
from models import ALConfig, MLPSpec, OptimState, PoolState, Snapshot, TrainConfig


class TestPool:

    def test_init_pool_sizes(self):
        pool = init_pool(1000, 0.15, seed=0)
        assert len(pool.labeled) == 150
        assert len(pool.unlabeled) == 850
        assert sorted(pool.labeled + pool.unlabeled) == list(range(1000))

    def test_init_pool_is_seeded(self):
        assert init_pool(100, 0.2, 7) == init_pool(100, 0.2, 7)
        assert init_pool(100, 0.2, 7).labeled != init_pool(100, 0.2, 8).labeled

    @pytest.mark.parametrize("frac", [0.001, 0.0])
    def test_degenerate_start_rejected(self, frac):
        with pytest.raises(RejectedInputError):
            init_pool(100, frac, 0)

    def test_near_full_start_leaves_one_unlabeled(self):
        pool = init_pool(100, 0.9999, 0)
        assert (len(pool.labeled), len(pool.unlabeled)) == (99, 1)

    def test_grow_pool(self):
        pool = PoolState(labeled=(0, 3), unlabeled=(1, 2, 4, 5), cycle=0)
        grown = grow_pool(pool, np.array([4, 1]))
        assert grown.labeled == (0, 1, 3, 4)
        assert grown.unlabeled == (2, 5)
        assert grown.cycle == 1

    def test_grow_with_labeled_index_rejected(self):
        with pytest.raises(RejectedInputError):
            grow_pool(PoolState(labeled=(0,), unlabeled=(1, 2)), np.array([0]))

    def test_overlapping_pool_rejected(self):
        with pytest.raises(ValueError):
            PoolState(labeled=(0, 1), unlabeled=(1, 2))


class TestSelection:

    def test_top_b_by_score(self):
        chosen = select_top_b(np.array([0.1, 0.9, 0.5, 0.7]), np.array([10, 11, 12, 13]), 2)
        np.testing.assert_array_equal(chosen, [11, 13])

    def test_ties_break_by_ascending_index(self):
        chosen = select_top_b(np.ones(5), np.array([9, 3, 7, 1, 5]), 3)
        np.testing.assert_array_equal(chosen, [1, 3, 5])

    def test_zero_budget(self):
        assert select_top_b(np.ones(3), np.arange(3), 0).size == 0

    def test_budget_over_pool_rejected(self):
        with pytest.raises(RejectedInputError):
            select_top_b(np.ones(3), np.arange(3), 4)


class TestUncertainty:

    probs = np.array([[0.5, 0.3, 0.2], [1.0, 0.0, 0.0]])

    def test_entropy(self):
        scores = uncertainty_scores("entropy", self.probs)
        expected = -(0.5 * np.log(0.5) + 0.3 * np.log(0.3) + 0.2 * np.log(0.2))
        assert scores[0] == pytest.approx(expected)
        assert scores[1] == 0.0

    def test_least_conf(self):
        np.testing.assert_allclose(uncertainty_scores("least_conf", self.probs), [0.5, 0.0])

    def test_margin(self):
        np.testing.assert_allclose(uncertainty_scores("margin_conf", self.probs), [-0.2, -1.0])

    def test_ratio_uses_floor_for_certain_posteriors(self):
        scores = uncertainty_scores("ratio_conf", self.probs)
        assert scores[0] == pytest.approx(-0.5 / 0.3)
        assert np.isfinite(scores[1]) and scores[1] < scores[0]

    def test_unknown_kind_rejected(self):
        with pytest.raises(RejectedInputError):
            uncertainty_scores("variance", self.probs)


class TestAcquisition:

    def test_cod_against_previous_cycle(self, small_spec, rng):
        xs = rng.standard_normal((6, 2))
        previous = Snapshot(params=init_params(small_spec, 0), cycle=1, epoch=5, step=10)
        current = Snapshot(params=init_params(small_spec, 1), cycle=2, epoch=5, step=20)
        scores = acquisition_scores("cod", small_spec, current, xs, previous=previous)
        assert scores.shape == (6,) and np.all(scores >= 0)

    def test_cod_needs_previous(self, small_spec, rng):
        current = Snapshot(params=init_params(small_spec, 1), cycle=2, epoch=5, step=20)
        with pytest.raises(RejectedInputError):
            acquisition_scores("cod", small_spec, current, rng.standard_normal((2, 2)))

    def test_random_is_seeded(self, small_spec, rng):
        current = Snapshot(params=init_params(small_spec, 1), cycle=1, epoch=5, step=20)
        xs = rng.standard_normal((5, 2))
        a = acquisition_scores("random", small_spec, current, xs, rng=np.random.default_rng(3))
        b = acquisition_scores("random", small_spec, current, xs, rng=np.random.default_rng(3))
        np.testing.assert_array_equal(a, b)

    def test_emaod_zero_against_itself(self, small_spec, rng):
        w = init_params(small_spec, 1)
        current = Snapshot(params=w, cycle=1, epoch=5, step=20)
        scores = acquisition_scores("emaod", small_spec, current, rng.standard_normal((4, 2)), teacher=w)
        np.testing.assert_array_equal(scores, 0.0)


class TestLabelNoise:

    def test_zero_noise_is_identity(self):
        labels = np.arange(10) % 3
        np.testing.assert_array_equal(inject_label_noise(labels, 0.0, 3, seed=0), labels)

    def test_flip_rate_and_no_self_flips(self):
        labels = np.arange(10_000) % 4
        noisy = inject_label_noise(labels, 0.2, 4, seed=1)
        assert abs(np.mean(noisy != labels) - 0.2) < 0.012
        assert noisy.min() >= 0 and noisy.max() < 4

    def test_full_noise_always_flips(self):
        labels = np.arange(100) % 2
        np.testing.assert_array_equal(inject_label_noise(labels, 1.0, 2, seed=0), 1 - labels)

    def test_bad_probability_rejected(self):
        with pytest.raises(RejectedInputError):
            inject_label_noise(np.zeros(3, dtype=int), 1.5, 2, seed=0)


class TestConsistency:

    def test_ema_update(self):
        np.testing.assert_allclose(ema_update(np.zeros(3), np.ones(3), 0.9), np.full(3, 0.1))

    def test_ema_alpha_one_rejected(self):
        with pytest.raises(RejectedInputError):
            ema_update(np.zeros(3), np.ones(3), 1.0)

    def test_ema_teacher_callback(self, small_spec):
        teacher = EMATeacher(np.zeros(small_spec.n_params), 0.5)
        teacher(OptimState.fresh(np.ones(small_spec.n_params)), 0)
        np.testing.assert_allclose(teacher.params, 0.5)

    def test_ramped_alpha_caps_at_the_decay(self):
        assert [ramped_alpha(0.999, t) for t in (0, 1, 9, 10_000)] == pytest.approx([0.0, 0.5, 0.9, 0.999])

    def test_teacher_warmup_tracks_early_students(self, small_spec):
        n = small_spec.n_params
        teacher = EMATeacher(np.zeros(n), 0.999, warmup=True)
        teacher(OptimState.fresh(np.ones(n)), 0)
        np.testing.assert_array_equal(teacher.params, 1.0)
        teacher(OptimState.fresh(np.full(n, 3.0)), 0)
        np.testing.assert_allclose(teacher.params, 2.0)

    def test_zero_loss_against_self(self, small_spec, rng):
        w = init_params(small_spec, 0)
        loss, grad = unsup_loss_and_grad(small_spec, w, w, rng.standard_normal((5, 2)))
        assert loss == 0.0
        np.testing.assert_array_equal(grad, 0.0)

    @pytest.mark.parametrize("space", ["probs", "logits"])
    def test_gradient_matches_finite_differences(self, small_spec, space):
        rng = np.random.default_rng(5)
        w, teacher = init_params(small_spec, 0), init_params(small_spec, 1)
        X = rng.standard_normal((4, 2))
        _, grad = unsup_loss_and_grad(small_spec, w, teacher, X, space)
        h = 1e-6
        for i in rng.choice(w.size, size=15, replace=False):
            up, down = w.copy(), w.copy()
            up[i] += h
            down[i] -= h
            numeric = (unsup_loss_and_grad(small_spec, up, teacher, X, space)[0]
                       - unsup_loss_and_grad(small_spec, down, teacher, X, space)[0]) / (2 * h)
            assert grad[i] == pytest.approx(numeric, rel=1e-4, abs=1e-7)

    def test_objective_scales_by_lambda(self, small_spec, rng):
        w, teacher = init_params(small_spec, 0), init_params(small_spec, 1)
        X = rng.standard_normal((20, 2))
        one = ConsistencyObjective(small_spec, X, lambda: teacher, 1.0, 8, "probs", np.random.default_rng(0))
        half = ConsistencyObjective(small_spec, X, lambda: teacher, 0.5, 8, "probs", np.random.default_rng(0))
        (l1, g1), (l2, g2) = one(w), half(w)
        assert l2 == pytest.approx(0.5 * l1)
        np.testing.assert_allclose(g2, 0.5 * g1)

    def test_combined_step_with_zero_lambda_is_plain_sgd(self, small_spec, rng):
        cfg = TrainConfig(lr=0.1, momentum=0.0, weight_decay=0.0, batch_size=4, epochs=1)
        w, teacher = init_params(small_spec, 0), init_params(small_spec, 1)
        X, y = rng.standard_normal((4, 2)), np.array([0, 1, 2, 0])
        zero, _ = combined_step(small_spec, OptimState.fresh(w), X, y, rng.standard_normal((3, 2)), teacher,
                                0.0, 0.9, cfg)
        positive, new_teacher = combined_step(small_spec, OptimState.fresh(w), X, y, rng.standard_normal((3, 2)),
                                              teacher, 1.0, 0.9, cfg)
        assert not np.array_equal(zero.params, positive.params)
        np.testing.assert_allclose(new_teacher, 0.9 * teacher + 0.1 * positive.params)


class TestPerClassAccuracy:

    def test_absent_class_is_none(self, small_spec, rng):
        X = rng.standard_normal((6, 2))
        result = per_class_accuracy(small_spec, init_params(small_spec, 0), X, np.array([0, 0, 1, 1, 0, 1]), 3)
        assert result[2] is None
        assert all(0.0 <= v <= 1.0 for v in result[:2])


class TestRunActiveLearning:

    def test_records_per_cycle(self, moons, fast_train, short_al):
        spec = MLPSpec(layer_sizes=(2, 16, 2))
        records, params = run_active_learning(moons, spec, short_al, fast_train, seed=0)
        n_train = moons.X_train.shape[0]
        assert [r.cycle for r in records] == [1, 2, 3]
        assert [r.n_labeled for r in records] == [16, 24, 32]
        assert records[0].labeled_frac == pytest.approx(16 / n_train)
        assert params.shape == (spec.n_params,)
        assert all(r.mean_cod is not None and r.mean_cod >= 0 for r in records)
        assert all(r.decile_mean_losses is not None and len(r.decile_mean_losses) == 10 for r in records)

    def test_deterministic(self, moons, fast_train, short_al):
        spec = MLPSpec(layer_sizes=(2, 8, 8, 2))
        a, pa = run_active_learning(moons, spec, short_al, fast_train, seed=3)
        b, pb = run_active_learning(moons, spec, short_al, fast_train, seed=3)
        np.testing.assert_array_equal(pa, pb)
        assert [r.test_acc for r in a] == [r.test_acc for r in b]
        assert [r.mean_cod for r in a] == [r.mean_cod for r in b]

    def test_zero_lambda_matches_supervised(self, moons, fast_train, short_al):
        spec = MLPSpec(layer_sizes=(2, 8, 2))
        off = short_al.model_copy(update={"semi_enabled": False})
        on = short_al.model_copy(update={"semi_enabled": True, "lam": 0.0})
        _, p_off = run_active_learning(moons, spec, off, fast_train, seed=1)
        _, p_on = run_active_learning(moons, spec, on, fast_train, seed=1)
        np.testing.assert_array_equal(p_off, p_on)

    @pytest.mark.parametrize("update", [
        {"unsup_baseline": "cyclic"},
        {"sampler": "emaod"},
        {"sampler": "random"},
        {"sampler": "entropy"},
        {"cod_gap_epochs": 1},
        {"warm_start": True},
    ])
    def test_variants_run(self, moons, fast_train, short_al, update):
        spec = MLPSpec(layer_sizes=(2, 8, 2))
        records, _ = run_active_learning(moons, spec, short_al.model_copy(update=update), fast_train, seed=0)
        assert len(records) == 3
        assert records[-1].sampler == short_al.model_copy(update=update).sampler

    def test_mismatched_model_rejected(self, moons, fast_train, short_al, small_spec):
        with pytest.raises(RejectedInputError):
            run_active_learning(moons, small_spec, short_al, fast_train, seed=0)

    def test_infeasible_schedule_rejected(self):
        with pytest.raises(ValueError):
            ALConfig(start_frac=0.5, budget_frac=0.2, cycles=3)

    def test_lambda_alias(self):
        assert ALConfig.model_validate({"lambda": 0.2}).lam == 0.2

    def test_first_cycle_baseline_only_moves_cod(self, moons, fast_train, short_al):
        spec = MLPSpec(layer_sizes=(2, 8, 2))
        al = short_al.model_copy(update={"sampler": "random", "semi_enabled": False})
        trained, p_trained = run_active_learning(moons, spec, al, fast_train, seed=2)
        untrained, p_untrained = run_active_learning(
            moons, spec, al.model_copy(update={"first_cycle_baseline": "init"}), fast_train, seed=2)
        np.testing.assert_array_equal(p_trained, p_untrained)
        assert [r.test_acc for r in trained] == [r.test_acc for r in untrained]
        assert trained[0].mean_cod != untrained[0].mean_cod
        assert [r.mean_cod for r in trained[1:]] == [r.mean_cod for r in untrained[1:]]

    @pytest.mark.slow
    def test_first_cycle_cod_tracks_true_loss(self):
        moons = gen_two_moons(n=1000, noise_sigma=0.2, test_frac=0.2, seed=0)
        spec = MLPSpec(layer_sizes=(2, 32, 32, 2))
        cfg = TrainConfig(lr=0.1, momentum=0.9, weight_decay=5e-4, batch_size=64, epochs=30)
        al = ALConfig(start_frac=0.1, budget_frac=0.05, cycles=1, sampler="cod", semi_enabled=False)
        consistent = 0
        for seed in range(10):
            (record,), _ = run_active_learning(moons, spec, al, cfg, seed=seed)
            deciles = record.decile_mean_losses
            # deciles run from highest to lowest COD
            if record.spearman_cod_loss is not None and record.spearman_cod_loss > 0.3 and deciles[0] > deciles[-1]:
                consistent += 1
        assert consistent >= 8
