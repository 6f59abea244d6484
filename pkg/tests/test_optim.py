import math

import numpy as np
import pytest

from handlens.optim import (
    Adam,
    AdamW,
    ConstantSchedule,
    OneCycleSchedule,
    SGD,
    cross_entropy,
    log_loss_value,
    lr_range_test,
    softmax,
)
from handlens.tensor import NonFiniteError, ShapeError, Tensor, backward, reduce_sum
from helpers import check_gradients


class TestSoftmax:
    def test_symmetric_pair(self):
        np.testing.assert_allclose(softmax(np.array([0.0, 0.0])), [0.5, 0.5])

    def test_shift_invariance(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(4, 7))
        np.testing.assert_allclose(softmax(x + 123.456), softmax(x), atol=1e-12)

    def test_direct_values(self):
        out = softmax(np.array([1.0, 2.0, 3.0]))
        np.testing.assert_allclose(out, [0.09003057, 0.24472847, 0.66524096],
                                   atol=5e-9)

    def test_rows_sum_to_one_and_open_interval(self):
        x = np.random.default_rng(1).normal(size=(10, 7)) * 20
        probs = softmax(x)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
        assert (probs > 0).all() and (probs < 1).all()

    def test_non_finite_rejected(self):
        with pytest.raises(NonFiniteError):
            softmax(np.array([1.0, np.inf]))

    def test_tensor_gradient(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(3, 5))
        check_gradients(
            lambda ts: reduce_sum(softmax(ts[0]) * softmax(ts[0])), [x], rtol=1e-4)


class TestCrossEntropy:
    def test_uniform_logits_give_log_k(self):
        loss = cross_entropy(Tensor(np.zeros((4, 7))), [0, 3, 5, 6])
        assert loss.item() == pytest.approx(math.log(7), abs=1e-15)

    def test_confident_correct_logit_drives_loss_to_zero(self):
        logits = np.zeros((1, 7))
        logits[0, 2] = 50.0
        loss = cross_entropy(Tensor(logits), [2])
        assert 0.0 <= loss.item() < 1e-20

    def test_loss_nonnegative(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            logits = rng.normal(size=(5, 4)) * 10
            labels = rng.integers(0, 4, size=5)
            assert cross_entropy(Tensor(logits), labels).item() >= 0.0

    def test_gradient_is_softmax_minus_onehot_over_n(self):
        rng = np.random.default_rng(4)
        logits = rng.normal(size=(6, 4))
        labels = rng.integers(0, 4, size=6)
        t = Tensor(logits, requires_grad=True)
        backward(cross_entropy(t, labels))
        expected = softmax(logits)
        expected[np.arange(6), labels] -= 1.0
        np.testing.assert_allclose(t.grad, expected / 6, atol=1e-12)

    def test_gradient_against_finite_differences(self):
        rng = np.random.default_rng(5)
        logits = rng.normal(size=(4, 5))
        labels = rng.integers(0, 5, size=4)
        check_gradients(lambda ts: cross_entropy(ts[0], labels), [logits], rtol=1e-5)

    def test_fused_equals_explicit_composition(self):
        rng = np.random.default_rng(6)
        logits = rng.normal(size=(8, 7)) * 3
        labels = rng.integers(0, 7, size=8)
        fused = cross_entropy(Tensor(logits), labels).item()
        probs = softmax(logits)
        composed = float(-np.log(probs[np.arange(8), labels]).mean())
        assert fused == pytest.approx(composed, abs=1e-12)
        assert fused == pytest.approx(log_loss_value(logits, labels), abs=1e-15)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])

    def test_batch_shape_mismatch(self):
        with pytest.raises(ShapeError):
            cross_entropy(Tensor(np.zeros((2, 3))), [0, 1, 2])


def _params(*values):
    return [Tensor(np.array(v, dtype=float), requires_grad=True) for v in values]


def _with_grads(params, grads):
    for p, g in zip(params, grads):
        p.grad = np.asarray(g, dtype=float)


class TestSGD:
    def test_vanilla_update(self):
        (p,) = _params([1.0, 2.0])
        _with_grads([p], [[0.5, -0.5]])
        SGD([p], lr=0.1).step()
        np.testing.assert_allclose(p.data, [0.95, 2.05])

    def test_l2_equals_decoupled_without_momentum(self):
        rng = np.random.default_rng(7)
        theta = rng.normal(size=4)
        grad = rng.normal(size=4)
        (a,) = _params(theta)
        (b,) = _params(theta)
        _with_grads([a], [grad])
        _with_grads([b], [grad])
        SGD([a], lr=0.05, weight_decay=0.3, decay_mode="l2").step()
        SGD([b], lr=0.05, weight_decay=0.3, decay_mode="decoupled").step()
        assert np.abs(a.data - b.data).max() <= 1e-15

    def test_decoupled_shrinkage_value(self):
        (p,) = _params([1.0])
        _with_grads([p], [[0.0]])
        SGD([p], lr=0.1, weight_decay=0.1, decay_mode="decoupled").step()
        np.testing.assert_allclose(p.data, [0.99], atol=1e-15)

    def test_momentum_accumulates(self):
        (p,) = _params([0.0])
        opt = SGD([p], lr=1.0, momentum=0.5)
        for _ in range(2):
            _with_grads([p], [[1.0]])
            opt.step()
        # v1 = 1, v2 = 1.5 -> theta = -(1 + 1.5)
        np.testing.assert_allclose(p.data, [-2.5])

    def test_frozen_param_untouched(self):
        (p,) = _params([1.0])
        p.requires_grad = False
        SGD([p], lr=0.1, weight_decay=0.5).step()
        np.testing.assert_array_equal(p.data, [1.0])


class TestAdam:
    def test_first_step_unit_update(self):
        (p,) = _params([0.0])
        _with_grads([p], [[1.0]])
        Adam([p], lr=0.001).step()
        assert p.data[0] == pytest.approx(-0.001, rel=1e-6)

    def test_zero_gradient_plain_mode_is_stationary(self):
        (p,) = _params([1.5])
        opt = Adam([p], lr=0.01)
        for _ in range(5):
            _with_grads([p], [[0.0]])
            opt.step()
        np.testing.assert_array_equal(p.data, [1.5])

    def test_l2_mode_moves_with_zero_gradient(self):
        (p,) = _params([1.0])
        opt = Adam([p], lr=0.001, weight_decay=0.1, decay_mode="l2")
        _with_grads([p], [[0.0]])
        opt.step()
        assert p.data[0] < 1.0  # the l2 term passes through the adaptive update

    def test_adamw_zero_decay_bitwise_equals_plain_adam(self):
        rng = np.random.default_rng(8)
        theta = rng.normal(size=6)
        (a,) = _params(theta)
        (b,) = _params(theta)
        plain = Adam([a], lr=0.01, weight_decay=0.0, decay_mode="l2")
        decoupled = AdamW([b], lr=0.01, weight_decay=0.0)
        for _ in range(3):
            g = rng.normal(size=6)
            _with_grads([a], [g])
            _with_grads([b], [g])
            plain.step()
            decoupled.step()
        assert a.data.tobytes() == b.data.tobytes()

    def test_adamw_decay_independent_of_second_moment_history(self):
        (p,) = _params([1.0])
        opt = AdamW([p], lr=0.1, weight_decay=0.1)
        opt._v[0][...] = 1e6  # huge curvature history
        opt.t = 50
        _with_grads([p], [[0.0]])
        opt.step()
        assert p.data[0] == pytest.approx(0.99, abs=1e-15)

    def test_adam_l2_and_adamw_diverge_on_quadratic(self):
        # loss = x1^2 + 10 x2^2, lambda = 0.1: trajectories split by step 2
        def grads(theta):
            return np.array([2 * theta[0], 20 * theta[1]])

        start = np.array([1.0, -0.5])
        (a,) = _params(start)
        (b,) = _params(start)
        l2 = Adam([a], lr=0.1, weight_decay=0.1, decay_mode="l2")
        dec = AdamW([b], lr=0.1, weight_decay=0.1)
        for _ in range(2):
            _with_grads([a], [grads(a.data)])
            _with_grads([b], [grads(b.data)])
            l2.step()
            dec.step()
        assert np.abs(a.data - b.data).max() > 1e-6

    def test_invalid_lr(self):
        with pytest.raises(ValueError):
            Adam(_params([1.0]), lr=0.0)


class TestOneCycle:
    def test_midpoint_hits_lr_max(self):
        sched = OneCycleSchedule(total_steps=100)
        lr, mom = sched.at(50)
        assert lr == pytest.approx(1e-2, abs=0)
        assert mom == pytest.approx(0.85, abs=0)

    def test_endpoints(self):
        sched = OneCycleSchedule(total_steps=100)
        for step in (0, 100):
            lr, mom = sched.at(step)
            assert lr == pytest.approx(1e-2 / 25, abs=1e-18)
            assert mom == pytest.approx(0.95, abs=1e-15)

    def test_mirror_symmetry(self):
        sched = OneCycleSchedule(total_steps=100)
        for step in range(0, 101):
            lr_a, mom_a = sched.at(step)
            lr_b, mom_b = sched.at(100 - step)
            assert lr_a == pytest.approx(lr_b, abs=1e-12)
            assert mom_a == pytest.approx(mom_b, abs=1e-12)

    def test_half_cycle_complement_identity(self):
        # lr(s) + lr(s + T/2) is constant: the two linear phases mirror each other
        sched = OneCycleSchedule(total_steps=100)
        expected = sched.lr_max + sched.lr_low
        for step in range(0, 51):
            total = sched.at(step)[0] + sched.at(step + 50)[0]
            assert total == pytest.approx(expected, abs=1e-12)

    def test_two_equal_linear_pieces(self):
        sched = OneCycleSchedule(total_steps=200)
        lrs = np.array([sched.at(s)[0] for s in range(201)])
        rise = np.diff(lrs[:101])
        fall = np.diff(lrs[100:])
        assert np.abs(np.diff(rise)).max() < 1e-15  # piecewise linear
        assert np.abs(np.diff(fall)).max() < 1e-15
        assert np.abs(rise + fall[::-1]).max() < 1e-15
        assert int(np.argmax(lrs)) == 100

    def test_momentum_argmin_at_lr_argmax(self):
        sched = OneCycleSchedule(total_steps=120)
        lrs, moms = zip(*(sched.at(s) for s in range(121)))
        assert int(np.argmax(lrs)) == int(np.argmin(moms)) == 60

    def test_out_of_range_step(self):
        with pytest.raises(ValueError):
            OneCycleSchedule(total_steps=10).at(11)

    def test_constant_schedule(self):
        sched = ConstantSchedule(total_steps=10, lr_max=3e-3)
        assert sched.at(0) == sched.at(5) == sched.at(10) == (3e-3, 0.95)


def _noisy_quadratic_step(curvature_a, sigma, seed):
    # mini-batch quadratic: f_t(x) = a (x - b_t)^2 with seeded targets b_t;
    # the deterministic stability threshold is 2/f'' = 1/a
    rng = np.random.default_rng(seed)
    state = {"x": 1.0}

    def step_fn(lr):
        b = sigma * rng.standard_normal()
        loss = curvature_a * (state["x"] - b) ** 2
        state["x"] -= lr * 2 * curvature_a * (state["x"] - b)
        if not math.isfinite(state["x"]):
            raise NonFiniteError("parameter diverged")
        return loss

    return step_fn


class TestLrRangeTest:
    def test_grid_is_geometric(self):
        result = lr_range_test(_noisy_quadratic_step(2.0, 0.3, 0),
                               lr_min=1e-3, lr_max=10.0, steps=100)
        ratios = np.array(result.lrs[1:]) / np.array(result.lrs[:-1])
        assert np.abs(ratios / ratios[0] - 1.0).max() < 1e-12

    @pytest.mark.parametrize("a,seed", [(2.0, 0), (2.0, 1), (4.0, 0), (1.0, 2)])
    def test_early_stop_within_factor_four_of_threshold(self, a, seed):
        result = lr_range_test(_noisy_quadratic_step(a, 0.3, seed),
                               lr_min=1e-3, lr_max=10.0, steps=100)
        threshold = 1.0 / a  # = 2 / curvature, curvature = 2a
        assert result.stopped_early
        assert threshold < result.stop_lr <= 4.0 * threshold

    def test_suggestion_strictly_inside_range(self):
        result = lr_range_test(_noisy_quadratic_step(2.0, 0.3, 3),
                               lr_min=1e-3, lr_max=10.0, steps=100)
        assert 1e-3 < result.suggestion < result.stop_lr

    def test_deterministic(self):
        a = lr_range_test(_noisy_quadratic_step(2.0, 0.3, 4), steps=50,
                          lr_min=1e-3, lr_max=10.0)
        b = lr_range_test(_noisy_quadratic_step(2.0, 0.3, 4), steps=50,
                          lr_min=1e-3, lr_max=10.0)
        assert a.lrs == b.lrs and a.smoothed_losses == b.smoothed_losses
        assert a.suggestion == b.suggestion

    def test_curve_decreases_then_diverges(self):
        result = lr_range_test(_noisy_quadratic_step(2.0, 0.3, 0),
                               lr_min=1e-3, lr_max=10.0, steps=100)
        losses = result.smoothed_losses
        assert min(losses) < losses[0]          # it came down first
        assert losses[-1] > 4 * min(losses)     # and blew past the stop bar

    def test_rejects_bad_arguments(self):
        step = _noisy_quadratic_step(2.0, 0.3, 0)
        with pytest.raises(ValueError):
            lr_range_test(step, lr_min=1.0, lr_max=0.5)
        with pytest.raises(ValueError):
            lr_range_test(step, steps=5)

    def test_immediate_divergence_is_an_error(self):
        def bad_step(lr):
            raise NonFiniteError("boom")

        with pytest.raises(RuntimeError, match="before any"):
            lr_range_test(bad_step)
