"""Tensor engine, initialization, optimizer, and RNG contracts."""

import math

import numpy as np
import pytest

from multirate import tensor as T
from multirate.errors import NumericError
from multirate.optim import ParamStore, glorot_uniform
from multirate.rng import RngState


class TestGlorot:
    def test_bound_is_one_for_equal_fans_of_three(self):
        w = glorot_uniform(3, 3, RngState(0))
        assert w.shape == (3, 3)
        assert np.all(np.abs(w.data) <= 1.0)

    def test_bound_value_fan_one_two(self):
        # b = sqrt(6 / 3) = sqrt(2)
        assert math.isclose(math.sqrt(6.0 / 3.0), 1.4142135623730951)
        w = glorot_uniform(1, 2, RngState(1))
        assert w.shape == (2, 1)
        assert np.all(np.abs(w.data) <= math.sqrt(2.0))

    def test_empirical_mean_near_zero(self):
        b = math.sqrt(6.0 / (40 + 2500))
        w = glorot_uniform(40, 2500, RngState(2))  # 1e5 samples
        assert w.data.size == 100_000
        assert abs(w.data.mean()) < 0.01 * b

    def test_samples_never_exceed_bound(self):
        for seed in range(5):
            w = glorot_uniform(7, 11, RngState(seed))
            b = math.sqrt(6.0 / 18.0)
            assert np.all(np.abs(w.data) <= b)

    @pytest.mark.parametrize("fan_in,fan_out", [(0, 3), (3, 0), (-1, 2)])
    def test_zero_fans_rejected(self, fan_in, fan_out):
        with pytest.raises(ValueError):
            glorot_uniform(fan_in, fan_out, RngState(0))


class TestBackward:
    def test_quadratic_gradient(self):
        store = ParamStore()
        w = store.add("w", [1.0, 2.0])
        store.zero_grads()
        loss = T.sum_all(w * w)
        loss.backward()
        np.testing.assert_allclose(w.grad, [2.0, 4.0], rtol=1e-6)

    def test_sigmoid_at_zero_scales_by_half(self):
        store = ParamStore()
        c = store.add("c", [3.0])
        store.zero_grads()
        loss = T.sum_all(T.sigmoid(T.zeros((1,))) * c)
        loss.backward()
        np.testing.assert_allclose(c.grad, [0.5], rtol=1e-6)

    def test_untouched_parameters_get_zero_gradients(self):
        store = ParamStore()
        used = store.add("used", [2.0])
        unused = store.add("unused", [5.0, 6.0])
        store.zero_grads()
        T.sum_all(used * used).backward()
        assert np.all(unused.grad == 0.0)
        assert used.grad is not None and used.grad[0] != 0.0

    def test_non_scalar_loss_rejected(self):
        v = T.tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError):
            (v * v).backward()

    @pytest.mark.filterwarnings("ignore:overflow encountered")
    def test_non_finite_forward_raises_naming_op(self):
        big = T.tensor([1e30], requires_grad=True)
        with pytest.raises(NumericError) as exc:
            _ = big * big  # overflows float32
        assert "mul" in str(exc.value)

    def test_gradient_accumulates_across_backwards(self):
        store = ParamStore()
        w = store.add("w", [1.0])
        store.zero_grads()
        T.sum_all(w * w).backward()
        T.sum_all(w * w).backward()
        np.testing.assert_allclose(w.grad, [4.0], rtol=1e-6)


class TestAdam:
    def test_first_step_moves_by_lr(self):
        with T.precision("float64"):
            store = ParamStore()
            p = store.add("p", [1.0])
            store.zero_grads()
            p.grad[:] = 1.0
            store.adam_step(lr=1e-4)
            # mhat = vhat = 1 at step 1, so the update is -lr / (1 + eps)
            assert abs((p.data[0] - 1.0) + 1e-4) < 1e-10

    def test_zero_gradient_leaves_parameter(self):
        store = ParamStore()
        p = store.add("p", [0.7])
        store.zero_grads()
        store.adam_step(lr=1e-2, weight_decay=0.0)
        assert p.data[0] == pytest.approx(0.7, abs=0)

    def test_unpopulated_gradients_rejected(self):
        store = ParamStore()
        store.add("p", [1.0])
        with pytest.raises(ValueError):
            store.adam_step(lr=1e-3)

    def test_weight_decay_is_decoupled(self):
        # zero gradient: only the decay term moves the parameter
        store = ParamStore()
        p = store.add("p", [2.0])
        store.zero_grads()
        store.adam_step(lr=0.1, weight_decay=0.5)
        assert p.data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0, rel=1e-6)
        assert store.step == 1

    def test_frozen_parameters_skip_update_and_decay(self):
        store = ParamStore()
        p = store.add("enc.p", [2.0])
        store.freeze("enc.")
        store.zero_grads()
        p.grad[:] = 1.0
        store.adam_step(lr=0.1, weight_decay=0.5)
        assert p.data[0] == 2.0


class TestClipGlobalNorm:
    def test_scale_half_when_norm_twenty(self):
        store = ParamStore()
        a = store.add("a", np.full(16, 5.0))  # norm 20
        store.zero_grads()
        a.grad[:] = a.data
        scale = store.clip_global_norm(10.0)
        assert scale == pytest.approx(0.5)
        assert np.linalg.norm(a.grad) == pytest.approx(10.0)

    def test_untouched_below_threshold(self):
        store = ParamStore()
        a = store.add("a", [3.0])
        store.zero_grads()
        a.grad[:] = 3.0
        assert store.clip_global_norm(10.0) == 1.0
        assert a.grad[0] == 3.0

    def test_idempotent(self):
        with T.precision("float64"):
            store = ParamStore()
            a = store.add("a", np.arange(1.0, 9.0))
            store.zero_grads()
            a.grad[:] = a.data * 3
            store.clip_global_norm(10.0)
            first = a.grad.copy()
            scale = store.clip_global_norm(10.0)
            np.testing.assert_allclose(a.grad, first, rtol=1e-12)
            assert scale == pytest.approx(1.0, abs=1e-12)


class TestDropout:
    def test_p_zero_is_identity(self):
        x = T.tensor(np.linspace(-1, 1, 10))
        out = T.dropout(x, 0.0, True, RngState(0))
        np.testing.assert_array_equal(out.data, x.data)

    def test_eval_mode_is_identity(self):
        x = T.tensor(np.linspace(-1, 1, 10))
        out = T.dropout(x, 0.9, False)
        np.testing.assert_array_equal(out.data, x.data)

    def test_p_one_rejected(self):
        with pytest.raises(ValueError):
            T.dropout(T.zeros((3,)), 1.0, True, RngState(0))

    def test_inverted_scaling_is_unbiased(self):
        x = T.tensor(np.ones(100_000))
        out = T.dropout(x, 0.5, True, RngState(3))
        assert abs(out.data.mean() - 1.0) < 0.02


class TestDeterminism:
    def test_identical_seed_gives_bitwise_identical_loss_sequence(self):
        def run():
            rng = RngState(42)
            store = ParamStore()
            w = store.weight("w", 4, 4, rng)
            x = T.constant(rng.uniform((4,), -1, 1))
            losses = []
            for _ in range(100):
                store.zero_grads()
                loss = T.sum_all(T.tanh(w @ x) * T.constant(np.ones(4)))
                loss.backward()
                store.clip_global_norm(10.0)
                store.adam_step(lr=1e-3, weight_decay=1e-4)
                losses.append(loss.item())
            return losses

        first, second = run(), run()
        assert first == second  # exact float equality, all 100 steps


class TestRngState:
    def test_same_seed_same_stream(self):
        a, b = RngState(7), RngState(7)
        np.testing.assert_array_equal(a.uniform((8,)), b.uniform((8,)))
        np.testing.assert_array_equal(a.integers(0, 100, 5), b.integers(0, 100, 5))

    def test_draw_size_does_not_shift_later_calls(self):
        a, b = RngState(7), RngState(7)
        a.uniform((1000,))
        b.uniform((2,))
        np.testing.assert_array_equal(a.uniform((4,)), b.uniform((4,)))

    def test_fork_gives_distinct_stream(self):
        a = RngState(7)
        child = a.fork()
        assert not np.array_equal(a.uniform((8,)), child.uniform((8,)))
