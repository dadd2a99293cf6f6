"""GRU cell and multirate clocking behavior."""

import numpy as np
import pytest

from multirate import tensor as T
from multirate.optim import ParamStore
from multirate.recurrent import (GruCell, MgruConfig, MultirateGru,
                                 active_groups, recurrent_param_count)
from multirate.rng import RngState


def make_gru(input_dim=3, state_dim=4, out_dim=3, seed=0):
    store = ParamStore()
    return store, GruCell(store, "g", input_dim, state_dim, out_dim, RngState(seed))


def make_mgru(cfg, input_dim=3, out_dim=3, seed=0):
    store = ParamStore()
    return store, MultirateGru(store, "m", input_dim, cfg, out_dim, RngState(seed))


class TestGruCell:
    def test_zero_weights_halve_previous_state(self):
        store, cell = make_gru(input_dim=2, state_dim=2, out_dim=2)
        for name in store.names():
            store[name].data[:] = 0.0
        h, o = cell.step(T.zeros((2,)), T.constant([1.0, 1.0]))
        # r = z = sigmoid(0) = 0.5, candidate tanh(0) = 0 -> h = 0.5 * h_prev
        np.testing.assert_allclose(h.data, [0.5, 0.5], atol=1e-7)
        np.testing.assert_allclose(o.data, [0.0, 0.0], atol=1e-7)

    def test_update_gate_forced_low_keeps_state(self):
        store, cell = make_gru(input_dim=2, state_dim=3, out_dim=2, seed=1)
        store["g.bz"].data[:] = -30.0  # z ~ 0: convex update stays at h_prev
        h_prev = T.constant([0.3, -0.2, 0.9])
        h, _ = cell.step(T.constant([0.5, -0.5]), h_prev)
        np.testing.assert_allclose(h.data, h_prev.data, atol=1e-6)

    def test_shape_mismatch_rejected(self):
        _, cell = make_gru()
        with pytest.raises(ValueError):
            cell.step(T.zeros((5,)), T.zeros((4,)))


class TestActiveGroups:
    def test_schedule_1_3_6(self):
        cfg = MgruConfig((2, 2, 2), (1, 3, 6))
        expected = [{0}, {0}, {0, 1}, {0}, {0}, {0, 1, 2}]
        got = [active_groups(t, cfg) for t in range(1, 7)]
        assert got == expected

    def test_period_one_always_active(self):
        cfg = MgruConfig((2, 2), (1, 5))
        assert all(0 in active_groups(t, cfg) for t in range(1, 20))

    def test_step_twelve_fires_all(self):
        cfg = MgruConfig((2, 2, 2), (1, 3, 6))
        assert active_groups(12, cfg) == {0, 1, 2}

    def test_step_below_one_rejected(self):
        cfg = MgruConfig((2,), (1,))
        with pytest.raises(ValueError):
            active_groups(0, cfg)


class TestMgruConfig:
    def test_decreasing_periods_rejected_by_default(self):
        with pytest.raises(ValueError):
            MgruConfig((2, 2), (3, 1))

    def test_decreasing_periods_allowed_explicitly(self):
        cfg = MgruConfig((2, 2), (3, 1), allow_unsorted_periods=True)
        assert cfg.periods == (3, 1)

    def test_size_sum_and_offsets(self):
        cfg = MgruConfig((3, 2, 1), (1, 2, 4))
        assert cfg.state_dim == 6
        assert cfg.offsets == (0, 3, 5)

    @pytest.mark.parametrize("sizes,periods", [((), ()), ((0, 2), (1, 2)),
                                               ((2,), (0,)), ((2, 2), (1,))])
    def test_invalid_configs_rejected(self, sizes, periods):
        with pytest.raises(ValueError):
            MgruConfig(sizes, periods)


class TestMultirateStep:
    def test_inactive_groups_pass_through_bitwise(self):
        cfg = MgruConfig((2, 2, 2), (1, 3, 6))
        _, net = make_mgru(cfg, input_dim=2, seed=3)
        rng = RngState(9)
        h1, _ = net.step(T.constant(rng.uniform((2,), -1, 1)), net.init_state(), 1)
        h2, _ = net.step(T.constant(rng.uniform((2,), -1, 1)), h1, 2)
        # at step 2 only group 0 fires; groups 1 and 2 copy bit for bit
        assert np.array_equal(h2.data[2:], h1.data[2:])
        assert not np.array_equal(h2.data[:2], h1.data[:2])

    def test_k1_equals_plain_gru_exactly(self):
        cfg = MgruConfig((5,), (1,))
        mstore, net = make_mgru(cfg, input_dim=3, out_dim=4, seed=7)
        gstore, cell = make_gru(input_dim=3, state_dim=5, out_dim=4, seed=7)
        # same weights: copy each multirate block into the plain cell
        mapping = {"g.Ur": "m.Ur0", "g.Uz": "m.Uz0", "g.Uh": "m.Uh0",
                   "g.Vr": "m.Vr0_0", "g.Vz": "m.Vz0_0", "g.Vh": "m.Vh0_0",
                   "g.br": "m.br", "g.bz": "m.bz", "g.bh": "m.bh",
                   "g.Wo": "m.Wo", "g.bo": "m.bo"}
        for gname, mname in mapping.items():
            gstore[gname].data[...] = mstore[mname].data
        rng = RngState(11)
        xs = [T.constant(rng.uniform((3,), -1, 1)) for _ in range(6)]
        m_states, m_outs, _ = net.run(xs)
        g_states, g_outs, _ = cell.run(xs)
        for ms, gs in zip(m_states, g_states):
            assert np.max(np.abs(ms.data - gs.data)) == 0.0
        for mo, go in zip(m_outs, g_outs):
            assert np.max(np.abs(mo.data - go.data)) == 0.0

    def test_slow_group_reads_fast_but_never_writes_it(self):
        # zeroing group 0's incoming state changes group 2's update, while
        # group 0's own value is untouched by group 2's firing
        cfg = MgruConfig((2, 2, 2), (1, 3, 6))
        _, net = make_mgru(cfg, input_dim=2, seed=5)
        rng = RngState(4)
        x = T.constant(rng.uniform((2,), -1, 1))
        h_prev = rng.uniform((6,), -0.5, 0.5)
        h_zeroed = h_prev.copy()
        h_zeroed[:2] = 0.0
        full, _ = net.step(x, T.constant(h_prev), 6)
        zeroed, _ = net.step(x, T.constant(h_zeroed), 6)
        assert not np.allclose(full.data[4:], zeroed.data[4:])  # group 2 read group 0

    def test_state_stays_in_unit_box(self):
        cfg = MgruConfig((2, 2), (1, 2))
        _, net = make_mgru(cfg, input_dim=3, seed=13)
        rng = RngState(21)
        h = T.constant(rng.uniform((4,), -1, 1))
        t = 1
        for _ in range(50):
            h, _ = net.step(T.constant(rng.uniform((3,), -2, 2)), h, t)
            t += 1
            assert np.all(np.abs(h.data) <= 1.0 + 1e-6)

    def test_mode_symmetry_under_group_reversal(self):
        # reversing group order maps fast_to_slow onto slow_to_fast exactly
        sizes, periods = (2, 3, 2), (1, 2, 4)
        f2s = MgruConfig(sizes, periods, "fast_to_slow")
        store_f, net_f = make_mgru(f2s, input_dim=2, out_dim=2, seed=17)
        s2f = MgruConfig(sizes[::-1], periods[::-1], "slow_to_fast",
                         allow_unsorted_periods=True)
        store_s, net_s = make_mgru(s2f, input_dim=2, out_dim=2, seed=18)

        k = 3
        rev = {i: k - 1 - i for i in range(k)}
        bounds = np.cumsum((0,) + sizes)
        rbounds = np.cumsum((0,) + sizes[::-1])

        def flip_state(h):
            return np.concatenate([h[bounds[i]:bounds[i + 1]]
                                   for i in reversed(range(k))])

        for g in "rzh":
            for i in range(k):
                store_s[f"m.U{g}{rev[i]}"].data[...] = store_f[f"m.U{g}{i}"].data
            store_s[f"m.b{g}"].data[...] = flip_state(store_f[f"m.b{g}"].data)
            for (i, j) in f2s.allowed_pairs():
                store_s[f"m.V{g}{rev[i]}_{rev[j]}"].data[...] = \
                    store_f[f"m.V{g}{i}_{j}"].data
        wo = store_f["m.Wo"].data
        store_s["m.Wo"].data[...] = np.concatenate(
            [wo[:, bounds[i]:bounds[i + 1]] for i in reversed(range(k))], axis=1)
        store_s["m.bo"].data[...] = store_f["m.bo"].data

        rng = RngState(23)
        xs = [T.constant(rng.uniform((2,), -1, 1)) for _ in range(8)]
        f_states, f_outs, _ = net_f.run(xs)
        s_states, s_outs, _ = net_s.run(xs)
        for fs, ss in zip(f_states, s_states):
            np.testing.assert_allclose(flip_state(fs.data), ss.data, atol=1e-6)
        for fo, so in zip(f_outs, s_outs):
            np.testing.assert_allclose(fo.data, so.data, atol=1e-6)

    def test_gradient_flows_through_passthrough_steps(self):
        cfg = MgruConfig((2, 2), (1, 2))
        store, net = make_mgru(cfg, input_dim=2, seed=29)
        rng = RngState(31)
        x_param = store.add("x", rng.uniform((2,), -1, 1))
        store.zero_grads()
        h, _ = net.step(T.constant(rng.uniform((2,), -1, 1)), net.init_state(), 1)
        h, _ = net.step(x_param, h, 2)   # slow group fires and reads x
        h, _ = net.step(T.constant(rng.uniform((2,), -1, 1)), h, 3)  # passthrough
        T.sum_all(T.narrow(h, 0, 2, 2)).backward()  # loss reads the slow group
        assert np.any(x_param.grad != 0.0)


class TestParamCount:
    def test_equal_groups_fast_to_slow(self):
        cfg = MgruConfig((2, 2, 2), (1, 3, 6), "fast_to_slow")
        assert recurrent_param_count(cfg) == 72  # vs 3 * 6^2 = 108 for plain GRU

    def test_k1_matches_plain_gru(self):
        cfg = MgruConfig((6,), (1,))
        assert recurrent_param_count(cfg) == 3 * 36

    @pytest.mark.parametrize("mode", ["fast_to_slow", "slow_to_fast"])
    @pytest.mark.parametrize("k", [2, 3, 4])
    def test_equal_group_saving_ratio(self, mode, k):
        size = 4
        cfg = MgruConfig((size,) * k, tuple(2 ** i for i in range(k)), mode)
        full = 3 * (size * k) ** 2
        assert recurrent_param_count(cfg) / full == pytest.approx((k + 1) / (2 * k))

    def test_stored_blocks_match_declared_count(self):
        cfg = MgruConfig((3, 2, 2), (1, 3, 6), "fast_to_slow")
        store, net = make_mgru(cfg, input_dim=2)
        stored = sum(store[n].data.size for n in store.names()
                     if ".V" in n)
        assert stored == recurrent_param_count(cfg)
