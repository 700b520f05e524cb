import numpy as np
import pytest

from isgdlab import optim, schemes


class TestImportanceWeight:
    def test_uniform_weight_is_exactly_one(self):
        assert optim.importance_weight(4, 0.25) == 1.0
        assert optim.importance_weight(1, 1.0) == 1.0
        # same float divided by itself, so exact even when 1/n is inexact
        assert optim.importance_weight(100, 1.0 / 100) == 1.0
        assert optim.importance_weight(3, 1.0 / 3) == 1.0

    def test_half_weight(self):
        assert optim.importance_weight(4, 0.5) == 0.5

    def test_rejects_nonpositive_probability(self):
        with pytest.raises(ValueError, match="positive"):
            optim.importance_weight(4, 0.0)

    def test_rejects_bad_n(self):
        with pytest.raises(ValueError, match="n >= 1"):
            optim.importance_weight(0, 0.5)


class TestBuildEstimate:
    def test_single_item_hand_case(self):
        # B=1, N=4, p_i=0.5: w=0.5, G = 0.5 * [1, 0]
        grads = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [2.0, 0.0]])
        p = np.array([0.5, 0.2, 0.2, 0.1])
        est = optim.build_estimate(grads, p, [0])
        np.testing.assert_array_equal(est.vector, [0.5, 0.0])
        np.testing.assert_array_equal(est.weights, [0.5])

    def test_uniform_scheme_gives_plain_batch_mean(self):
        rng = np.random.default_rng(1)
        grads = rng.normal(size=(8, 5))
        idx = np.array([1, 3, 3, 7])
        est = optim.build_estimate(grads, schemes.uniform(8), idx)
        np.testing.assert_array_equal(est.weights, np.ones(4))
        np.testing.assert_array_equal(est.vector, grads[idx].sum(axis=0) / 4)

    def test_unbiasedness_identity(self):
        # sum_i p_i w_i grad_i equals the full mean gradient
        rng = np.random.default_rng(2)
        for _ in range(50):
            n = int(rng.integers(2, 30))
            grads = rng.normal(size=(n, 6))
            p = schemes.normalize(rng.random(n) + 0.01)
            weighted_sum = np.zeros(6)
            for i in range(n):
                est = optim.build_estimate(grads, p, [i])
                weighted_sum += p[i] * est.vector
            np.testing.assert_allclose(weighted_sum, grads.mean(axis=0), rtol=1e-10)

    def test_batch_rows_variant_matches_table_variant(self):
        rng = np.random.default_rng(3)
        grads = rng.normal(size=(10, 4))
        p = schemes.normalize(rng.random(10) + 0.01)
        idx = np.array([2, 5, 5])
        a = optim.build_estimate(grads, p, idx)
        b = optim.build_estimate(grads[idx], p, idx, aligned=True)
        np.testing.assert_array_equal(a.vector, b.vector)

    def test_aligned_full_size_batch_keeps_row_order(self):
        # with B = N only the flag tells batch rows from a table
        rng = np.random.default_rng(14)
        grads = rng.normal(size=(4, 3))
        p = schemes.normalize(rng.random(4) + 0.01)
        idx = np.array([3, 2, 1, 0])
        a = optim.build_estimate(grads, p, idx)
        b = optim.build_estimate(grads[idx], p, idx, aligned=True)
        np.testing.assert_array_equal(a.vector, b.vector)

    def test_aligned_rejects_wrong_row_count(self):
        with pytest.raises(ValueError, match="aligned"):
            optim.build_estimate(
                np.ones((3, 2)), schemes.uniform(3), [0, 1], aligned=True
            )

    def test_unweighted_mode_is_plain_mean(self):
        rng = np.random.default_rng(4)
        grads = rng.normal(size=(6, 3))
        p = schemes.normalize(rng.random(6) + 0.01)
        idx = np.array([0, 4])
        est = optim.build_estimate(grads, p, idx, weighted=False)
        np.testing.assert_array_equal(est.weights, np.ones(2))
        np.testing.assert_array_equal(est.vector, grads[idx].sum(axis=0) / 2)

    def test_rejects_empty_batch(self):
        with pytest.raises(ValueError, match="at least one"):
            optim.build_estimate(np.ones((3, 2)), schemes.uniform(3), [])

    def test_rejects_out_of_range_index(self):
        with pytest.raises(ValueError, match="out of range"):
            optim.build_estimate(np.ones((3, 2)), schemes.uniform(3), [3])

    def test_rejects_mismatched_rows(self):
        with pytest.raises(ValueError, match="do not match"):
            optim.build_estimate(np.ones((5, 2)), schemes.uniform(3), [0, 1])


class TestSgd:
    def test_hand_case(self):
        got = optim.step_sgd(optim.Sgd(lr=0.1), np.array([1.0, 1.0]), np.array([2.0, -2.0]))
        np.testing.assert_allclose(got, [0.8, 1.2], rtol=1e-15)

    def test_zero_gradient_no_move(self):
        theta = np.array([3.0, -1.0])
        np.testing.assert_array_equal(optim.step_sgd(optim.Sgd(), theta, np.zeros(2)), theta)

    def test_constant_gradient_composes_additively(self):
        theta = np.zeros(3)
        G = np.array([1.0, 2.0, 3.0])
        s = optim.Sgd(lr=0.25)
        one = optim.step_sgd(s, theta, G)
        two = optim.step_sgd(s, one, G)
        np.testing.assert_allclose(two, theta - 2 * 0.25 * G, rtol=1e-15)

    def test_nan_estimate_rejected(self):
        with pytest.raises(optim.DivergenceError):
            optim.step_sgd(optim.Sgd(), np.zeros(2), np.array([np.nan, 0.0]))

    def test_rejects_negative_lr(self):
        with pytest.raises(ValueError, match="learning rate"):
            optim.Sgd(lr=-0.1)

    def test_make_state_rejects_zero_lr(self):
        with pytest.raises(ValueError, match="learning rate"):
            optim.make_state("sgd", lr=0.0)


class TestMomentum:
    def test_first_step_equals_sgd(self):
        rng = np.random.default_rng(5)
        theta = rng.normal(size=4)
        G = rng.normal(size=4)
        got, _ = optim.step_momentum(optim.Momentum(lr=0.1, momentum=0.9), theta, G)
        np.testing.assert_array_equal(got, optim.step_sgd(optim.Sgd(lr=0.1), theta, G))

    def test_zero_momentum_tracks_sgd_bitwise(self):
        rng = np.random.default_rng(6)
        theta_m = theta_s = rng.normal(size=5)
        state = optim.Momentum(lr=0.05, momentum=0.0)
        sgd = optim.Sgd(lr=0.05)
        for _ in range(50):
            G = rng.normal(size=5)
            theta_m, state = optim.step_momentum(state, theta_m, G)
            theta_s = optim.step_sgd(sgd, theta_s, G)
            np.testing.assert_array_equal(theta_m, theta_s)

    def test_two_step_unroll(self):
        # mu=0.5, constant G: v1=G, v2=1.5G, theta2 = theta0 - 2.5 lr G
        theta0 = np.array([1.0, -1.0])
        G = np.array([2.0, 4.0])
        state = optim.Momentum(lr=0.1, momentum=0.5)
        theta, state = optim.step_momentum(state, theta0, G)
        theta, state = optim.step_momentum(state, theta, G)
        np.testing.assert_allclose(theta, theta0 - 0.1 * 2.5 * G, rtol=1e-15)
        np.testing.assert_allclose(state.velocity, 1.5 * G, rtol=1e-15)

    def test_rejects_bad_momentum(self):
        with pytest.raises(ValueError, match="momentum"):
            optim.Momentum(momentum=1.5)


class TestRmsProp:
    def test_scalar_hand_case(self):
        # v = 0.01 * ||G||^2 = 0.04, step scale = lr / sqrt(v) for tiny eps
        theta = np.array([1.0, 0.0])
        G = np.array([2.0, 0.0])
        state = optim.RmsProp(lr=0.01, alpha=0.99, eps=1e-15, second_moment="scalar")
        got, new = optim.step_rmsprop(state, theta, G)
        np.testing.assert_allclose(new.v, 0.04, rtol=1e-12)
        np.testing.assert_allclose(got, theta - 0.05 * G, rtol=1e-10)

    @pytest.mark.parametrize("mode", ["scalar", "elementwise"])
    def test_alpha_one_is_rescaled_sgd_bitwise(self, mode):
        # alpha=1 freezes v at 0, so the step is exactly SGD at lr/eps
        rng = np.random.default_rng(7)
        eps = 1e-2
        theta_r = theta_s = rng.normal(size=6)
        state = optim.RmsProp(lr=0.01, alpha=1.0, eps=eps, second_moment=mode)
        sgd = optim.Sgd(lr=0.01 / eps)
        for _ in range(50):
            G = rng.normal(size=6)
            theta_r, state = optim.step_rmsprop(state, theta_r, G)
            theta_s = optim.step_sgd(sgd, theta_s, G)
            np.testing.assert_array_equal(theta_r, theta_s)

    def test_zero_gradient_decays_accumulator(self):
        state = optim.RmsProp(alpha=0.9, v=1.0, second_moment="scalar")
        theta = np.array([2.0])
        got, new = optim.step_rmsprop(state, theta, np.zeros(1))
        np.testing.assert_array_equal(got, theta)
        np.testing.assert_allclose(new.v, 0.9, rtol=1e-15)

    def test_elementwise_mode_uses_per_coordinate_squares(self):
        state = optim.RmsProp(lr=0.1, alpha=0.5, eps=1e-12, second_moment="elementwise")
        G = np.array([2.0, 0.0])
        theta = np.zeros(2)
        got, new = optim.step_rmsprop(state, theta, G)
        np.testing.assert_allclose(new.v, [2.0, 0.0], rtol=1e-15)
        # coordinate 0 sees v=2, coordinate 1 sees v=0
        np.testing.assert_allclose(got[0], -0.1 * 2.0 / np.sqrt(2.0), rtol=1e-10)
        assert got[1] == 0.0

    def test_rejects_unknown_mode(self):
        with pytest.raises(ValueError, match="second_moment"):
            optim.RmsProp(second_moment="diagonal")


class TestAdam:
    def test_first_step_bias_corrections_cancel(self):
        rng = np.random.default_rng(8)
        theta = rng.normal(size=4)
        G = rng.normal(size=4)
        state = optim.Adam(lr=0.01, eps=1e-8, second_moment="scalar")
        got, new = optim.step_adam(state, theta, G)
        want = theta - 0.01 * G / (1e-8 + np.linalg.norm(G))
        np.testing.assert_allclose(got, want, rtol=1e-12)
        assert new.t == 1

    def test_beta1_zero_disables_first_moment_memory(self):
        rng = np.random.default_rng(9)
        state = optim.Adam(lr=0.01, beta1=0.0, beta2=0.9, second_moment="scalar")
        theta = rng.normal(size=3)
        for _ in range(4):
            G = rng.normal(size=3)
            theta, state = optim.step_adam(state, theta, G)
            # m_t = (1-0)G and bias correction divides by 1, so m_hat == G
            np.testing.assert_allclose(state.m, G, rtol=1e-15)

    def test_two_step_unroll_hand_computed(self):
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        theta0 = np.array([1.0, 2.0])
        G = np.array([3.0, 4.0])  # ||G||^2 = 25
        state = optim.Adam(lr=lr, beta1=b1, beta2=b2, eps=eps, second_moment="scalar")
        theta1, state = optim.step_adam(state, theta0, G)
        m1, v1 = 0.1 * G, 0.001 * 25.0
        w1 = theta0 - lr * (m1 / 0.1) / (eps + np.sqrt(v1 / 0.001))
        np.testing.assert_allclose(theta1, w1, rtol=1e-12)
        theta2, state = optim.step_adam(state, theta1, G)
        m2 = b1 * m1 + 0.1 * G
        v2 = b2 * v1 + 0.001 * 25.0
        w2 = theta1 - lr * (m2 / (1 - b1**2)) / (eps + np.sqrt(v2 / (1 - b2**2)))
        np.testing.assert_allclose(theta2, w2, rtol=1e-12)
        assert state.t == 2

    def test_elementwise_mode(self):
        state = optim.Adam(lr=0.1, beta1=0.0, beta2=0.0, eps=1e-12, second_moment="elementwise")
        theta = np.zeros(2)
        G = np.array([4.0, 9.0])
        got, _ = optim.step_adam(state, theta, G)
        # v_hat = G^2 per coordinate, so each step is lr * sign-ish G/|G|
        np.testing.assert_allclose(got, -0.1 * G / np.sqrt(G * G), rtol=1e-10)

    def test_rejects_negative_counter(self):
        with pytest.raises(ValueError, match="counter"):
            optim.Adam(t=-1)


class TestDispatch:
    def test_step_routes_all_variants(self):
        rng = np.random.default_rng(10)
        theta = rng.normal(size=3)
        G = rng.normal(size=3)
        for name in ("sgd", "momentum", "rmsprop", "adam"):
            state = optim.make_state(name, lr=0.01)
            theta_new, state_new = optim.step(state, theta, G)
            assert theta_new.shape == theta.shape
            assert type(state_new) is type(state)

    def test_sgd_state_is_reused(self):
        state = optim.make_state("sgd")
        _, new = optim.step(state, np.zeros(2), np.ones(2))
        assert new is state

    def test_unknown_state_type(self):
        with pytest.raises(TypeError, match="unknown optimizer state"):
            optim.step(object(), np.zeros(1), np.zeros(1))

    def test_unknown_name(self):
        with pytest.raises(ValueError, match="unknown optimizer"):
            optim.make_state("adagrad")
