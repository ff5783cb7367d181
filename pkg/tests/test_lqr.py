import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import dare_value_iteration, scalar_dare_value_iteration

from koopquad import lqr
from koopquad import quadsim as qs
from koopquad.reference import Trajectory

INITS = ["schur", "doubling"]


class TestPadQ:
    def test_default_block(self):
        Qb = lqr.pad_Q(1e3 * np.eye(12), 28)
        assert Qb.shape == (28, 28)
        np.testing.assert_array_equal(Qb[:12, :12], 1e3 * np.eye(12))
        assert np.count_nonzero(Qb) == 12
        assert np.trace(Qb) == 12e3

    def test_zero(self):
        np.testing.assert_array_equal(lqr.pad_Q(np.zeros((12, 12)), 28), 0)

    def test_rejects_asymmetric(self):
        Q = np.eye(12)
        Q[0, 1] = 1.0
        with pytest.raises(ValueError):
            lqr.pad_Q(Q, 28)

    def test_rejects_small_p(self):
        with pytest.raises(ValueError):
            lqr.pad_Q(np.eye(12), 6)


class TestWeights:
    def test_default(self):
        w = lqr.LqrWeights.default()
        np.testing.assert_array_equal(w.Q, 1e3 * np.eye(12))
        np.testing.assert_array_equal(w.R, np.eye(4))

    @pytest.mark.parametrize("Q,R", [(-np.eye(2), np.eye(1)), (np.eye(2), np.zeros((1, 1))),
                                     (np.eye(2), -np.eye(1))])
    def test_invalid(self, Q, R):
        with pytest.raises(ValueError):
            lqr.LqrWeights(Q, R)


class TestSolveDare:
    @pytest.mark.parametrize("init", INITS)
    @pytest.mark.parametrize("a,b,q,r", [(1.0, 1.0, 1.0, 1.0), (1.2, 0.5, 2.0, 0.3), (0.5, 2.0, 1.0, 10.0)])
    def test_scalar_vs_value_iteration(self, init, a, b, q, r):
        g = lqr.solve_dare([[a]], [[b]], [[q]], [[r]], init=init)
        P = scalar_dare_value_iteration(a, b, q, r)
        assert abs(g.P[0, 0] - P) <= 1e-10 * max(1.0, P)
        assert g.meta["init"] == init

    def test_scalar_closed_form(self):
        # a = b = q = r = 1: P^2 - P - 1 = 0
        g = lqr.solve_dare([[1.0]], [[1.0]], [[1.0]], [[1.0]])
        assert g.P[0, 0] == pytest.approx((1 + np.sqrt(5)) / 2, abs=1e-12)

    @pytest.mark.parametrize("init", INITS)
    def test_double_integrator(self, init):
        dt = 0.1
        A = np.array([[1, dt], [0, 1]])
        B = np.array([[0.5 * dt ** 2], [dt]])
        Q, R = np.eye(2), np.eye(1)
        g = lqr.solve_dare(A, B, Q, R, init=init)
        P, K = dare_value_iteration(A, B, Q, R)
        np.testing.assert_allclose(g.K, K, atol=1e-8)
        np.testing.assert_allclose(g.P, P, rtol=1e-9)
        assert g.spectral_radius < 1

    def test_zero_dynamics(self):
        Q = np.diag([1.0, 2.0, 3.0])
        g = lqr.solve_dare(np.zeros((3, 3)), np.ones((3, 1)), Q, np.eye(1))
        np.testing.assert_allclose(g.P, Q, atol=1e-14)
        np.testing.assert_allclose(g.K, 0, atol=1e-14)

    def test_r_scaling_shrinks_gain(self):
        rng = np.random.default_rng(0)
        A = rng.standard_normal((4, 4))
        A *= 1.1 / np.max(np.abs(np.linalg.eigvals(A)))
        B = rng.standard_normal((4, 2))
        norms = [np.linalg.norm(lqr.solve_dare(A, B, np.eye(4), a * np.eye(2)).K)
                 for a in (1, 2, 10, 100)]
        assert all(n1 > n2 for n1, n2 in zip(norms, norms[1:]))

    def test_not_stabilizable(self):
        A = np.diag([1.5, 0.5])
        B = np.array([[0.0], [1.0]])
        with pytest.raises(lqr.DareError, match="stabilizable=False"):
            lqr.solve_dare(A, B, np.eye(2), np.eye(1))

    def test_unknown_init(self):
        with pytest.raises(ValueError):
            lqr.solve_dare(np.eye(1), np.eye(1), np.eye(1), np.eye(1), init="bisection")

    @given(st.integers(0, 10_000), st.integers(2, 8), st.integers(1, 3))
    @settings(max_examples=30, deadline=None)
    def test_residual_and_stability_invariant(self, seed, n, m):
        rng = np.random.default_rng(seed)
        A = rng.standard_normal((n, n))
        A *= rng.uniform(0.5, 1.3) / np.max(np.abs(np.linalg.eigvals(A)))
        B = rng.standard_normal((n, m))
        Q = np.diag(rng.uniform(0.1, 10, n))
        g = lqr.solve_dare(A, B, Q, np.eye(m))
        assert g.residual <= 1e-8 * np.linalg.norm(g.P)
        assert g.spectral_radius < 1
        assert np.linalg.eigvalsh(g.P).min() > -1e-9


class TestDesign:
    def test_default_gain(self, tls_model, tls_gain):
        assert tls_gain.K.shape == (4, 28)
        np.testing.assert_array_equal(tls_gain.K[:, 0], 0)
        assert tls_gain.spectral_radius < 1
        assert tls_gain.residual <= 1e-8 * np.linalg.norm(tls_gain.P)
        assert tls_gain.meta["constant_excluded"]

    def test_gain_serializes(self, tls_gain):
        d = tls_gain.to_dict()
        for key in ("K", "P", "spectral_radius", "dare_residual", "iterations", "Q", "R"):
            assert key in d


class TestControlLaw:
    def test_on_reference_gives_feedforward(self, tls_model, tls_gain, params):
        x = np.zeros(12)
        x[2] = 2.0
        u_ff = np.array([0.5, 0.4, 0.45, 0.48])
        np.testing.assert_array_equal(lqr.koopman_lqr_control(tls_model, tls_gain, x, x, u_ff), u_ff)
        np.testing.assert_array_equal(lqr.koopman_lqr_control(tls_model, tls_gain, x, x),
                                      params.hover_command())

    def test_above_reference_reduces_thrust(self, tls_model, tls_gain, params):
        x_ref = np.zeros(12)
        x = x_ref.copy()
        x[2] = 0.1
        u = lqr.koopman_lqr_control(tls_model, tls_gain, x, x_ref)
        assert u.sum() < params.hover_command().sum()

    def test_nonnegative(self, tls_model, tls_gain):
        x = np.zeros(12)
        x[2] = 50.0
        assert np.all(lqr.koopman_lqr_control(tls_model, tls_gain, x, np.zeros(12)) >= 0)

    @given(st.integers(0, 10_000))
    @settings(max_examples=50, deadline=None)
    def test_lipschitz_in_lifted_error(self, tls_model, tls_gain, seed):
        rng = np.random.default_rng(seed)
        x1, x2, ref = rng.uniform(-1, 1, (3, 12))
        u1 = lqr.koopman_lqr_control(tls_model, tls_gain, x1, ref)
        u2 = lqr.koopman_lqr_control(tls_model, tls_gain, x2, ref)
        bound = np.linalg.norm(tls_gain.K, 2) * np.linalg.norm(tls_model.lift(x1) - tls_model.lift(x2))
        assert np.linalg.norm(u1 - u2) <= bound * (1 + 1e-12) + 1e-12


def hover_trajectory(n=151, z=2.0, dt=0.01):
    pos = np.tile([0.0, 0.0, z], (n, 1))
    zeros = np.zeros((n, 3))
    return Trajectory(np.arange(n) * dt, pos, zeros, np.zeros(n), zeros)


class TestRollout:
    def test_zero_steps(self, tls_model, tls_gain, params):
        log = lqr.rollout_closed_loop(tls_model, tls_gain, hover_trajectory(), params, 0)
        assert log.states.shape == (1, 12) and log.inputs.shape == (0, 4)

    def test_hover_regulation(self, tls_model, tls_gain, params):
        log = lqr.rollout_closed_loop(tls_model, tls_gain, hover_trajectory(), params, 150)
        assert log.diverged_at is None and log.states.shape == (151, 12)
        assert np.abs(log.states[:, :3] - [0, 0, 2]).max() <= 1e-3

    def test_steps_out_of_range(self, tls_model, tls_gain, params):
        with pytest.raises(ValueError):
            lqr.rollout_closed_loop(tls_model, tls_gain, hover_trajectory(10), params, 10)

    def test_log_roundtrip(self, tls_model, tls_gain, params, tmp_path):
        log = lqr.rollout_closed_loop(tls_model, tls_gain, hover_trajectory(), params, 20)
        log.save(tmp_path / "r.json", tag="x")
        back = lqr.ClosedLoopLog.load(tmp_path / "r.json")
        np.testing.assert_array_equal(back.states, log.states)
        np.testing.assert_array_equal(back.raw_inputs, log.raw_inputs)
