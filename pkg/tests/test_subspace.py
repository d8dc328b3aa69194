"""Subspace identification against closed-form and simulation oracles."""

import numpy as np
import pytest
from scipy import linalg as sla

from sysidbench.exceptions import DivergenceError, TooShortError
from sysidbench.subspace import (
    Lssm,
    SubspaceConfig,
    block_hankel,
    estimate_x0,
    identify,
    lssm_simulate,
    markov_parameters,
    solve_dare_fixed_point,
)


def random_stable_system(n_x, n_u, n_y, rng, radius=0.8):
    A = rng.standard_normal((n_x, n_x))
    A *= radius / max(np.abs(np.linalg.eigvals(A)))
    B = rng.standard_normal((n_x, n_u))
    C = rng.standard_normal((n_y, n_x))
    return A, B, C


def simulate_true(A, B, C, x0, u, noise=None, rng=None):
    n = u.shape[0]
    x = np.array(x0, dtype=float)
    y = np.empty((n, C.shape[0]))
    for k in range(n):
        y[k] = C @ x
        if noise is not None:
            y[k] += noise[1] * rng.standard_normal(C.shape[0])
        x = A @ x + B @ u[k]
        if noise is not None:
            x += noise[0] * rng.standard_normal(A.shape[0])
    return y


class TestBlockHankel:
    def test_small_frozen_case(self):
        data = np.arange(1.0, 9.0).reshape(-1, 1)
        H = block_hankel(data, 3)
        expected = np.array(
            [
                [1, 2, 3, 4, 5, 6],
                [2, 3, 4, 5, 6, 7],
                [3, 4, 5, 6, 7, 8],
            ],
            dtype=float,
        )
        assert H.shape == (3, 6)
        np.testing.assert_array_equal(H, expected)

    def test_multichannel_blocks(self):
        data = np.array([[1.0, 10.0], [2.0, 20.0], [3.0, 30.0], [4.0, 40.0]])
        H = block_hankel(data, 2)
        assert H.shape == (4, 3)
        # column 1 stacks samples 1 and 2
        np.testing.assert_array_equal(H[:, 1], [2.0, 20.0, 3.0, 30.0])

    def test_too_short(self):
        with pytest.raises(TooShortError):
            block_hankel(np.zeros((3, 1)), 5)


class TestExactRecovery:
    @pytest.mark.parametrize("method", ["n4sid", "moesp", "cva"])
    @pytest.mark.parametrize("n_true", [1, 2, 3, 4])
    def test_markov_parameters_match_truth(self, method, n_true):
        rng = np.random.default_rng(100 + n_true)
        A, B, C = random_stable_system(n_true, 2, 2, rng)
        u = rng.standard_normal((500, 2))
        y = simulate_true(A, B, C, rng.standard_normal(n_true), u)
        model = identify(u, y, SubspaceConfig(method=method, n_x=n_true, horizon=n_true + 2))
        got = markov_parameters(model, 20)
        want = np.empty_like(got)
        Ak = np.eye(n_true)
        for k in range(20):
            want[k] = C @ Ak @ B
            Ak = A @ Ak
        assert np.max(np.abs(got - want)) < 1e-6

    def test_methods_agree_pairwise(self):
        rng = np.random.default_rng(7)
        A, B, C = random_stable_system(3, 1, 2, rng)
        u = rng.standard_normal((600, 1))
        y = simulate_true(A, B, C, rng.standard_normal(3), u)
        params = {
            m: markov_parameters(
                identify(u, y, SubspaceConfig(method=m, n_x=3, horizon=6)), 20
            )
            for m in ("n4sid", "moesp", "cva")
        }
        assert np.max(np.abs(params["n4sid"] - params["moesp"])) < 1e-6
        assert np.max(np.abs(params["n4sid"] - params["cva"])) < 1e-6

    def test_eigenvalues_invariant_across_methods(self):
        rng = np.random.default_rng(21)
        A, B, C = random_stable_system(4, 2, 3, rng)
        u = rng.standard_normal((800, 2))
        y = simulate_true(A, B, C, np.zeros(4), u)
        for method in ("n4sid", "moesp", "cva"):
            model = identify(u, y, SubspaceConfig(method=method, n_x=4, horizon=8))
            got = np.sort_complex(np.linalg.eigvals(model.A))
            want = np.sort_complex(np.linalg.eigvals(A))
            assert np.max(np.abs(got - want)) < 1e-6

    def test_training_outputs_reproduced(self):
        rng = np.random.default_rng(3)
        A, B, C = random_stable_system(3, 2, 2, rng)
        u = rng.standard_normal((400, 2))
        x0 = rng.standard_normal(3)
        y = simulate_true(A, B, C, x0, u)
        model = identify(u, y, SubspaceConfig(method="n4sid", n_x=3, horizon=6))
        x0_hat = estimate_x0(model, u[:20], y[:20])
        y_hat = lssm_simulate(model, x0_hat, u)
        assert np.max(np.abs(y_hat - y)) < 1e-8


class TestOrderAndHorizonEdges:
    def test_rank_reduction_warns_and_still_fits(self):
        rng = np.random.default_rng(5)
        A, B, C = random_stable_system(1, 1, 1, rng)
        u = rng.standard_normal((300, 1))
        y = simulate_true(A, B, C, rng.standard_normal(1), u)
        with pytest.warns(UserWarning, match="state order reduced"):
            model = identify(u, y, SubspaceConfig(method="n4sid", n_x=4, horizon=6))
        assert model.n_x < 4
        got = markov_parameters(model, 10)[:, 0, 0]
        want = np.array([(C @ np.linalg.matrix_power(A, k) @ B).item() for k in range(10)])
        assert np.max(np.abs(got - want)) < 1e-6

    def test_horizon_one_uses_internal_floor(self):
        rng = np.random.default_rng(11)
        A, B, C = random_stable_system(1, 1, 2, rng)
        u = rng.standard_normal((200, 1))
        y = simulate_true(A, B, C, rng.standard_normal(1), u)
        model = identify(u, y, SubspaceConfig(method="moesp", n_x=1, horizon=1))
        got = markov_parameters(model, 5)
        want = np.stack([C @ np.linalg.matrix_power(A, k) @ B for k in range(5)])
        assert np.max(np.abs(got - want)) < 1e-6

    def test_order_capped_by_horizon_block_rows(self):
        rng = np.random.default_rng(13)
        A, B, C = random_stable_system(4, 1, 1, rng)
        u = rng.standard_normal((400, 1))
        y = simulate_true(A, B, C, np.zeros(4), u)
        # horizon 3 with one output supports at most (3-1)*1 = 2 states
        with pytest.warns(UserWarning, match="state order reduced"):
            model = identify(u, y, SubspaceConfig(method="n4sid", n_x=4, horizon=3))
        assert model.n_x == 2

    def test_too_short_record(self):
        with pytest.raises(TooShortError):
            identify(
                np.zeros((15, 1)),
                np.zeros((15, 1)),
                SubspaceConfig(method="n4sid", n_x=1, horizon=4),
            )

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SubspaceConfig(method="pem")
        with pytest.raises(ValueError):
            SubspaceConfig(n_x=0)
        with pytest.raises(ValueError):
            SubspaceConfig(horizon=0)


class TestAutonomous:
    def make_rotation_data(self, n=300):
        omega, delta = 2.0, 0.05
        th = omega * delta
        Ad = np.array([[np.cos(th), np.sin(th) / omega], [-omega * np.sin(th), np.cos(th)]])
        C = np.array([[1.0, 0.0], [0.0, 1.0], [-(omega**2), 0.0]])
        x = np.array([1.0, 0.0])
        y = np.empty((n, 3))
        for k in range(n):
            y[k] = C @ x
            x = Ad @ x
        return Ad, C, y

    @pytest.mark.parametrize("method", ["n4sid", "moesp", "cva"])
    def test_recovers_oscillator(self, method):
        Ad, C, y = self.make_rotation_data()
        u = np.zeros((y.shape[0], 0))
        model = identify(u, y, SubspaceConfig(method=method, n_x=2, horizon=5))
        assert model.n_u == 0
        got = np.sort_complex(np.linalg.eigvals(model.A))
        want = np.sort_complex(np.linalg.eigvals(Ad))
        assert np.max(np.abs(got - want)) < 1e-8

    def test_forecast_matches_held_out(self):
        _, _, y = self.make_rotation_data(400)
        u = np.zeros((400, 0))
        model = identify(u[:300], y[:300], SubspaceConfig(method="n4sid", n_x=2, horizon=5))
        x0 = estimate_x0(model, u[300:310], y[300:310])
        y_hat = lssm_simulate(model, x0, u[300:])
        assert np.max(np.abs(y_hat - y[300:])) < 1e-6


class TestSimulate:
    def small_model(self, K=0.0, a=0.5):
        return Lssm(
            A=np.array([[a]]),
            B=np.array([[1.0]]),
            C=np.array([[2.0]]),
            K=np.array([[K]]),
            singular_values=np.array([1.0]),
        )

    def test_open_loop_hand_computed(self):
        model = self.small_model()
        y = lssm_simulate(model, np.array([1.0]), np.ones((4, 1)))
        # x: 1, 1.5, 1.75, 1.875 so y = 2x
        np.testing.assert_allclose(y[:, 0], [2.0, 3.0, 3.5, 3.75], atol=1e-14)

    def test_innovation_with_exact_measurements_matches_open_loop(self):
        model = self.small_model(K=0.3)
        u = np.ones((6, 1))
        y_open = lssm_simulate(model, np.array([1.0]), u)
        y_inno = lssm_simulate(model, np.array([1.0]), u, y=y_open, mode="innovation")
        np.testing.assert_allclose(y_inno, y_open, atol=1e-14)

    def test_innovation_corrects_wrong_initial_state(self):
        # near-deadbeat correction: A - KC = 0.9 - 0.88 while open loop decays at 0.9
        model = self.small_model(K=0.44, a=0.9)
        u = np.zeros((30, 1))
        y_true = lssm_simulate(model, np.array([2.0]), u)
        y_open = lssm_simulate(model, np.array([0.0]), u)
        y_inno = lssm_simulate(model, np.array([0.0]), u, y=y_true, mode="innovation")
        err_open = np.mean((y_open[5:] - y_true[5:]) ** 2)
        err_inno = np.mean((y_inno[5:] - y_true[5:]) ** 2)
        assert err_inno < err_open * 1e-3

    def test_divergence_raises(self):
        model = Lssm(
            A=np.array([[2.0]]),
            B=np.array([[0.0]]),
            C=np.array([[1.0]]),
            K=np.array([[0.0]]),
            singular_values=np.array([1.0]),
        )
        with pytest.raises(DivergenceError):
            lssm_simulate(model, np.array([1.0]), np.zeros((200, 1)))

    def test_mode_validation(self):
        model = self.small_model()
        with pytest.raises(ValueError):
            lssm_simulate(model, np.array([1.0]), np.zeros((3, 1)), mode="closed")
        with pytest.raises(ValueError):
            lssm_simulate(model, np.array([1.0]), np.zeros((3, 1)), mode="innovation")

    def test_roundtrip_dict(self):
        model = self.small_model(K=0.2)
        again = Lssm.from_dict(model.to_dict())
        np.testing.assert_array_equal(again.A, model.A)
        np.testing.assert_array_equal(again.K, model.K)


class TestInitialState:
    def test_recovers_known_x0(self):
        rng = np.random.default_rng(42)
        A, B, C = random_stable_system(3, 2, 2, rng)
        model = Lssm(A=A, B=B, C=C, K=np.zeros((3, 2)), singular_values=np.ones(3))
        x0 = np.array([0.3, -1.2, 0.7])
        u = rng.standard_normal((40, 2))
        y = lssm_simulate(model, x0, u)
        x0_hat = estimate_x0(model, u[:12], y[:12])
        assert np.max(np.abs(x0_hat - x0)) < 1e-8

    def test_too_few_rows(self):
        model = Lssm(
            A=np.eye(3),
            B=np.zeros((3, 1)),
            C=np.ones((1, 3)),
            K=np.zeros((3, 1)),
            singular_values=np.ones(3),
        )
        with pytest.raises(TooShortError):
            estimate_x0(model, np.zeros((2, 1)), np.zeros((2, 1)))


class TestInnovationGain:
    def test_scalar_riccati_matches_quadratic_root(self):
        a, c, q, r = 0.9, 1.0, 0.5, 0.2
        # fixed point of P = a^2 P + q - (a P c)^2 / (c^2 P + r) rearranges to
        # c^2 P^2 + (r - a^2 r - q c^2) P - q r = 0; take the positive root
        roots = np.roots([c**2, r - a**2 * r - q * c**2, -q * r])
        P_want = float(max(roots))
        P, K = solve_dare_fixed_point(
            np.array([[a]]),
            np.array([[c]]),
            np.array([[q]]),
            np.array([[r]]),
            np.array([[0.0]]),
        )
        assert abs(P[0, 0] - P_want) < 1e-8
        K_want = a * P_want * c / (c**2 * P_want + r)
        assert abs(K[0, 0] - K_want) < 1e-7

    def test_noise_free_data_gives_zero_gain(self):
        rng = np.random.default_rng(9)
        A, B, C = random_stable_system(2, 1, 2, rng)
        u = rng.standard_normal((300, 1))
        y = simulate_true(A, B, C, np.zeros(2), u)
        model = identify(u, y, SubspaceConfig(method="n4sid", n_x=2, horizon=5))
        assert np.max(np.abs(model.K)) < 1e-4

    def test_innovation_beats_open_loop_on_noisy_data(self):
        rng = np.random.default_rng(17)
        A, B, C = random_stable_system(2, 1, 1, rng, radius=0.9)
        u = rng.standard_normal((2000, 1))
        y = simulate_true(A, B, C, np.zeros(2), u, noise=(0.05, 0.05), rng=rng)
        model = identify(u, y, SubspaceConfig(method="n4sid", n_x=2, horizon=10))
        assert np.max(np.abs(model.K)) > 1e-3
        x0 = estimate_x0(model, u[:20], y[:20])
        y_open = lssm_simulate(model, x0, u)
        y_inno = lssm_simulate(model, x0, u, y=y, mode="innovation")
        mse_open = np.mean((y_open[20:] - y[20:]) ** 2)
        mse_inno = np.mean((y_inno[20:] - y[20:]) ** 2)
        assert mse_inno < mse_open

    def test_gain_stabilizes_predictor(self):
        rng = np.random.default_rng(17)
        A, B, C = random_stable_system(2, 1, 1, rng, radius=0.9)
        u = rng.standard_normal((2000, 1))
        y = simulate_true(A, B, C, np.zeros(2), u, noise=(0.05, 0.05), rng=rng)
        model = identify(u, y, SubspaceConfig(method="n4sid", n_x=2, horizon=10))
        eig_pred = np.abs(np.linalg.eigvals(model.A - model.K @ model.C))
        assert np.all(eig_pred < 1.0)
