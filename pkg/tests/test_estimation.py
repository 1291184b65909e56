"""Tests for the EKF bank and IMM algebra."""

import logging

import numpy as np
import pytest

from cdpr_sim.control import initial_joint_input
from cdpr_sim.errors import NumericalDegeneracy, SingularInnovation
from cdpr_sim.estimation import (
    ImmBank,
    ModeFilter,
    apply_weight_floor,
    default_transition_matrix,
    ekf_propagate,
    ekf_update,
    gaussian_likelihood,
    imm_combine,
    imm_mix,
    imm_step,
    imm_weight_update,
    initial_weights,
    linearize,
    make_bank,
)
from cdpr_sim.model import RobotParams, measurement_residual, mode_by_id, state_derivative

EPS = 1e-6


@pytest.fixture
def params():
    return RobotParams.default()


def _filter(mode_id, x, P):
    return ModeFilter(
        mode=mode_by_id(mode_id),
        x=np.asarray(x, dtype=float),
        P=np.asarray(P, dtype=float),
        Q=np.zeros((6, 6)),
        R=np.eye(3),
    )


def _two_filter_bank(means, weights, transition, P=None):
    P = np.eye(6) if P is None else P
    filters = tuple(
        _filter(j + 1, np.r_[m, np.zeros(5)], P) for j, m in enumerate(means)
    )
    return ImmBank(filters, np.asarray(weights, float), np.asarray(transition, float), 0.0)


def _random_bank(seed):
    rng = np.random.default_rng(seed)
    filters = []
    for j in range(7):
        A = rng.standard_normal((6, 6))
        x = rng.standard_normal(6)
        x[2] *= 0.3
        filters.append(_filter(j + 1, x, A @ A.T + np.eye(6)))
    weights = rng.random(7) + 0.01
    transition = rng.random((7, 7)) + 0.01
    return ImmBank(
        tuple(filters),
        weights / weights.sum(),
        transition / transition.sum(axis=1, keepdims=True),
        EPS,
    )


class TestLinearize:
    def test_measurement_jacobian_selects_pose(self, params):
        x = np.array([1.0, 0.7, 0.05, 0.1, -0.1, 0.2])
        q = initial_joint_input(params, [x[0], x[1], 0.0])
        _, H = linearize(params, mode_by_id(1), x, q)
        np.testing.assert_array_equal(H @ x, x[:3])

    def test_kinematic_block_structure(self, params):
        x = np.array([1.0, 0.7, 0.05, 0.1, -0.1, 0.2])
        q = initial_joint_input(params, [x[0], x[1], 0.0])
        F, _ = linearize(params, mode_by_id(1), x, q)
        np.testing.assert_allclose(F[:3, 3:], np.eye(3), atol=1e-8)
        np.testing.assert_array_equal(F[:3, :3], np.zeros((3, 3)))

    @pytest.mark.parametrize("mode_id", [1, 2, 6])
    def test_directional_difference_oracle(self, params, mode_id):
        x = np.array([0.9, 0.8, 0.02, 0.05, -0.03, 0.1])
        q = initial_joint_input(params, [x[0], x[1], 0.0])
        mode = mode_by_id(mode_id)
        F, _ = linearize(params, mode, x, q)
        rng = np.random.default_rng(mode_id)
        for _ in range(3):
            delta = rng.standard_normal(6)
            delta *= 1e-5 / np.linalg.norm(delta)
            actual = state_derivative(
                params, x + delta, q.sliders, q.spools, mode.mask
            ) - state_derivative(params, x, q.sliders, q.spools, mode.mask)
            error = np.linalg.norm(F @ delta - actual) / np.linalg.norm(actual)
            assert error <= 1e-4


class TestPropagate:
    def test_static_propagation_adds_process_noise(self):
        P0 = np.diag([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
        Q = 0.1 * np.eye(6)
        x, P = ekf_propagate(np.ones(6), P0, np.zeros(6), np.zeros((6, 6)), Q, 0.01)
        np.testing.assert_array_equal(x, np.ones(6))
        np.testing.assert_allclose(P, P0 + Q)

    def test_scalar_decay(self):
        x, P = ekf_propagate(
            np.array([1.0]), np.array([[2.0]]), np.array([-1.0]), np.array([[-1.0]]),
            np.array([[0.1]]), 0.1,
        )
        assert x[0] == pytest.approx(0.9)
        assert P[0, 0] == pytest.approx(0.81 * 2.0 + 0.1)

    def test_rejects_non_positive_step(self):
        with pytest.raises(ValueError):
            ekf_propagate(np.zeros(1), np.eye(1), np.zeros(1), np.zeros((1, 1)), np.eye(1), 0.0)


class TestUpdate:
    def test_zero_innovation_keeps_mean(self):
        H = np.hstack([np.eye(3), np.zeros((3, 3))])
        x_prior = np.arange(6.0)
        x, P, innovation, _ = ekf_update(x_prior, np.eye(6), x_prior[:3], H, np.eye(3))
        np.testing.assert_allclose(x, x_prior)
        np.testing.assert_array_equal(innovation, np.zeros(3))

    def test_scalar_gain(self):
        x, P, innovation, E = ekf_update(
            np.array([1.0]), np.array([[1.0]]), np.array([3.0]), np.eye(1), np.eye(1)
        )
        assert x[0] == pytest.approx(2.0)
        assert P[0, 0] == pytest.approx(0.5)
        assert E[0, 0] == pytest.approx(2.0)

    def test_uninformative_measurement(self):
        H = np.hstack([np.eye(3), np.zeros((3, 3))])
        x_prior = np.ones(6)
        P_prior = 0.01 * np.eye(6)
        x, P, _, _ = ekf_update(x_prior, P_prior, np.zeros(3), H, 1e12 * np.eye(3))
        np.testing.assert_allclose(x, x_prior, atol=1e-6)
        np.testing.assert_allclose(P, P_prior, atol=1e-6)

    def test_heading_residual_is_wrapped(self):
        H = np.hstack([np.eye(3), np.zeros((3, 3))])
        x_prior = np.array([1.0, 0.7, np.pi - 0.001, 0.0, 0.0, 0.0])
        y = np.array([1.0, 0.7, -np.pi + 0.001])
        x, _, innovation, _ = ekf_update(
            x_prior, 1e-4 * np.eye(6), y, H, 1e-4 * np.eye(3), residual=measurement_residual
        )
        assert innovation[2] == pytest.approx(0.002, abs=1e-9)
        assert x[2] == pytest.approx(np.pi, abs=1e-6)

    def test_singular_innovation(self):
        H = np.hstack([np.eye(3), np.zeros((3, 3))])
        with pytest.raises(SingularInnovation):
            ekf_update(np.zeros(6), np.zeros((6, 6)), np.zeros(3), H, np.zeros((3, 3)))


class TestLikelihood:
    def test_standard_normal_peak(self):
        assert gaussian_likelihood(np.zeros(1), np.eye(1)) == pytest.approx(0.398942, abs=1e-6)

    def test_one_sigma(self):
        assert gaussian_likelihood(np.ones(1), np.eye(1)) == pytest.approx(0.241971, abs=1e-6)

    def test_three_dimensional_peak(self):
        assert gaussian_likelihood(np.zeros(3), np.eye(3)) == pytest.approx(0.063494, abs=1e-6)

    def test_singular_covariance(self):
        with pytest.raises(SingularInnovation):
            gaussian_likelihood(np.zeros(2), np.zeros((2, 2)))


class TestWeightUpdate:
    def test_equal_likelihoods_leave_weights(self):
        weights = np.array([0.4, 0.3, 0.1, 0.1, 0.05, 0.03, 0.02])
        updated = imm_weight_update(weights, np.full(7, 0.7), EPS)
        np.testing.assert_allclose(updated, weights, atol=1e-12)

    def test_two_mode_arithmetic(self):
        updated = imm_weight_update(np.array([0.2, 0.8]), np.array([0.4, 0.1]), EPS)
        np.testing.assert_allclose(updated, [0.5, 0.5], atol=1e-12)

    def test_absorbing_update_is_floored(self):
        weights = np.array([0.5, 0.5, 0, 0, 0, 0, 0])
        likelihoods = np.array([1.0, 0, 0, 0, 0, 0, 0])
        updated = imm_weight_update(weights, likelihoods, EPS)
        np.testing.assert_allclose(updated, [1 - 6 * EPS] + [EPS] * 6, atol=1e-15)

    def test_all_zero_likelihood_resets_to_uniform(self, caplog):
        with caplog.at_level(logging.WARNING):
            updated = imm_weight_update(initial_weights(7), np.zeros(7), EPS)
        np.testing.assert_allclose(updated, np.full(7, 1 / 7))
        assert "zero likelihood" in caplog.text

    def test_floor_projection_keeps_sum(self):
        floored = apply_weight_floor(np.array([0.9999, 1e-7, 2e-7, 0.0, 1e-4, 0.0, 0.0]), EPS)
        assert floored.sum() == pytest.approx(1.0, abs=1e-12)
        assert floored.min() >= EPS - 1e-18


def _headings_across_pi():
    x1 = np.array([0.0, 0.0, np.pi - 0.01, 0.0, 0.0, 0.0])
    x2 = np.array([0.0, 0.0, -np.pi + 0.01, 0.0, 0.0, 0.0])
    filters = (_filter(1, x1, np.eye(6)), _filter(2, x2, np.eye(6)))
    return ImmBank(filters, np.array([0.5, 0.5]), np.full((2, 2), 0.5), 0.0)


class TestMix:
    def test_identity_transition_does_not_mix(self):
        bank = _random_bank(0)
        bank = ImmBank(bank.filters, bank.weights, np.eye(7), EPS)
        mixed_xs, mixed_Ps, _ = imm_mix(bank)
        for j, f in enumerate(bank.filters):
            np.testing.assert_allclose(mixed_xs[j], f.x, atol=1e-12)
            np.testing.assert_allclose(mixed_Ps[j], f.P, atol=1e-12)

    def test_two_mode_spread(self):
        bank = _two_filter_bank([0.0, 1.0], [0.5, 0.5], [[0.5, 0.5], [0.5, 0.5]])
        mixed_xs, mixed_Ps, predicted = imm_mix(bank)
        np.testing.assert_allclose(mixed_xs[:, 0], [0.5, 0.5], atol=1e-12)
        np.testing.assert_allclose(mixed_Ps[:, 0, 0], [1.25, 1.25], atol=1e-12)
        np.testing.assert_allclose(predicted, [0.5, 0.5], atol=1e-12)

    def test_conservation(self):
        for seed in range(5):
            bank = _random_bank(seed)
            mixed_xs, _, predicted = imm_mix(bank)
            expected = bank.weights @ np.stack([f.x for f in bank.filters])
            np.testing.assert_allclose(predicted @ mixed_xs, expected, atol=1e-10)

    def test_headings_either_side_of_pi_average_to_pi(self):
        mixed_xs, mixed_Ps, _ = imm_mix(_headings_across_pi())
        np.testing.assert_allclose(np.cos(mixed_xs[:, 2]), -1.0, atol=1e-9)
        np.testing.assert_allclose(mixed_Ps[:, 2, 2], 1.0 + 1e-4, atol=1e-9)

    def test_underflow_raises(self):
        bank = _two_filter_bank([0.0, 1.0], [1.0, 0.0], np.eye(2))
        with pytest.raises(NumericalDegeneracy):
            imm_mix(bank)


class TestCombine:
    def test_single_mode_weight(self):
        bank = _random_bank(1)
        weights = np.zeros(7)
        weights[3] = 1.0
        out = imm_combine(ImmBank(bank.filters, weights, bank.transition, 0.0))
        np.testing.assert_array_equal(out.x_combined, bank.filters[3].x)
        np.testing.assert_allclose(out.P_combined, bank.filters[3].P, atol=1e-12)
        assert out.dominant_mode.id == 4

    def test_two_filter_spread(self):
        bank = _two_filter_bank([0.0, 2.0], [0.5, 0.5], np.eye(2))
        out = imm_combine(bank)
        assert out.x_combined[0] == pytest.approx(1.0)
        assert out.P_combined[0, 0] == pytest.approx(2.0)

    def test_headings_either_side_of_pi(self):
        out = imm_combine(_headings_across_pi())
        assert abs(out.x_combined[2]) == pytest.approx(np.pi, abs=1e-9)
        assert out.P_combined[2, 2] == pytest.approx(1.0 + 1e-4, abs=1e-9)

    def test_ties_go_to_lowest_mode(self):
        bank = _two_filter_bank([0.0, 2.0], [0.5, 0.5], np.eye(2))
        assert imm_combine(bank).dominant_mode.id == 1

    def test_permutation_equivariance(self):
        bank = _random_bank(2)
        order = np.array([3, 0, 6, 1, 5, 2, 4])
        permuted = ImmBank(
            tuple(bank.filters[i] for i in order),
            bank.weights[order],
            bank.transition[np.ix_(order, order)],
            EPS,
        )
        mixed_xs, _, _ = imm_mix(bank)
        permuted_xs, _, _ = imm_mix(permuted)
        np.testing.assert_allclose(permuted_xs, mixed_xs[order], atol=1e-12)
        np.testing.assert_allclose(
            imm_combine(permuted).x_combined, imm_combine(bank).x_combined, atol=1e-12
        )


class TestTransitionMatrix:
    def test_rows_are_stochastic_and_never_zero(self):
        transition = default_transition_matrix()
        np.testing.assert_allclose(transition.sum(axis=1), 1.0, atol=1e-12)
        assert transition.min() > 0.0

    def test_structure(self):
        transition = default_transition_matrix()
        assert transition[0, 0] == pytest.approx(0.998, abs=1e-5)
        assert transition[0, 1] == pytest.approx(0.0005, abs=1e-7)
        assert transition[1, 5] == pytest.approx(0.002, abs=1e-7)
        assert transition[3, 6] == pytest.approx(0.002, abs=1e-7)
        assert transition[1, 6] == pytest.approx(1e-6, rel=1e-3)


class TestImmStep:
    @pytest.fixture
    def setup(self, params):
        pose = np.array([1.0, 0.75, 0.0])
        q = initial_joint_input(params, pose)
        return pose, q, make_bank(pose)

    def test_invariants_hold_every_step(self, params, setup):
        pose, q, bank = setup
        rng = np.random.default_rng(7)
        for _ in range(30):
            y = pose + rng.normal(0.0, [0.002, 0.002, 0.005])
            bank, out = imm_step(params, bank, q, y, 0.01)
            assert bank.weights.sum() == pytest.approx(1.0, abs=1e-12)
            assert bank.weights.min() >= bank.weight_floor - 1e-15
            for f in bank.filters:
                np.testing.assert_array_equal(f.P, f.P.T)
                assert np.linalg.eigvalsh(f.P).min() >= -1e-9

    def test_healthy_plant_keeps_mode_one(self, params, setup):
        pose, q, bank = setup
        for _ in range(100):
            bank, out = imm_step(params, bank, q, pose, 0.01)
        assert out.dominant_mode.id == 1
        assert out.weights[0] > 0.9
        np.testing.assert_allclose(out.x_combined[:3], pose, atol=1e-3)

    def test_executor_does_not_change_result(self, params, setup):
        from concurrent.futures import ThreadPoolExecutor

        pose, q, bank = setup
        y = pose + np.array([0.001, -0.002, 0.003])
        _, sequential = imm_step(params, bank, q, y, 0.01)
        with ThreadPoolExecutor(max_workers=4) as pool:
            _, parallel = imm_step(params, bank, q, y, 0.01, executor=pool)
        np.testing.assert_array_equal(parallel.weights, sequential.weights)
        np.testing.assert_array_equal(parallel.x_combined, sequential.x_combined)

    def test_singular_mode_gets_zero_likelihood(self, params, setup):
        pose, q, bank = setup
        broken = tuple(
            ModeFilter(f.mode, f.x, f.P, f.Q, np.full((3, 3), np.nan)) if f.mode.id == 4 else f
            for f in bank.filters
        )
        bank = ImmBank(broken, bank.weights, bank.transition, bank.weight_floor)
        bank, out = imm_step(params, bank, q, pose, 0.01)
        assert "singular_mode4" in out.flags
        assert out.weights[3] == pytest.approx(bank.weight_floor)
