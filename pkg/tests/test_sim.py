"""Tests for the plant integrator and the closed-loop engine."""

from pathlib import Path

import numpy as np
import pytest

from cdpr_sim.config import parse_scenario, validate_scenario
from cdpr_sim.control import initial_joint_input
from cdpr_sim.errors import NumericalBlowup
from cdpr_sim.model import (
    CableHealth,
    JointInput,
    PlatformState,
    RobotParams,
    mode_by_id,
    static_wrench,
)
from cdpr_sim.sim import (
    NoiseStreams,
    mechanical_energy,
    measure,
    plant_step,
    run_scenario,
    true_mode_of,
)

CENTER = np.array([1.0, 0.75, 0.0])
DT = 0.01
ZERO_Q = np.zeros((6, 6))


@pytest.fixture
def params():
    return RobotParams.default()


def _stationary_scenario(**run):
    return validate_scenario(
        {
            "trajectory": {"kind": "line", "start": [1.0, 0.75], "end": [1.0, 0.75]},
            "run": {"duration": 1.0, **run},
        }
    )


class TestNoiseStreams:
    def test_same_seed_same_draws(self):
        a, b = NoiseStreams.from_seed(7), NoiseStreams.from_seed(7)
        np.testing.assert_array_equal(
            a.process.standard_normal(5), b.process.standard_normal(5)
        )
        np.testing.assert_array_equal(
            a.measurement.standard_normal(5), b.measurement.standard_normal(5)
        )

    def test_streams_are_independent(self):
        streams = NoiseStreams.from_seed(7)
        assert not np.array_equal(
            streams.process.standard_normal(5), streams.measurement.standard_normal(5)
        )


class TestPlantStep:
    def test_equilibrium_without_noise_is_fixed(self, params):
        q = initial_joint_input(params, CENTER)
        state = PlatformState(CENTER)
        rng = np.random.default_rng(0)
        for _ in range(10):
            state = plant_step(params, state, q, CableHealth.healthy(), ZERO_Q, DT, rng)
        np.testing.assert_allclose(state.pose, CENTER, atol=1e-9)
        np.testing.assert_allclose(state.velocity, 0.0, atol=1e-9)

    def test_zero_noise_still_consumes_draws(self, params):
        q = initial_joint_input(params, CENTER)
        rng, reference = np.random.default_rng(3), np.random.default_rng(3)
        plant_step(params, PlatformState(CENTER), q, CableHealth.healthy(), ZERO_Q, DT, rng)
        reference.standard_normal(6)
        assert rng.standard_normal() == reference.standard_normal()

    def test_free_platform_is_damped(self, params):
        q = JointInput(np.array([0.5, 1.5, 0.5, 1.5]), np.zeros(4))
        state = PlatformState(CENTER, velocity=[0.1, -0.2, 0.3])
        health = CableHealth(np.zeros(4))
        nxt = plant_step(params, state, q, health, ZERO_Q, DT, np.random.default_rng(0))
        np.testing.assert_allclose(nxt.pose, CENTER + DT * state.velocity)
        expected = state.velocity * (1.0 - DT * params.damping / params.inertia_diagonal)
        np.testing.assert_allclose(nxt.velocity, expected)

    def test_blowup_is_reported(self, params):
        q = JointInput(np.array([0.5, 1.5, 0.5, 1.5]), np.zeros(4))
        state = PlatformState(CENTER, velocity=[1e9, 0.0, 0.0])
        with pytest.raises(NumericalBlowup):
            plant_step(
                params, state, q, CableHealth(np.zeros(4)), ZERO_Q, DT, np.random.default_rng(0)
            )

    def test_noise_statistics(self, params):
        # free platform with zero velocity: the step is pure noise
        q = JointInput(np.array([0.5, 1.5, 0.5, 1.5]), np.zeros(4))
        health = CableHealth(np.zeros(4))
        Q = np.diag([0.0, 0.0, 0.0, 1.0, 1.0, 1.0])
        rng = np.random.default_rng(11)
        n = 2000
        draws = np.array(
            [
                plant_step(params, PlatformState(CENTER), q, health, Q, DT, rng).velocity
                for _ in range(n)
            ]
        )
        sigma = np.sqrt(DT)
        assert np.all(np.abs(draws.mean(axis=0)) < 4.0 * sigma / np.sqrt(n))
        np.testing.assert_allclose(draws.std(axis=0), sigma, rtol=0.1)


class TestMeasure:
    def test_noiseless_measurement_is_the_pose(self):
        state = PlatformState(CENTER)
        y = measure(state, np.zeros((3, 3)), np.random.default_rng(0))
        np.testing.assert_array_equal(y, CENTER)

    def test_measurement_mean(self):
        state = PlatformState(CENTER)
        R = np.diag([1e-4, 1e-4, 1e-4])
        rng = np.random.default_rng(5)
        n = 20000
        ys = np.array([measure(state, R, rng) for _ in range(n)])
        assert np.all(np.abs(ys.mean(axis=0) - CENTER) < 4.0 * 1e-2 / np.sqrt(n))

    def test_pose_comes_from_the_measurement_function(self, monkeypatch):
        monkeypatch.setattr("cdpr_sim.sim.measurement", lambda state: np.array([1.0, 2.0, 3.0]))
        y = measure(PlatformState(CENTER), np.zeros((3, 3)), np.random.default_rng(0))
        np.testing.assert_array_equal(y, [1.0, 2.0, 3.0])


@pytest.mark.parametrize(
    "multipliers, expected",
    [
        ([1, 1, 1, 1], 1),
        ([0, 1, 1, 1], 2),
        ([1, 1, 1, 0], 5),
        ([0, 0, 1, 1], 6),
        ([1, 1, 0, 0], 7),
        ([1, 0, 1, 0], 0),
        ([0.6, 1, 1, 1], 1),
    ],
)
def test_true_mode_of(multipliers, expected):
    """Cables below half stiffness count as failed; unmodeled sets map to 0."""
    assert true_mode_of(CableHealth(np.array(multipliers, dtype=float))) == expected


class TestPhysics:
    def test_energy_decays_and_platform_settles(self, params):
        q = initial_joint_input(params, CENTER)
        health = CableHealth.healthy()
        state = PlatformState(CENTER + [0.005, -0.003, 0.01])
        rng = np.random.default_rng(0)
        energies = [mechanical_energy(params, state, q, health)]
        for k in range(1, 401):
            state = plant_step(params, state, q, health, ZERO_Q, DT, rng)
            if k in (25, 50, 100, 200, 400):
                energies.append(mechanical_energy(params, state, q, health))
        assert all(b <= a + 1e-12 for a, b in zip(energies, energies[1:]))
        assert np.linalg.norm(static_wrench(params, state.pose, q, health)) <= 1e-6

    def test_failed_cable_breaks_equilibrium(self, params):
        q = initial_joint_input(params, CENTER)
        state = plant_step(
            params, PlatformState(CENTER), q, mode_by_id(2).health(), ZERO_Q, DT,
            np.random.default_rng(0),
        )
        assert np.linalg.norm(state.velocity) > 0.05


class TestRunScenario:
    def test_rate_contract(self):
        records = run_scenario(_stationary_scenario())
        assert len(records) == 100
        assert [r.controller_update for r in records] == [k % 10 == 0 for k in range(100)]
        assert records[0].t == pytest.approx(0.01)
        assert records[-1].t == pytest.approx(1.0)

    def test_invariants_hold_every_step(self):
        for record in run_scenario(_stationary_scenario()):
            assert record.weights.sum() == pytest.approx(1.0, abs=1e-12)
            assert record.weights.min() >= 1e-6 - 1e-15
            assert record.true_mode == 1
            assert np.all(record.tensions >= 0.0)

    def test_same_seed_is_reproducible(self):
        first = run_scenario(_stationary_scenario(seed=42))
        second = run_scenario(_stationary_scenario(seed=42))
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a.state.as_vector(), b.state.as_vector())
            np.testing.assert_array_equal(a.weights, b.weights)

    def test_seed_changes_the_noise(self):
        first = run_scenario(_stationary_scenario(seed=1, duration=0.1))
        second = run_scenario(_stationary_scenario(seed=2, duration=0.1))
        assert not np.array_equal(first[-1].measurement, second[-1].measurement)

    def test_noiseless_regulation(self):
        scenario = validate_scenario(
            {
                "trajectory": {"kind": "line", "start": [1.0, 0.75], "end": [1.0, 0.75]},
                "noise": {"process_std": [0.0] * 6, "measurement_std": [0.0] * 3},
                "imm": {
                    "transition": np.eye(7).tolist(),
                    "filter_process_std": [1e-3] * 6,
                    "filter_measurement_std": [1e-3] * 3,
                },
                "run": {"duration": 2.0},
            }
        )
        records = run_scenario(scenario)
        assert records[-1].error_norm < 1e-4
        assert records[-1].dominant_mode == 1

    def test_error_decays_after_a_straight_line(self):
        scenario = validate_scenario(
            {
                "trajectory": {
                    "kind": "line", "start": [1.0, 0.75], "end": [1.05, 0.75], "speed": 0.05,
                },
                "noise": {"process_std": [0.0] * 6, "measurement_std": [0.0] * 3},
                "imm": {
                    "transition": np.eye(7).tolist(),
                    "filter_process_std": [1e-3] * 6,
                    "filter_measurement_std": [1e-3] * 3,
                },
                "run": {"duration": 2.5},
            }
        )
        errors = [
            r.error_norm
            for r in run_scenario(scenario)
            if r.controller_update and r.t >= 1.2
        ]
        assert len(errors) >= 10
        assert all(b <= a + 1e-6 for a, b in zip(errors, errors[1:]))
        assert errors[-1] < 1e-3

    def test_failure_changes_true_mode(self):
        scenario = validate_scenario(
            {
                "trajectory": {"kind": "line", "start": [1.0, 0.75], "end": [1.0, 0.75]},
                "failures": [{"cable": "A", "time": 0.3, "ramp": 0.1}],
                "run": {"duration": 0.6},
            }
        )
        modes = [r.true_mode for r in run_scenario(scenario)]
        assert modes[0] == 1
        assert modes[-1] == 2
        assert sorted(set(modes)) == [1, 2]


@pytest.mark.slow
def test_healthy_scenario_runs_to_completion():
    """The bundled no-failure scenario runs its full 20 s."""
    path = Path(__file__).resolve().parent.parent / "scenarios" / "healthy.json"
    records = run_scenario(parse_scenario(path))
    assert len(records) == 2000
    assert {r.true_mode for r in records} == {1}
    assert all(abs(r.weights.sum() - 1.0) <= 1e-12 for r in records)
