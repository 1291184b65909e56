"""Multirate closed-loop experiment engine.

The plant and the IMM bank run at ``plant_hz``; the controller bank runs
every ``plant_hz / control_hz`` plant steps and its mixed joint input is held
in between.
"""

import logging
from concurrent.futures import Executor
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .config import ScenarioFile
from .constants import BLOWUP_LIMIT
from .control import ControllerBankState, controller_bank_step, initial_joint_input
from .errors import NumericalBlowup
from .estimation import imm_step, make_bank
from .model import (
    CableHealth,
    JointInput,
    PlatformState,
    RobotParams,
    cable_tensions,
    dynamics_rhs,
    elastic_energy,
    inject_failure,
    measurement,
    mode_for_surviving,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class NoiseStreams:
    """Independent process and measurement generators derived from one seed."""

    process: np.random.Generator
    measurement: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "NoiseStreams":
        process, measurement = np.random.SeedSequence(seed).spawn(2)
        return cls(
            np.random.Generator(np.random.PCG64(process)),
            np.random.Generator(np.random.PCG64(measurement)),
        )


@dataclass(frozen=True, eq=False)
class LogRecord:
    t: float
    state: PlatformState
    measurement: np.ndarray
    estimate: np.ndarray
    weights: np.ndarray
    dominant_mode: int
    true_mode: int
    q: JointInput
    tensions: np.ndarray
    error_norm: float
    flags: Tuple[str, ...] = ()
    controller_update: bool = False
    reference: Optional[np.ndarray] = None


def _noise_factor(covariance: np.ndarray) -> np.ndarray:
    """Matrix ``L`` with ``L L' = covariance`` for a PSD covariance."""
    values, vectors = np.linalg.eigh(np.asarray(covariance, dtype=float))
    return vectors * np.sqrt(np.clip(values, 0.0, None))


def plant_step(
    params: RobotParams,
    state: PlatformState,
    q: JointInput,
    health: CableHealth,
    Q: np.ndarray,
    dt: float,
    rng: np.random.Generator,
) -> PlatformState:
    """Euler-Maruyama step ``x + f(x, q) dt + w sqrt(dt)`` with ``w ~ N(0, Q)``.

    Six standard normals are drawn every call, whatever ``Q`` is.
    """
    x = state.as_vector()
    noise = _noise_factor(Q) @ rng.standard_normal(6)
    x_next = x + dynamics_rhs(params, state, q, health) * dt + noise * np.sqrt(dt)
    if not np.all(np.isfinite(x_next)) or np.max(np.abs(x_next)) > BLOWUP_LIMIT:
        raise NumericalBlowup(f"plant state left the finite range: {x_next}")
    return PlatformState.from_vector(x_next)


def measure(state: PlatformState, R: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Noisy pose ``h(x) + v`` with ``v ~ N(0, R)``."""
    return measurement(state) + _noise_factor(R) @ rng.standard_normal(3)


def true_mode_of(health: CableHealth) -> int:
    """Working-mode id of the cables still above half stiffness; 0 if unmodeled."""
    mode = mode_for_surviving(health.surviving())
    return mode.id if mode is not None else 0


def mechanical_energy(
    params: RobotParams, state: PlatformState, q: JointInput, health: CableHealth
) -> float:
    kinetic = 0.5 * float(state.velocity @ (params.inertia_diagonal * state.velocity))
    return kinetic + elastic_energy(params, state.pose, q, health)


def run_scenario(
    scenario: ScenarioFile, executor: Optional[Executor] = None
) -> List[LogRecord]:
    """Simulate a scenario and return one record per plant step."""
    params = scenario.robot.to_params()
    run = scenario.run
    dt = 1.0 / run.plant_hz
    dt_control = 1.0 / run.control_hz
    steps = run.steps
    ticks = -(-steps // run.ratio) + 1
    reference = scenario.trajectory.build(ticks, dt_control)

    pose0 = np.array(scenario.robot.initial_pose or reference[0], dtype=float)
    q = initial_joint_input(params, pose0, scenario.robot.initial_sliders)
    state = PlatformState(pose0)
    health = CableHealth.healthy(f.to_event() for f in scenario.failures)
    controllers = ControllerBankState.start(q, pose0)
    gains = scenario.gains.to_gains()

    imm = scenario.imm
    bank = make_bank(
        pose0,
        process_std=imm.filter_process_std or scenario.noise.process_std,
        measurement_std=imm.filter_measurement_std or scenario.noise.measurement_std,
        initial_covariance=imm.initial_covariance,
        transition=imm.transition_matrix(),
        weight_floor=imm.weight_floor,
    )
    weights = bank.weights
    Q = np.diag(np.square(scenario.noise.process_std))
    R = np.diag(np.square(scenario.noise.measurement_std))
    streams = NoiseStreams.from_seed(run.seed)
    x_ref = reference[0]

    logger.info(
        f"running {steps} plant steps at {run.plant_hz} Hz, controller every {run.ratio}"
    )
    records: List[LogRecord] = []
    for k in range(steps):
        t_start = k * dt
        flags: List[str] = []
        controller_update = k % run.ratio == 0
        if controller_update:
            tick = controller_bank_step(
                params,
                controllers,
                weights,
                reference,
                gains,
                dt_control,
                t_start,
                run.recovery_tolerance,
                run.stall_time,
                executor,
            )
            controllers, q, x_ref = tick.state, tick.q, tick.x_ref
            flags.extend(tick.flags)
        elif controllers.cursor.holding:
            flags.append("recovery_hold")

        health = inject_failure(health, t_start)
        state = plant_step(params, state, q, health, Q, dt, streams.process)
        y = measure(state, R, streams.measurement)
        bank, output = imm_step(params, bank, q, y, dt, executor)
        weights = output.weights
        flags.extend(output.flags)

        records.append(
            LogRecord(
                t=(k + 1) / run.plant_hz,
                state=state,
                measurement=y,
                estimate=output.x_combined[:3].copy(),
                weights=weights,
                dominant_mode=output.dominant_mode.id,
                true_mode=true_mode_of(health),
                q=q,
                tensions=cable_tensions(params, state.pose, q.sliders, q.spools, health),
                error_norm=float(np.linalg.norm(x_ref[:2] - state.pose[:2])),
                flags=tuple(flags),
                controller_update=controller_update,
                reference=np.asarray(x_ref, dtype=float),
            )
        )
    return records
