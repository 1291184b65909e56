"""Bank of per-mode kinematic tracking controllers mixed by the IMM weights.

Each working mode gets its own controller: forward kinematics of the last
mixed command, a PD step toward the reference, a slider search for the best
conditioned pulling map, inverse kinematics and a minimum-tension
distribution. Modes left with two cables on one rail park instead of
tracking. The seven candidate joint inputs are averaged with the mode
probabilities.
"""

import itertools
import logging
from concurrent.futures import Executor
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import null_space

from .constants import (
    DEFAULT_GAIN_D,
    DEFAULT_GAIN_P,
    DEFAULT_INITIAL_SLIDERS,
    DEFAULT_RECOVERY_TOLERANCE,
    DEFAULT_STALL_TIME,
    SLIDER_GRID_POINTS,
    SLIDER_POLL_MAX_ITER,
    SLIDER_POLL_STEP,
    SLIDER_REFINEMENTS,
)
from .errors import (
    DegenerateCable,
    Infeasible,
    NoConvergence,
    NoFeasibleSliders,
    RecoveryStall,
)
from .model import (
    WORKING_MODES,
    JointInput,
    MotionModel,
    RobotParams,
    WorkingMode,
    forward_kinematics,
    inverse_kinematics,
    mode_by_id,
    pulling_map,
)

logger = logging.getLogger(__name__)

# Smallest kappa gain that moves the slider search
_KAPPA_IMPROVEMENT = 1e-12


@dataclass(frozen=True, eq=False)
class Gains:
    """Per-DOF proportional and derivative gains."""

    g_p: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_GAIN_P))
    g_d: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_GAIN_D))

    def __post_init__(self):
        for name in ("g_p", "g_d"):
            value = np.array(getattr(self, name), dtype=float).reshape(3)
            if np.any(value < 0.0):
                raise ValueError(f"{name} entries must be non-negative")
            object.__setattr__(self, name, value)


@dataclass(frozen=True, eq=False)
class TrackingState:
    e_prev: np.ndarray = field(default_factory=lambda: np.zeros(3))


@dataclass(frozen=True)
class ReferenceCursor:
    """Position along the reference, shared by every mode's controller.

    While ``holding`` the index stays at ``anchor``, the sample active when
    the dominant mode last changed.
    """

    index: int = 0
    holding: bool = False
    anchor: Optional[int] = None
    hold_start: Optional[float] = None


@dataclass(frozen=True, eq=False)
class ControllerBankState:
    tracking: Tuple[TrackingState, ...]
    cursor: ReferenceCursor
    q_mixed: JointInput
    x_command: np.ndarray
    dominant_mode: int = 1

    @classmethod
    def start(cls, q: JointInput, pose: np.ndarray) -> "ControllerBankState":
        return cls(
            tracking=tuple(TrackingState() for _ in WORKING_MODES),
            cursor=ReferenceCursor(),
            q_mixed=q,
            x_command=np.array(pose, dtype=float),
        )


@dataclass(frozen=True, eq=False)
class ModeCommand:
    """Candidate joint input from one mode's controller."""

    mode: WorkingMode
    q: JointInput
    tracking: TrackingState
    x_next: np.ndarray
    x_fk: np.ndarray
    flags: Tuple[str, ...] = ()


@dataclass(frozen=True, eq=False)
class BankTick:
    state: ControllerBankState
    q: JointInput
    x_ref: np.ndarray
    error_norm: float
    flags: Tuple[str, ...] = ()


def pd_step(
    x_ref: np.ndarray,
    x_fk: np.ndarray,
    tracking: TrackingState,
    gains: Gains,
    dt: float,
) -> Tuple[np.ndarray, TrackingState]:
    """Next commanded pose ``x_fk + g_p e_p + g_d e_d``."""
    if dt <= 0.0:
        raise ValueError(f"controller period must be positive, got {dt}")
    e_p = np.asarray(x_ref, dtype=float) - np.asarray(x_fk, dtype=float)
    e_d = (e_p - tracking.e_prev) / dt
    x_next = np.asarray(x_fk, dtype=float) + gains.g_p * e_p + gains.g_d * e_d
    return x_next, TrackingState(e_prev=e_p)


def _oriented(basis: np.ndarray) -> Optional[np.ndarray]:
    """The single basis vector flipped positive, or None if its signs are mixed."""
    z = basis[:, 0]
    if z[np.argmax(np.abs(z))] < 0.0:
        z = -z
    if np.any(z <= 0.0):
        return None
    return z


def manipulability_kappa(P: np.ndarray) -> float:
    """Conditioning of the pulling map from its null vector, in [0, 1]."""
    P = np.atleast_2d(np.asarray(P, dtype=float))
    basis = null_space(P)
    if basis.shape[1] != 1:
        singular_values = np.linalg.svd(P, compute_uv=False)
        if singular_values.size == 0 or singular_values[0] <= 0.0:
            return 0.0
        return float(singular_values[-1] / singular_values[0])
    z = _oriented(basis)
    if z is None:
        return 0.0
    return float(z.min() / z.max())


def _mode_kappa(params, pose, sliders, mode):
    try:
        P = pulling_map(params, pose, sliders, mode)
    except DegenerateCable:
        return 0.0
    return manipulability_kappa(P[list(mode.controlled_rows)])


def poll_offsets(n: int) -> np.ndarray:
    """Every non-zero vector in {-1, 0, 1}^n, in lexicographic order."""
    offsets = np.array(list(itertools.product((-1.0, 0.0, 1.0), repeat=n)))
    return offsets[np.any(offsets != 0.0, axis=1)]


def search_sliders(
    params: RobotParams,
    pose: np.ndarray,
    mode: WorkingMode,
    start: np.ndarray,
    grid_points: int = SLIDER_GRID_POINTS,
    refinements: int = SLIDER_REFINEMENTS,
    poll_step: float = SLIDER_POLL_STEP,
    poll_iterations: int = SLIDER_POLL_MAX_ITER,
) -> Tuple[np.ndarray, float]:
    """Pattern search for the sliders maximizing kappa at ``pose``.

    Surviving sliders are visited in A, B, C, D order over an evenly spaced
    grid of their rail, then the step is halved ``refinements`` times with a
    +/- trial around the incumbent. A final poll moves to any improving
    neighbor ``poll_step`` away (every combination of -1, 0, +1 per surviving
    slider) until none improves. Failed sliders stay at ``start``.
    """
    lo, hi = params.rail_intervals[:, 0], params.rail_intervals[:, 1]
    free = list(mode.surviving)
    best = params.clip_sliders(np.asarray(start, dtype=float))
    best_kappa = _mode_kappa(params, pose, best, mode)

    def consider(trial):
        nonlocal best, best_kappa
        trial = params.clip_sliders(trial)
        kappa = _mode_kappa(params, pose, trial, mode)
        if kappa > best_kappa + _KAPPA_IMPROVEMENT:
            best, best_kappa = trial, kappa
            return True
        return False

    def try_value(i, value):
        trial = best.copy()
        trial[i] = value
        consider(trial)

    for i in free:
        for value in np.linspace(lo[i], hi[i], grid_points):
            try_value(i, value)
    step = (hi - lo) / (grid_points - 1)
    for _ in range(refinements):
        step = step / 2.0
        for i in free:
            center = best[i]
            try_value(i, center - step[i])
            try_value(i, center + step[i])
    offsets = poll_offsets(len(free))
    for _ in range(poll_iterations):
        moved = False
        for offset in offsets:
            trial = best.copy()
            trial[free] = best[free] + poll_step * offset
            moved = consider(trial) or moved
        if not moved:
            break
    if best_kappa <= 0.0:
        raise NoFeasibleSliders(
            f"mode {mode.id}: no wrench-feasible slider configuration at pose {pose}"
        )
    return best, best_kappa


def clamp_slider_step(
    target: np.ndarray, current: np.ndarray, v_max: float, dt: float
) -> np.ndarray:
    """Move from ``current`` toward ``target`` by at most ``v_max dt`` per slider."""
    limit = v_max * dt
    return current + np.clip(target - current, -limit, limit)


def optimize_sliders(
    params: RobotParams,
    x_desired: np.ndarray,
    sliders: np.ndarray,
    mode: WorkingMode,
    dt: float,
) -> np.ndarray:
    """Velocity-limited slider update toward the best conditioned configuration."""
    current = np.asarray(sliders, dtype=float)
    target, _ = search_sliders(params, x_desired, mode, current)
    return params.clip_sliders(clamp_slider_step(target, current, params.v_slider_max, dt))


def tension_distribution(P: np.ndarray, tau_min: float) -> np.ndarray:
    """Smallest positive tensions balancing ``P``, each at least ``tau_min``."""
    basis = null_space(np.atleast_2d(np.asarray(P, dtype=float)))
    z = _oriented(basis) if basis.shape[1] == 1 else None
    if z is None:
        raise Infeasible("pulling map has no strictly positive null vector")
    return z * (tau_min / z.min())


def compute_joint_angles(
    lengths: np.ndarray,
    stiffness: np.ndarray,
    tensions: np.ndarray,
    previous_spools: np.ndarray,
    surviving: Sequence[int],
) -> np.ndarray:
    """Spool positions ``theta = l_p - tau / k``; failed spools keep their value."""
    spools = np.array(previous_spools, dtype=float)
    idx = list(surviving)
    spools[idx] = np.maximum(0.0, lengths[idx] - tensions[idx] / stiffness[idx])
    return spools


def _joint_input_for(params, pose, sliders, mode, previous_spools):
    lengths = inverse_kinematics(params, pose, sliders, mode.surviving)
    P = pulling_map(params, pose, sliders, mode)[list(mode.controlled_rows)]
    tensions = np.zeros(4)
    tensions[list(mode.surviving)] = tension_distribution(P, params.tau_min)
    stiffness = params.specific_stiffness / np.where(lengths > 0.0, lengths, 1.0)
    spools = compute_joint_angles(lengths, stiffness, tensions, previous_spools, mode.surviving)
    return JointInput(sliders=sliders, spools=spools)


def parked_joint_input(
    params: RobotParams, pose: np.ndarray, q_prev: JointInput, mode: WorkingMode
) -> JointInput:
    """Hold the sliders and pay the surviving spools out to zero tension at ``pose``.

    Two cables sharing a rail can only pull the platform toward that rail, so
    the pose is kept by leaving them just taut instead of tracking.
    """
    lengths = inverse_kinematics(params, pose, q_prev.sliders, mode.surviving)
    spools = compute_joint_angles(
        lengths, np.ones(4), np.zeros(4), q_prev.spools, mode.surviving
    )
    return JointInput(sliders=q_prev.sliders, spools=spools)


def initial_joint_input(
    params: RobotParams,
    pose: np.ndarray,
    sliders: Sequence[float] = DEFAULT_INITIAL_SLIDERS,
) -> JointInput:
    """Healthy-mode command holding the platform in equilibrium at ``pose``.

    The slider search runs without the velocity limit.
    """
    healthy = mode_by_id(1)
    pose = np.asarray(pose, dtype=float)
    best, kappa = search_sliders(params, pose, healthy, np.asarray(sliders, dtype=float))
    logger.debug(f"initial sliders {best} (kappa {kappa:.4f})")
    lengths = inverse_kinematics(params, pose, best)
    return _joint_input_for(params, pose, best, healthy, lengths)


def mode_controller_step(
    params: RobotParams,
    mode: WorkingMode,
    q_prev: JointInput,
    x_ref: np.ndarray,
    tracking: TrackingState,
    gains: Gains,
    dt: float,
    x_guess: np.ndarray,
) -> ModeCommand:
    """Candidate joint input for one mode, computed from the last mixed input.

    Infeasible tensions, FK failures and degenerate cables make the mode hold
    ``q_prev`` and flag the tick. When no slider configuration is feasible
    the sliders are held and the rest of the pipeline still runs. Two-cable
    modes park at the forward-kinematics pose (see :func:`parked_joint_input`).
    """
    flags: List[str] = []
    try:
        x_fk = forward_kinematics(params, q_prev, mode.health(), x_guess)
        if mode.motion_model is MotionModel.TWO_CABLE:
            q = parked_joint_input(params, x_fk, q_prev, mode)
            return ModeCommand(mode, q, tracking, x_fk, x_fk, ())
        x_next, tracking_next = pd_step(x_ref, x_fk, tracking, gains, dt)
        try:
            sliders = optimize_sliders(params, x_next, q_prev.sliders, mode, dt)
        except NoFeasibleSliders as e:
            logger.debug(str(e))
            flags.append(f"no_feasible_sliders_mode{mode.id}")
            sliders = q_prev.sliders
        q = _joint_input_for(params, x_next, sliders, mode, q_prev.spools)
    except (Infeasible, NoConvergence, DegenerateCable) as e:
        logger.debug(f"mode {mode.id} holds its input: {e}")
        flags.append(f"infeasible_mode{mode.id}")
        guess = np.asarray(x_guess, dtype=float)
        return ModeCommand(mode, q_prev, tracking, guess, guess, tuple(flags))
    return ModeCommand(mode, q, tracking_next, x_next, x_fk, tuple(flags))


def mix_inputs(
    candidates: Sequence[JointInput], weights: np.ndarray, params: RobotParams
) -> JointInput:
    """Convex combination of the candidates; sliders re-clipped to their rails."""
    stacked = np.stack([c.as_vector() for c in candidates])
    mixed = np.asarray(weights, dtype=float) @ stacked
    return JointInput(sliders=params.clip_sliders(mixed[:4]), spools=mixed[4:])


def recovery_policy(
    cursor: ReferenceCursor,
    dominant_changed: bool,
    error_norm: float,
    t: float,
    last_index: int,
    tolerance: float = DEFAULT_RECOVERY_TOLERANCE,
    stall_time: float = DEFAULT_STALL_TIME,
) -> Tuple[ReferenceCursor, Tuple[str, ...]]:
    """Advance, pin or release the reference index for the next tick.

    A change of dominant mode pins the index at the current sample. The pin
    holds until the tracking error drops below ``tolerance``; after
    ``stall_time`` seconds it is released anyway and the tick is flagged.
    """
    if dominant_changed:
        anchor = cursor.anchor if cursor.holding else cursor.index
        hold_start = cursor.hold_start if cursor.holding else t
        return ReferenceCursor(anchor, True, anchor, hold_start), ("recovery_hold",)
    if cursor.holding:
        if error_norm < tolerance:
            return ReferenceCursor(min(cursor.index + 1, last_index)), ()
        if t - cursor.hold_start > stall_time:
            stall = RecoveryStall(
                f"reference held at sample {cursor.anchor} for more than {stall_time:g} s"
            )
            logger.warning(str(stall))
            return ReferenceCursor(min(cursor.index + 1, last_index)), ("recovery_stall",)
        return cursor, ("recovery_hold",)
    return replace(cursor, index=min(cursor.index + 1, last_index)), ()


def controller_bank_step(
    params: RobotParams,
    state: ControllerBankState,
    weights: np.ndarray,
    reference: np.ndarray,
    gains: Gains,
    dt: float,
    t: float,
    tolerance: float = DEFAULT_RECOVERY_TOLERANCE,
    stall_time: float = DEFAULT_STALL_TIME,
    executor: Optional[Executor] = None,
) -> BankTick:
    """Run every mode's controller, mix the candidates and update the cursor."""
    x_ref = reference[state.cursor.index]

    def stage(j):
        return mode_controller_step(
            params,
            WORKING_MODES[j],
            state.q_mixed,
            x_ref,
            state.tracking[j],
            gains,
            dt,
            state.x_command,
        )

    if executor is None:
        commands = [stage(j) for j in range(len(WORKING_MODES))]
    else:
        commands = list(executor.map(stage, range(len(WORKING_MODES))))

    weights = np.asarray(weights, dtype=float)
    q = mix_inputs([c.q for c in commands], weights, params)
    dominant = commands[int(np.argmax(weights))]
    error_norm = float(np.linalg.norm((x_ref - dominant.x_fk)[:2]))
    cursor, recovery_flags = recovery_policy(
        state.cursor,
        dominant.mode.id != state.dominant_mode,
        error_norm,
        t,
        len(reference) - 1,
        tolerance,
        stall_time,
    )
    flags = tuple(flag for c in commands for flag in c.flags) + recovery_flags
    if dominant.mode.motion_model is MotionModel.TWO_CABLE:
        flags += (f"underactuated_mode{dominant.mode.id}",)
    next_state = ControllerBankState(
        tracking=tuple(c.tracking for c in commands),
        cursor=cursor,
        q_mixed=q,
        x_command=weights @ np.stack([c.x_next for c in commands]),
        dominant_mode=dominant.mode.id,
    )
    return BankTick(next_state, q, np.asarray(x_ref, dtype=float), error_norm, flags)
