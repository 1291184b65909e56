"""Geometry, kinematics and elastic-cable dynamics of the planar 4-PRPR CDPR.

Every per-cable vector is ordered A, B, C, D. Poses are ``(x, y, phi)`` in the
world frame; a platform state stacks pose and velocity into six entries.
"""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .constants import (
    CABLES,
    DEFAULT_DAMPING,
    DEFAULT_FRAME_HEIGHT,
    DEFAULT_FRAME_WIDTH,
    DEFAULT_MASS,
    DEFAULT_PLATFORM_SIZE,
    DEFAULT_RAIL_DIRECTIONS,
    DEFAULT_RAIL_INTERVALS,
    DEFAULT_RAIL_ORIGINS,
    DEFAULT_SPECIFIC_STIFFNESS,
    DEFAULT_TAU_MIN,
    DEFAULT_V_SLIDER_MAX,
    FAILED_MULTIPLIER_THRESHOLD,
    FK_GRADIENT_TOL,
    FK_LAMBDA0,
    FK_MAX_ITER,
    MIN_CABLE_LENGTH,
)
from .errors import DegenerateCable, InvalidParameters, NoConvergence

logger = logging.getLogger(__name__)

_HESSIAN_STEP = 1e-7
_ROUNDING_SLACK = 64.0 * np.finfo(float).eps


def wrap_angle(phi):
    """Wrap angles to (-pi, pi]."""
    return np.pi - np.mod(np.pi - phi, 2.0 * np.pi)


def nearest_corner_offsets(
    rail_origins: np.ndarray,
    rail_directions: np.ndarray,
    rail_intervals: np.ndarray,
    center: Sequence[float],
    platform_size: float,
) -> np.ndarray:
    """Attach each cable to the platform corner closest to its rail midpoint.

    The platform is taken at ``center`` with zero rotation; the resulting body
    offsets are fixed for the life of the robot.
    """
    half = platform_size / 2.0
    corners = np.array([[-half, half], [half, half], [-half, -half], [half, -half]])
    midpoints = rail_origins + rail_intervals.mean(axis=1)[:, None] * rail_directions
    offsets = np.empty((4, 2))
    for i, anchor in enumerate(midpoints):
        distances = np.linalg.norm(np.asarray(center) + corners - anchor, axis=1)
        offsets[i] = corners[int(np.argmin(distances))]
    return offsets


@dataclass(frozen=True, eq=False)
class RobotParams:
    """Frame, rail, platform and cable constants of the robot."""

    frame_width: float
    frame_height: float
    rail_intervals: np.ndarray
    rail_origins: np.ndarray
    rail_directions: np.ndarray
    attachment_offsets: np.ndarray
    mass: float
    inertia: float
    damping: np.ndarray
    specific_stiffness: np.ndarray
    tau_min: float
    v_slider_max: float

    def __post_init__(self):
        shapes = {
            "rail_intervals": (4, 2),
            "rail_origins": (4, 2),
            "rail_directions": (4, 2),
            "attachment_offsets": (4, 2),
            "damping": (3,),
            "specific_stiffness": (4,),
        }
        for name, shape in shapes.items():
            value = np.array(getattr(self, name), dtype=float)
            if value.shape != shape:
                raise InvalidParameters(f"{name} must have shape {shape}, got {value.shape}")
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        norms = np.linalg.norm(self.rail_directions, axis=1)
        if np.any(norms <= 0.0):
            raise InvalidParameters("rail directions must be non-zero")
        directions = self.rail_directions / norms[:, None]
        directions.setflags(write=False)
        object.__setattr__(self, "rail_directions", directions)
        self.validate()

    def validate(self) -> None:
        """Check positivity and rail-interval invariants."""
        scalars = {
            "frame_width": self.frame_width,
            "frame_height": self.frame_height,
            "mass": self.mass,
            "inertia": self.inertia,
            "tau_min": self.tau_min,
            "v_slider_max": self.v_slider_max,
        }
        for name, value in scalars.items():
            if not np.isfinite(value) or value <= 0.0:
                raise InvalidParameters(f"{name} must be strictly positive, got {value}")
        if np.any(self.damping <= 0.0):
            raise InvalidParameters("damping entries must be strictly positive")
        if np.any(self.specific_stiffness <= 0.0):
            raise InvalidParameters("specific stiffnesses must be strictly positive")
        lo, hi = self.rail_intervals[:, 0], self.rail_intervals[:, 1]
        if np.any(lo >= hi):
            raise InvalidParameters("rail intervals must be non-empty (lo < hi)")
        for i in range(4):
            for j in range(i + 1, 4):
                if not self._collinear(i, j):
                    continue
                if lo[j] < hi[i] and lo[i] < hi[j]:
                    raise InvalidParameters(
                        f"rails {CABLES[i]} and {CABLES[j]} share an edge and overlap"
                    )

    def _collinear(self, i: int, j: int) -> bool:
        d_i, d_j = self.rail_directions[i], self.rail_directions[j]
        if abs(d_i[0] * d_j[1] - d_i[1] * d_j[0]) > 1e-12:
            return False
        gap = self.rail_origins[j] - self.rail_origins[i]
        return abs(d_i[0] * gap[1] - d_i[1] * gap[0]) <= 1e-12 and np.dot(d_i, d_j) > 0

    @property
    def inertia_diagonal(self) -> np.ndarray:
        return np.array([self.mass, self.mass, self.inertia])

    @property
    def mass_matrix(self) -> np.ndarray:
        return np.diag(self.inertia_diagonal)

    @property
    def damping_matrix(self) -> np.ndarray:
        return np.diag(self.damping)

    def clip_sliders(self, sliders: np.ndarray) -> np.ndarray:
        return np.clip(sliders, self.rail_intervals[:, 0], self.rail_intervals[:, 1])

    @classmethod
    def default(cls) -> "RobotParams":
        """Baseline robot: 2.0 m x 1.5 m frame, 0.1 m square platform."""
        return build_params()


def build_params(
    frame_width: float = DEFAULT_FRAME_WIDTH,
    frame_height: float = DEFAULT_FRAME_HEIGHT,
    rail_intervals: Sequence[Sequence[float]] = DEFAULT_RAIL_INTERVALS,
    rail_origins: Optional[Sequence[Sequence[float]]] = None,
    rail_directions: Sequence[Sequence[float]] = DEFAULT_RAIL_DIRECTIONS,
    attachment_offsets: Optional[Sequence[Sequence[float]]] = None,
    platform_size: float = DEFAULT_PLATFORM_SIZE,
    mass: float = DEFAULT_MASS,
    inertia: Optional[float] = None,
    damping: Sequence[float] = DEFAULT_DAMPING,
    specific_stiffness: Sequence[float] = (DEFAULT_SPECIFIC_STIFFNESS,) * 4,
    tau_min: float = DEFAULT_TAU_MIN,
    v_slider_max: float = DEFAULT_V_SLIDER_MAX,
) -> RobotParams:
    """Assemble :class:`RobotParams`, deriving whatever is left unspecified."""
    if rail_origins is None:
        if frame_height == DEFAULT_FRAME_HEIGHT:
            rail_origins = DEFAULT_RAIL_ORIGINS
        else:
            rail_origins = ((0.0, frame_height),) * 2 + ((0.0, 0.0),) * 2
    origins = np.asarray(rail_origins, dtype=float)
    directions = np.asarray(rail_directions, dtype=float)
    directions = directions / np.linalg.norm(directions, axis=1)[:, None]
    intervals = np.asarray(rail_intervals, dtype=float)
    if attachment_offsets is None:
        center = (frame_width / 2.0, frame_height / 2.0)
        attachment_offsets = nearest_corner_offsets(
            origins, directions, intervals, center, platform_size
        )
    if inertia is None:
        inertia = mass * (platform_size**2 + platform_size**2) / 12.0
    return RobotParams(
        frame_width=frame_width,
        frame_height=frame_height,
        rail_intervals=intervals,
        rail_origins=origins,
        rail_directions=directions,
        attachment_offsets=np.asarray(attachment_offsets, dtype=float),
        mass=mass,
        inertia=inertia,
        damping=np.asarray(damping, dtype=float),
        specific_stiffness=np.asarray(specific_stiffness, dtype=float),
        tau_min=tau_min,
        v_slider_max=v_slider_max,
    )


@dataclass(frozen=True, eq=False)
class PlatformState:
    """End-effector pose ``(x, y, phi)`` and its velocity."""

    pose: np.ndarray
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        pose = np.array(self.pose, dtype=float).reshape(3)
        pose[2] = wrap_angle(pose[2])
        object.__setattr__(self, "pose", pose)
        object.__setattr__(self, "velocity", np.array(self.velocity, dtype=float).reshape(3))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.pose, self.velocity])

    @classmethod
    def from_vector(cls, x: np.ndarray) -> "PlatformState":
        x = np.asarray(x, dtype=float)
        return cls(pose=x[:3], velocity=x[3:6])


@dataclass(frozen=True, eq=False)
class JointInput:
    """Slider positions ``l_s`` and spool positions ``theta`` (both in m)."""

    sliders: np.ndarray
    spools: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "sliders", np.array(self.sliders, dtype=float).reshape(4))
        object.__setattr__(self, "spools", np.array(self.spools, dtype=float).reshape(4))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.sliders, self.spools])

    @classmethod
    def from_vector(cls, q: np.ndarray) -> "JointInput":
        q = np.asarray(q, dtype=float)
        return cls(sliders=q[:4], spools=q[4:8])


class MotionModel(str, Enum):
    FOUR_CABLE = "four_cable"
    THREE_CABLE = "three_cable"
    TWO_CABLE = "two_cable"


# Pulling-map rows the controller balances under each motion model
_CONTROLLED_ROWS = {
    MotionModel.FOUR_CABLE: (0, 1, 2),
    MotionModel.THREE_CABLE: (0, 1),
    MotionModel.TWO_CABLE: (0,),
}


@dataclass(frozen=True)
class FailureEvent:
    """Scheduled stiffness loss of one cable.

    The multiplier ramps linearly from 1 at ``start`` to ``residual`` at
    ``start + ramp``; ``residual`` above zero models a weakening cable.
    """

    cable: int
    start: float
    ramp: float = 0.1
    residual: float = 0.0

    def multiplier(self, t: float) -> float:
        if t < self.start:
            return 1.0
        if self.ramp <= 0.0 or t >= self.start + self.ramp:
            progress = 1.0
        else:
            progress = (t - self.start) / self.ramp
        return 1.0 - (1.0 - self.residual) * progress


@dataclass(frozen=True, eq=False)
class CableHealth:
    """Per-cable stiffness multipliers plus the failure schedule driving them."""

    multipliers: np.ndarray = field(default_factory=lambda: np.ones(4))
    events: Tuple[FailureEvent, ...] = ()

    def __post_init__(self):
        multipliers = np.array(self.multipliers, dtype=float).reshape(4)
        if np.any(multipliers < 0.0) or np.any(multipliers > 1.0):
            raise InvalidParameters("stiffness multipliers must lie in [0, 1]")
        object.__setattr__(self, "multipliers", multipliers)
        object.__setattr__(self, "events", tuple(self.events))

    @classmethod
    def healthy(cls, events: Iterable[FailureEvent] = ()) -> "CableHealth":
        return cls(np.ones(4), tuple(events))

    def surviving(self, threshold: float = FAILED_MULTIPLIER_THRESHOLD) -> Tuple[int, ...]:
        return tuple(int(i) for i in np.flatnonzero(self.multipliers >= threshold))


@dataclass(frozen=True)
class WorkingMode:
    """A discrete health hypothesis: which cables are intact."""

    id: int
    surviving: Tuple[int, ...]
    motion_model: MotionModel

    @property
    def label(self) -> str:
        return "".join(CABLES[i] for i in self.surviving)

    @property
    def failed(self) -> Tuple[int, ...]:
        return tuple(i for i in range(4) if i not in self.surviving)

    @property
    def mask(self) -> np.ndarray:
        mask = np.zeros(4)
        mask[list(self.surviving)] = 1.0
        return mask

    @property
    def controlled_rows(self) -> Tuple[int, ...]:
        return _CONTROLLED_ROWS[self.motion_model]

    def health(self) -> CableHealth:
        return CableHealth(self.mask)


WORKING_MODES: Tuple[WorkingMode, ...] = (
    WorkingMode(1, (0, 1, 2, 3), MotionModel.FOUR_CABLE),
    WorkingMode(2, (1, 2, 3), MotionModel.THREE_CABLE),
    WorkingMode(3, (0, 2, 3), MotionModel.THREE_CABLE),
    WorkingMode(4, (0, 1, 3), MotionModel.THREE_CABLE),
    WorkingMode(5, (0, 1, 2), MotionModel.THREE_CABLE),
    WorkingMode(6, (2, 3), MotionModel.TWO_CABLE),
    WorkingMode(7, (0, 1), MotionModel.TWO_CABLE),
)


def mode_by_id(mode_id: int) -> WorkingMode:
    if not 1 <= mode_id <= len(WORKING_MODES):
        raise KeyError(f"no working mode {mode_id}")
    return WORKING_MODES[mode_id - 1]


def mode_for_surviving(surviving: Iterable[int]) -> Optional[WorkingMode]:
    """Look up the mode whose intact set is ``surviving``; None if unmodeled."""
    wanted = tuple(sorted(set(int(i) for i in surviving)))
    for mode in WORKING_MODES:
        if mode.surviving == wanted:
            return mode
    return None


def _rotation(phi: float) -> np.ndarray:
    c, s = np.cos(phi), np.sin(phi)
    return np.array([[c, -s], [s, c]])


def anchor_points(params: RobotParams, sliders: np.ndarray) -> np.ndarray:
    """World positions of the slider anchors, one row per cable."""
    return params.rail_origins + np.asarray(sliders, dtype=float)[:, None] * params.rail_directions


def _cable_geometry(params, pose, sliders, check):
    """Free lengths, unit pull directions and world moment arms."""
    pose = np.asarray(pose, dtype=float)
    arms = params.attachment_offsets @ _rotation(pose[2]).T
    chords = anchor_points(params, sliders) - (pose[:2] + arms)
    lengths = np.hypot(chords[:, 0], chords[:, 1])
    for i in check:
        if lengths[i] < MIN_CABLE_LENGTH:
            raise DegenerateCable(CABLES[i], float(lengths[i]))
    safe = np.where(lengths > 0.0, lengths, 1.0)
    return lengths, chords / safe[:, None], arms


def _wrench_columns(directions: np.ndarray, arms: np.ndarray) -> np.ndarray:
    moments = arms[:, 0] * directions[:, 1] - arms[:, 1] * directions[:, 0]
    return np.vstack([directions[:, 0], directions[:, 1], moments])


def _tensions(params, lengths, spools, multipliers):
    safe = np.where(lengths > 0.0, lengths, 1.0)
    stiffness = multipliers * params.specific_stiffness / safe
    return np.maximum(0.0, stiffness * (lengths - spools))


def _cable_indices(cables) -> Tuple[int, ...]:
    if cables is None:
        return (0, 1, 2, 3)
    if isinstance(cables, WorkingMode):
        return cables.surviving
    return tuple(int(i) for i in cables)


def inverse_kinematics(
    params: RobotParams,
    pose: np.ndarray,
    sliders: np.ndarray,
    cables: Optional[Iterable[int]] = None,
) -> np.ndarray:
    """Free cable lengths ``l_p`` for a pose and slider configuration.

    Only the cables in ``cables`` (default: all four) are checked for
    degeneracy; the returned vector always has four entries.
    """
    lengths, _, _ = _cable_geometry(params, pose, sliders, _cable_indices(cables))
    return lengths


def pulling_map(
    params: RobotParams,
    pose: np.ndarray,
    sliders: np.ndarray,
    mode: Optional[WorkingMode] = None,
) -> np.ndarray:
    """Wrench Jacobian with one ``[u_i; r_i x u_i]`` column per surviving cable."""
    cables = _cable_indices(mode)
    _, directions, arms = _cable_geometry(params, pose, sliders, cables)
    return _wrench_columns(directions, arms)[:, list(cables)]


def cable_tensions(
    params: RobotParams,
    pose: np.ndarray,
    sliders: np.ndarray,
    spools: np.ndarray,
    health: CableHealth,
) -> np.ndarray:
    """Plant-side tensions, clamped at zero for slack cables."""
    multipliers = health.multipliers
    lengths, _, _ = _cable_geometry(params, pose, sliders, np.flatnonzero(multipliers > 0.0))
    return _tensions(params, lengths, np.asarray(spools, dtype=float), multipliers)


def _static_wrench(params, pose, sliders, spools, multipliers):
    lengths, directions, arms = _cable_geometry(
        params, pose, sliders, np.flatnonzero(multipliers > 0.0)
    )
    tensions = _tensions(params, lengths, spools, multipliers)
    return _wrench_columns(directions, arms) @ tensions


def static_wrench(
    params: RobotParams, pose: np.ndarray, q: JointInput, health: CableHealth
) -> np.ndarray:
    """Net cable wrench ``P K_q (l_p - theta)`` on the platform at ``pose``."""
    return _static_wrench(params, pose, q.sliders, q.spools, health.multipliers)


def state_derivative(
    params: RobotParams,
    x: np.ndarray,
    sliders: np.ndarray,
    spools: np.ndarray,
    multipliers: np.ndarray,
) -> np.ndarray:
    """Array form of :func:`dynamics_rhs` used by the filters and the plant."""
    x = np.asarray(x, dtype=float)
    wrench = _static_wrench(params, x[:3], sliders, spools, multipliers)
    accel = (wrench - params.damping * x[3:]) / params.inertia_diagonal
    return np.concatenate([x[3:], accel])


def dynamics_rhs(
    params: RobotParams, state: PlatformState, q: JointInput, health: CableHealth
) -> np.ndarray:
    """Time derivative of ``[x_e; xdot_e]`` (gravity-free planar model)."""
    return state_derivative(
        params, state.as_vector(), q.sliders, q.spools, health.multipliers
    )


def measurement(state: PlatformState) -> np.ndarray:
    """Pose-only measurement function ``h``."""
    return state.pose.copy()


def measurement_residual(y: np.ndarray, predicted: np.ndarray) -> np.ndarray:
    """``y - predicted`` with the heading difference wrapped to (-pi, pi]."""
    residual = np.asarray(y, dtype=float) - np.asarray(predicted, dtype=float)
    residual[2] = wrap_angle(residual[2])
    return residual


def measurement_matrix() -> np.ndarray:
    return np.hstack([np.eye(3), np.zeros((3, 3))])


def _spring_energies(params, lengths, spools, multipliers):
    # Potential of a spring whose tension is k0 * (1 - theta / l)
    energies = np.zeros(4)
    taut = (lengths > spools) & (multipliers > 0.0)
    if not np.any(taut):
        return energies
    length, theta = lengths[taut], spools[taut]
    stretch = length - theta
    positive = theta > 0.0
    log_term = np.zeros_like(theta)
    log_term[positive] = theta[positive] * np.log1p(stretch[positive] / theta[positive])
    energies[taut] = (
        multipliers[taut] * params.specific_stiffness[taut] * (stretch - log_term)
    )
    return energies


def elastic_energy(
    params: RobotParams, pose: np.ndarray, q: JointInput, health: CableHealth
) -> float:
    """Elastic energy stored in the taut cables at ``pose``."""
    multipliers = health.multipliers
    lengths, _, _ = _cable_geometry(params, pose, q.sliders, np.flatnonzero(multipliers > 0.0))
    return float(_spring_energies(params, lengths, q.spools, multipliers).sum())


def _energy_and_gradient(params, pose, q, multipliers):
    lengths, directions, arms = _cable_geometry(
        params, pose, q.sliders, np.flatnonzero(multipliers > 0.0)
    )
    energy = float(_spring_energies(params, lengths, q.spools, multipliers).sum())
    tensions = _tensions(params, lengths, q.spools, multipliers)
    return energy, -(_wrench_columns(directions, arms) @ tensions)


def _energy_hessian(params, pose, q, multipliers):
    hessian = np.empty((3, 3))
    for k in range(3):
        step = np.zeros(3)
        step[k] = _HESSIAN_STEP
        wrench_plus = _static_wrench(params, pose + step, q.sliders, q.spools, multipliers)
        wrench_minus = _static_wrench(params, pose - step, q.sliders, q.spools, multipliers)
        hessian[:, k] = -(wrench_plus - wrench_minus) / (2.0 * _HESSIAN_STEP)
    return 0.5 * (hessian + hessian.T)


def forward_kinematics(
    params: RobotParams,
    q: JointInput,
    health: CableHealth,
    guess: np.ndarray,
    max_iter: int = FK_MAX_ITER,
    tol: float = FK_GRADIENT_TOL,
    lambda0: float = FK_LAMBDA0,
) -> np.ndarray:
    """Pose minimizing the cable potential energy for joint input ``q``.

    Levenberg-Marquardt on the energy: damped Newton steps, lambda divided by
    10 on an accepted step and multiplied by 10 on a rejected one. Raises
    :class:`NoConvergence` when the gradient norm is still above ``tol``
    after ``max_iter`` iterations.
    """
    multipliers = health.multipliers
    pose = np.array(guess, dtype=float).reshape(3)
    energy, gradient = _energy_and_gradient(params, pose, q, multipliers)
    damping = lambda0
    for _ in range(max_iter):
        gradient_norm = np.linalg.norm(gradient)
        if gradient_norm <= tol:
            break
        hessian = _energy_hessian(params, pose, q, multipliers)
        try:
            factor = cho_factor(hessian + damping * np.eye(3))
        except LinAlgError:
            damping *= 10.0
            continue
        trial = pose - cho_solve(factor, gradient)
        try:
            trial_energy, trial_gradient = _energy_and_gradient(params, trial, q, multipliers)
        except DegenerateCable:
            damping *= 10.0
            continue
        tie = trial_energy <= energy + _ROUNDING_SLACK * abs(energy)
        if trial_energy < energy or (tie and np.linalg.norm(trial_gradient) < gradient_norm):
            pose, energy, gradient = trial, trial_energy, trial_gradient
            damping = max(damping / 10.0, 1e-12)
        else:
            damping *= 10.0
    gradient_norm = np.linalg.norm(gradient)
    if gradient_norm > tol:
        raise NoConvergence(
            f"forward kinematics stopped at |grad V| = {gradient_norm:.3e} after {max_iter} iterations"
        )
    pose[2] = wrap_angle(pose[2])
    return pose


def inject_failure(health: CableHealth, t: float) -> CableHealth:
    """Advance the stiffness multipliers to time ``t``.

    Multipliers never increase: each one is the minimum of its previous value
    and every scheduled event's ramp for that cable.
    """
    multipliers = health.multipliers.copy()
    for event in health.events:
        multipliers[event.cable] = min(multipliers[event.cable], event.multiplier(t))
    return replace(health, multipliers=multipliers)
