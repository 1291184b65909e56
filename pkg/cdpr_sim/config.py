"""Configuration management for the CDPR simulator.

Scenario documents are JSON validated by the pydantic models below; runtime
settings (parallelism, debug output) come from CLI flags and the environment.
"""

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    field_validator,
    model_validator,
)
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from .constants import (
    CABLES,
    DEFAULT_CONTROL_HZ,
    DEFAULT_DAMPING,
    DEFAULT_DOUBLE_FAILURE_TRANSITION,
    DEFAULT_DURATION,
    DEFAULT_FAILURE_RAMP,
    DEFAULT_FRAME_HEIGHT,
    DEFAULT_FRAME_WIDTH,
    DEFAULT_GAIN_D,
    DEFAULT_GAIN_P,
    DEFAULT_IMPOSSIBLE_TRANSITION,
    DEFAULT_INITIAL_COVARIANCE,
    DEFAULT_INITIAL_SLIDERS,
    DEFAULT_MASS,
    DEFAULT_MEASUREMENT_STD,
    DEFAULT_PLANT_HZ,
    DEFAULT_PLATFORM_SIZE,
    DEFAULT_PROCESS_STD,
    DEFAULT_RAIL_DIRECTIONS,
    DEFAULT_RAIL_INTERVALS,
    DEFAULT_RECOVERY_TOLERANCE,
    DEFAULT_SEED,
    DEFAULT_SELF_TRANSITION,
    DEFAULT_SINGLE_FAILURE_TRANSITION,
    DEFAULT_SPECIFIC_STIFFNESS,
    DEFAULT_STALL_TIME,
    DEFAULT_TAU_MIN,
    DEFAULT_TRAJECTORY_SPEED,
    DEFAULT_V_SLIDER_MAX,
    DEFAULT_WEIGHT_FLOOR,
    ENV_DEBUG,
    ENV_THREADS,
)
from .control import Gains
from .errors import InvalidParameters, ScenarioParseError, ScenarioValidationError
from .estimation import default_transition_matrix
from .model import FailureEvent, RobotParams, build_params
from .trajectory import (
    TrajectoryKind,
    circle_reference,
    line_reference,
    zigzag_reference,
)

Pair = Tuple[float, float]
Triple = Tuple[float, float, float]
Quad = Tuple[float, float, float, float]
FourPairs = Tuple[Pair, Pair, Pair, Pair]
Six = Tuple[float, float, float, float, float, float]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class RobotSettings(_Section):
    frame_width: float = Field(DEFAULT_FRAME_WIDTH, gt=0, description="Frame width W, m")
    frame_height: float = Field(DEFAULT_FRAME_HEIGHT, gt=0, description="Frame height H, m")
    platform_size: float = Field(
        DEFAULT_PLATFORM_SIZE, gt=0, description="Side of the square platform, m"
    )
    rail_intervals: FourPairs = Field(
        DEFAULT_RAIL_INTERVALS, description="Slider travel [lo, hi] along each rail, m"
    )
    rail_origins: Optional[FourPairs] = Field(
        None, description="Rail origins; default A, B at (0, H) and C, D at (0, 0)"
    )
    rail_directions: FourPairs = Field(
        DEFAULT_RAIL_DIRECTIONS, description="Rail unit directions"
    )
    attachment_offsets: Optional[FourPairs] = Field(
        None, description="Body-frame attachment points; default nearest platform corner"
    )
    mass: float = Field(DEFAULT_MASS, gt=0, description="Platform mass, kg")
    inertia: Optional[float] = Field(
        None, gt=0, description="Rotational inertia, kg m^2; default square plate"
    )
    damping: Triple = Field(DEFAULT_DAMPING, description="Viscous damping diagonal")
    specific_stiffness: Quad = Field(
        (DEFAULT_SPECIFIC_STIFFNESS,) * 4, description="Cable stiffness per unit length k0, N"
    )
    tau_min: float = Field(DEFAULT_TAU_MIN, gt=0, description="Minimum cable tension, N")
    v_slider_max: float = Field(
        DEFAULT_V_SLIDER_MAX, gt=0, description="Slider speed limit, m/s"
    )
    initial_pose: Optional[Triple] = Field(
        None, description="Start pose; default first reference sample"
    )
    initial_sliders: Quad = Field(
        DEFAULT_INITIAL_SLIDERS, description="Start point of the initial slider search, m"
    )

    @model_validator(mode="after")
    def _check_params(self) -> "RobotSettings":
        try:
            self.to_params()
        except InvalidParameters as e:
            raise ValueError(str(e))
        return self

    def to_params(self) -> RobotParams:
        return build_params(
            frame_width=self.frame_width,
            frame_height=self.frame_height,
            rail_intervals=self.rail_intervals,
            rail_origins=self.rail_origins,
            rail_directions=self.rail_directions,
            attachment_offsets=self.attachment_offsets,
            platform_size=self.platform_size,
            mass=self.mass,
            inertia=self.inertia,
            damping=self.damping,
            specific_stiffness=self.specific_stiffness,
            tau_min=self.tau_min,
            v_slider_max=self.v_slider_max,
        )


class TrajectorySettings(_Section):
    kind: TrajectoryKind = Field(TrajectoryKind.ZIGZAG, description="line | circle | zigzag")
    speed: float = Field(DEFAULT_TRAJECTORY_SPEED, ge=0, description="Path speed, m/s")
    start: Pair = Field((0.4, 0.75), description="line: start point, m")
    end: Pair = Field((1.6, 0.75), description="line: end point, m")
    center: Pair = Field((1.0, 0.75), description="circle: center, m")
    radius: float = Field(0.3, gt=0, description="circle: radius, m")
    x_range: Pair = Field((0.4, 1.6), description="zigzag: horizontal extent, m")
    y_range: Pair = Field((0.3, 1.2), description="zigzag: vertical extent, m")
    row_spacing: float = Field(0.15, gt=0, description="zigzag: distance between rows, m")

    def build(self, n: int, dt: float) -> np.ndarray:
        """Reference poses at ``n`` controller ticks spaced ``dt`` apart."""
        if self.kind is TrajectoryKind.LINE:
            return line_reference(self.start, self.end, self.speed, dt, n)
        if self.kind is TrajectoryKind.CIRCLE:
            return circle_reference(self.center, self.radius, self.speed, dt, n)
        return zigzag_reference(
            self.x_range, self.y_range, self.row_spacing, self.speed, dt, n
        )


class FailureSettings(_Section):
    cable: Literal["A", "B", "C", "D"] = Field(description="Failing cable")
    time: float = Field(ge=0, description="Failure onset t_f, s")
    ramp: float = Field(DEFAULT_FAILURE_RAMP, ge=0, description="Ramp to the residual, s")
    residual: float = Field(
        0.0, ge=0, lt=1, description="Stiffness multiplier left after the ramp"
    )

    def to_event(self) -> FailureEvent:
        return FailureEvent(CABLES.index(self.cable), self.time, self.ramp, self.residual)


class NoiseSettings(_Section):
    process_std: Six = Field(
        DEFAULT_PROCESS_STD, description="Plant process-noise std per state entry"
    )
    measurement_std: Triple = Field(
        DEFAULT_MEASUREMENT_STD, description="Pose measurement std (m, m, rad)"
    )

    @field_validator("process_std", "measurement_std")
    @classmethod
    def _non_negative(cls, value):
        if any(v < 0 for v in value):
            raise ValueError("standard deviations must be non-negative")
        return value


class ImmSettings(_Section):
    self_transition: float = Field(
        DEFAULT_SELF_TRANSITION, gt=0, le=1, description="Markov self-transition"
    )
    single_failure: float = Field(
        DEFAULT_SINGLE_FAILURE_TRANSITION, ge=0, lt=1, description="Healthy to one failure"
    )
    double_failure: float = Field(
        DEFAULT_DOUBLE_FAILURE_TRANSITION, ge=0, lt=1, description="One to two failures"
    )
    impossible: float = Field(
        DEFAULT_IMPOSSIBLE_TRANSITION, gt=0, lt=1, description="Every other transition"
    )
    transition: Optional[List[List[float]]] = Field(
        None, description="Explicit 7x7 row-stochastic matrix; overrides the above"
    )
    weight_floor: float = Field(
        DEFAULT_WEIGHT_FLOOR, ge=0, lt=1.0 / 7.0, description="Mode weight floor"
    )
    initial_covariance: float = Field(
        DEFAULT_INITIAL_COVARIANCE, gt=0, description="Initial filter covariance diagonal"
    )
    filter_process_std: Optional[Six] = Field(
        None, description="Process noise the filters assume; default noise.process_std"
    )
    filter_measurement_std: Optional[Triple] = Field(
        None, description="Measurement noise the filters assume; default noise.measurement_std"
    )

    @field_validator("transition")
    @classmethod
    def _row_stochastic(cls, value):
        if value is None:
            return value
        matrix = np.asarray(value, dtype=float)
        if matrix.shape != (7, 7):
            raise ValueError(f"transition must be 7x7, got {matrix.shape}")
        if np.any(matrix < 0) or not np.allclose(matrix.sum(axis=1), 1.0, atol=1e-12):
            raise ValueError("transition rows must be non-negative and sum to 1")
        return value

    def transition_matrix(self) -> np.ndarray:
        if self.transition is not None:
            return np.asarray(self.transition, dtype=float)
        return default_transition_matrix(
            self.self_transition, self.single_failure, self.double_failure, self.impossible
        )


class GainSettings(_Section):
    g_p: Triple = Field(DEFAULT_GAIN_P, description="Proportional gains (x, y, phi)")
    g_d: Triple = Field(DEFAULT_GAIN_D, description="Derivative gains (x, y, phi)")

    @field_validator("g_p", "g_d")
    @classmethod
    def _non_negative(cls, value):
        if any(v < 0 for v in value):
            raise ValueError("gains must be non-negative")
        return value

    def to_gains(self) -> Gains:
        return Gains(np.array(self.g_p), np.array(self.g_d))


class RunSettings(_Section):
    duration: float = Field(DEFAULT_DURATION, gt=0, description="Simulated time, s")
    plant_hz: int = Field(DEFAULT_PLANT_HZ, gt=0, description="Plant and estimator rate, Hz")
    control_hz: int = Field(DEFAULT_CONTROL_HZ, gt=0, description="Controller rate, Hz")
    seed: int = Field(DEFAULT_SEED, ge=0, lt=2**64, description="Noise seed (64-bit)")
    recovery_tolerance: float = Field(
        DEFAULT_RECOVERY_TOLERANCE, gt=0, description="Error releasing the reference hold, m"
    )
    stall_time: float = Field(
        DEFAULT_STALL_TIME, gt=0, description="Longest reference hold, s"
    )

    @model_validator(mode="after")
    def _rates_compatible(self) -> "RunSettings":
        if self.plant_hz % self.control_hz != 0:
            raise ValueError(
                f"plant_hz ({self.plant_hz}) must be a multiple of control_hz ({self.control_hz})"
            )
        return self

    @property
    def steps(self) -> int:
        return int(round(self.duration * self.plant_hz))

    @property
    def ratio(self) -> int:
        return self.plant_hz // self.control_hz


class ScenarioFile(_Section):
    """A complete, default-resolved scenario."""

    robot: RobotSettings = Field(default_factory=RobotSettings)
    trajectory: TrajectorySettings = Field(default_factory=TrajectorySettings)
    failures: List[FailureSettings] = Field(default_factory=list)
    noise: NoiseSettings = Field(default_factory=NoiseSettings)
    imm: ImmSettings = Field(default_factory=ImmSettings)
    gains: GainSettings = Field(default_factory=GainSettings)
    run: RunSettings = Field(default_factory=RunSettings)

    @field_validator("failures")
    @classmethod
    def _time_ordered(cls, failures):
        for k in range(1, len(failures)):
            if failures[k].time < failures[k - 1].time:
                raise ValueError(
                    f"failures[{k}] (cable {failures[k].cable} at {failures[k].time} s) "
                    f"precedes failures[{k - 1}] at {failures[k - 1].time} s"
                )
        return failures

    def with_overrides(
        self, seed: Optional[int] = None, duration: Optional[float] = None
    ) -> "ScenarioFile":
        """Copy with ``run.seed`` / ``run.duration`` replaced, re-validated."""
        data = self.model_dump(mode="json")
        if seed is not None:
            data["run"]["seed"] = seed
        if duration is not None:
            data["run"]["duration"] = duration
        return validate_scenario(data)


def validate_scenario(data: object) -> ScenarioFile:
    if not isinstance(data, dict):
        raise ScenarioValidationError("scenario must be a JSON object")
    try:
        return ScenarioFile.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        key_path = ".".join(str(part) for part in first["loc"])
        raise ScenarioValidationError(first["msg"], key_path or None) from e


def parse_scenario_text(text: str) -> ScenarioFile:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ScenarioParseError(e.msg, e.lineno, e.colno) from e
    return validate_scenario(data)


def parse_scenario(path: Union[str, Path]) -> ScenarioFile:
    """Read and validate a scenario file; missing keys take their defaults."""
    return parse_scenario_text(Path(path).read_text(encoding="utf-8"))


def serialize_scenario(scenario: ScenarioFile) -> str:
    return json.dumps(scenario.model_dump(mode="json"), indent=2)


def schema_table() -> Table:
    """Reference of every scenario key with its default and meaning."""
    table = Table(title="Scenario reference")
    table.add_column("Key", style="cyan")
    table.add_column("Default")
    table.add_column("Description")
    for section, field_info in ScenarioFile.model_fields.items():
        annotation = field_info.annotation
        if section == "failures":
            annotation = FailureSettings
            table.add_row("failures", "[]", "List of failure events, time-ordered")
            prefix = "failures[]"
        else:
            prefix = section
        for name, sub in annotation.model_fields.items():
            default = "required" if sub.is_required() else json.dumps(_plain(sub.default))
            table.add_row(f"{prefix}.{name}", default, sub.description or "")
    return table


def _plain(value):
    if isinstance(value, TrajectoryKind):
        return value.value
    return value


class RuntimeConfig:
    """Process-level settings that are not part of a scenario."""

    def __init__(self, threads: int = 1, debug: bool = False):
        if threads < 1:
            raise ValueError(f"thread count must be at least 1, got {threads}")
        self.threads = threads
        self.debug = debug

    def executor(self) -> Optional[ThreadPoolExecutor]:
        """Worker pool for the per-mode stages, or None to run them inline."""
        if self.threads <= 1:
            return None
        return ThreadPoolExecutor(max_workers=self.threads)


def load_runtime_config(
    threads: Optional[int] = None, debug: Optional[bool] = None
) -> RuntimeConfig:
    """Resolve runtime settings: CLI option, then environment, then default."""
    final_threads = threads
    if final_threads is None:
        env_threads = os.getenv(ENV_THREADS)
        if env_threads:
            try:
                final_threads = int(env_threads)
            except ValueError:
                raise ValueError(f"{ENV_THREADS} must be an integer, got {env_threads!r}")
    final_debug = debug or os.getenv(ENV_DEBUG, "").lower() in ("1", "true", "yes")
    return RuntimeConfig(1 if final_threads is None else final_threads, final_debug)


def configure_logging(debug: bool = False) -> None:
    """Route library logging to stderr through rich."""
    logging.basicConfig(
        level=logging.DEBUG if debug else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=Console(stderr=True), show_path=False)],
        force=True,
    )
