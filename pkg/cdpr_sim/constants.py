"""Constants for the CDPR simulator."""

# Cable labels in column order of every per-cable vector
CABLES = ("A", "B", "C", "D")

# Frame and platform geometry, m
DEFAULT_FRAME_WIDTH = 2.0
DEFAULT_FRAME_HEIGHT = 1.5
DEFAULT_PLATFORM_SIZE = 0.1
# A and B ride the top edge, C and D the bottom edge
DEFAULT_RAIL_INTERVALS = ((0.0, 1.0), (1.0, 2.0), (0.0, 1.0), (1.0, 2.0))
DEFAULT_RAIL_ORIGINS = (
    (0.0, DEFAULT_FRAME_HEIGHT),
    (0.0, DEFAULT_FRAME_HEIGHT),
    (0.0, 0.0),
    (0.0, 0.0),
)
DEFAULT_RAIL_DIRECTIONS = ((1.0, 0.0),) * 4
DEFAULT_INITIAL_SLIDERS = (0.5, 1.5, 0.5, 1.5)

# Platform dynamics
DEFAULT_MASS = 1.0
DEFAULT_DAMPING = (30.0, 30.0, 0.05)
DEFAULT_SPECIFIC_STIFFNESS = 200.0
DEFAULT_TAU_MIN = 10.0
DEFAULT_V_SLIDER_MAX = 0.5

# Numerical tolerances
MIN_CABLE_LENGTH = 1e-6
FK_LAMBDA0 = 1e-3
FK_GRADIENT_TOL = 1e-10
FK_MAX_ITER = 100
JACOBIAN_STEP = 1e-6
SINGULAR_RCOND = 1e-12
MIXING_MIN_NORMALIZER = 1e-300
BLOWUP_LIMIT = 1e6

# Failure schedule
DEFAULT_FAILURE_RAMP = 0.1
FAILED_MULTIPLIER_THRESHOLD = 0.5

# Estimator
DEFAULT_SELF_TRANSITION = 0.998
DEFAULT_SINGLE_FAILURE_TRANSITION = 0.0005
DEFAULT_DOUBLE_FAILURE_TRANSITION = 0.002
DEFAULT_IMPOSSIBLE_TRANSITION = 1e-6
DEFAULT_WEIGHT_FLOOR = 1e-6
DEFAULT_INITIAL_COVARIANCE = 1e-4
DEFAULT_PROCESS_STD = (0.0, 0.0, 0.0, 0.05, 0.05, 0.05)
DEFAULT_MEASUREMENT_STD = (0.002, 0.002, 0.005)

# Controller
DEFAULT_GAIN_P = (0.6, 0.6, 0.0)
DEFAULT_GAIN_D = (0.02, 0.02, 0.0)
SLIDER_GRID_POINTS = 21
SLIDER_REFINEMENTS = 2
# Final full-neighborhood poll, m, and its iteration cap
SLIDER_POLL_STEP = 0.005
SLIDER_POLL_MAX_ITER = 200
DEFAULT_RECOVERY_TOLERANCE = 0.01
DEFAULT_STALL_TIME = 10.0

# Run
DEFAULT_DURATION = 20.0
DEFAULT_PLANT_HZ = 100
DEFAULT_CONTROL_HZ = 10
DEFAULT_SEED = 0
DEFAULT_TRAJECTORY_SPEED = 0.05
GENERATOR_ID = "numpy.random.PCG64 via SeedSequence.spawn(2) [process, measurement]"

# Environment variables
ENV_THREADS = "CDPR_SIM_THREADS"
ENV_DEBUG = "CDPR_SIM_DEBUG"

# log.csv column order
LOG_COLUMNS = (
    ["t", "x", "y", "phi", "vx", "vy", "vphi"]
    + ["meas_x", "meas_y", "meas_phi", "est_x", "est_y", "est_phi"]
    + [f"w{j}" for j in range(1, 8)]
    + ["dom_mode", "true_mode"]
    + [f"ls{i}" for i in range(1, 5)]
    + [f"th{i}" for i in range(1, 5)]
    + [f"tau{i}" for i in range(1, 5)]
    + ["err_norm", "flags"]
)

# Exit codes
EXIT_VALIDATION = 2
EXIT_SIMULATION = 3
EXIT_IO = 4
