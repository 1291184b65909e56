"""Interacting Multiple Model estimator over a bank of per-mode EKFs.

One extended Kalman filter runs per working mode. Each plant tick the bank
mixes the filter posteriors under the Markov mode-transition prior, propagates
and updates every filter, scores the measurement against each filter and
fuses the results into a combined estimate plus a mode-probability vector.
"""

import logging
from concurrent.futures import Executor
from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .constants import (
    DEFAULT_DOUBLE_FAILURE_TRANSITION,
    DEFAULT_IMPOSSIBLE_TRANSITION,
    DEFAULT_INITIAL_COVARIANCE,
    DEFAULT_MEASUREMENT_STD,
    DEFAULT_PROCESS_STD,
    DEFAULT_SELF_TRANSITION,
    DEFAULT_SINGLE_FAILURE_TRANSITION,
    DEFAULT_WEIGHT_FLOOR,
    JACOBIAN_STEP,
    MIXING_MIN_NORMALIZER,
    SINGULAR_RCOND,
)
from .errors import (
    AllZeroLikelihood,
    DegenerateCable,
    NumericalDegeneracy,
    SingularInnovation,
)
from .model import (
    WORKING_MODES,
    JointInput,
    PlatformState,
    RobotParams,
    WorkingMode,
    measurement,
    measurement_matrix,
    measurement_residual,
    state_derivative,
    wrap_angle,
)

logger = logging.getLogger(__name__)

_LOG_TWO_PI = np.log(2.0 * np.pi)


@dataclass(frozen=True, eq=False)
class ModeFilter:
    """Posterior of one mode-conditioned EKF.

    ``Q`` is the continuous process-noise intensity (scaled by the step
    length when propagated); ``R`` is the measurement covariance.
    """

    mode: WorkingMode
    x: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    R: np.ndarray


@dataclass(frozen=True, eq=False)
class ImmBank:
    filters: Tuple[ModeFilter, ...]
    weights: np.ndarray
    transition: np.ndarray
    weight_floor: float = DEFAULT_WEIGHT_FLOOR

    @property
    def size(self) -> int:
        return len(self.filters)


@dataclass(frozen=True, eq=False)
class ImmOutput:
    x_combined: np.ndarray
    P_combined: np.ndarray
    weights: np.ndarray
    dominant_mode: WorkingMode
    flags: Tuple[str, ...] = ()


def numerical_jacobian(
    func: Callable[[np.ndarray], np.ndarray], x: np.ndarray, step: float = JACOBIAN_STEP
) -> np.ndarray:
    """Central finite-difference Jacobian of ``func`` at ``x``."""
    x = np.asarray(x, dtype=float)
    columns = []
    for k in range(x.size):
        delta = np.zeros_like(x)
        delta[k] = step
        columns.append((func(x + delta) - func(x - delta)) / (2.0 * step))
    return np.column_stack(columns)


def linearize(
    params: RobotParams, mode: WorkingMode, x: np.ndarray, q: JointInput
) -> Tuple[np.ndarray, np.ndarray]:
    """State Jacobian ``F`` of the mode's dynamics and measurement Jacobian ``H``."""
    mask = mode.mask

    def rhs(state):
        return state_derivative(params, state, q.sliders, q.spools, mask)

    return numerical_jacobian(rhs, x), measurement_matrix()


def ekf_propagate(
    x0: np.ndarray,
    P0: np.ndarray,
    f: np.ndarray,
    F: np.ndarray,
    Q: np.ndarray,
    dt: float,
) -> Tuple[np.ndarray, np.ndarray]:
    """One Euler prediction step: ``x + f dt`` and ``Phi P Phi' + Q``."""
    if dt <= 0.0:
        raise ValueError(f"step length must be positive, got {dt}")
    phi = np.eye(len(x0)) + F * dt
    x_prior = x0 + f * dt
    P_prior = phi @ P0 @ phi.T + Q
    return x_prior, 0.5 * (P_prior + P_prior.T)


def _check_innovation(E: np.ndarray) -> None:
    if not np.all(np.isfinite(E)):
        raise SingularInnovation("innovation covariance is not finite")
    singular_values = np.linalg.svd(E, compute_uv=False)
    if singular_values[0] <= 0.0 or singular_values[-1] / singular_values[0] < SINGULAR_RCOND:
        raise SingularInnovation(
            f"innovation covariance is singular (singular values {singular_values})"
        )


def ekf_update(
    x_prior: np.ndarray,
    P_prior: np.ndarray,
    y: np.ndarray,
    H: np.ndarray,
    R: np.ndarray,
    predicted: Optional[np.ndarray] = None,
    residual: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Measurement update; returns posterior mean, covariance, innovation and its covariance.

    ``predicted`` is ``h(x_prior)`` and defaults to ``H x_prior``; ``residual``
    replaces plain subtraction when some measured quantities are angles.
    """
    predicted = H @ x_prior if predicted is None else np.asarray(predicted, dtype=float)
    if residual is None:
        innovation = np.asarray(y, dtype=float) - predicted
    else:
        innovation = residual(y, predicted)
    E = H @ P_prior @ H.T + R
    E = 0.5 * (E + E.T)
    _check_innovation(E)
    gain = np.linalg.solve(E, H @ P_prior).T
    x_post = x_prior + gain @ innovation
    P_post = (np.eye(len(x_prior)) - gain @ H) @ P_prior
    return x_post, 0.5 * (P_post + P_post.T), innovation, E


def gaussian_log_likelihood(innovation: np.ndarray, E: np.ndarray) -> float:
    innovation = np.atleast_1d(np.asarray(innovation, dtype=float))
    E = np.atleast_2d(np.asarray(E, dtype=float))
    _check_innovation(E)
    try:
        factor = cho_factor(E, lower=True)
    except LinAlgError as e:
        raise SingularInnovation(f"innovation covariance is not positive definite: {e}")
    mahalanobis = float(innovation @ cho_solve(factor, innovation))
    log_det = 2.0 * float(np.sum(np.log(np.diag(factor[0]))))
    return -0.5 * (mahalanobis + log_det + innovation.size * _LOG_TWO_PI)


def gaussian_likelihood(innovation: np.ndarray, E: np.ndarray) -> float:
    """Normal density of the innovation under covariance ``E``."""
    return float(np.exp(gaussian_log_likelihood(innovation, E)))


def apply_weight_floor(weights: np.ndarray, floor: float) -> np.ndarray:
    """Project a probability vector so every entry is at least ``floor``.

    Entries below the floor are pinned to it and the remaining mass is
    rescaled among the others; repeated until no free entry drops below.
    """
    weights = np.asarray(weights, dtype=float)
    if floor <= 0.0:
        return weights / weights.sum()
    if floor * weights.size >= 1.0:
        raise ValueError(f"weight floor {floor} too large for {weights.size} modes")
    pinned = weights < floor
    while True:
        free_mass = 1.0 - floor * np.count_nonzero(pinned)
        free = np.where(pinned, 0.0, weights)
        result = np.where(pinned, floor, free * (free_mass / free.sum()))
        newly_pinned = ~pinned & (result < floor)
        if not np.any(newly_pinned):
            return result
        pinned |= newly_pinned


def _posterior_weights(prior, log_likelihoods, floor) -> Tuple[np.ndarray, bool]:
    with np.errstate(divide="ignore"):
        log_posterior = np.log(np.asarray(prior, dtype=float)) + log_likelihoods
    peak = np.max(log_posterior)
    if not np.isfinite(peak):
        reset = AllZeroLikelihood(
            "all modes assigned zero likelihood; resetting weights to uniform"
        )
        logger.warning(str(reset))
        return np.full(len(prior), 1.0 / len(prior)), True
    unnormalized = np.exp(log_posterior - peak)
    return apply_weight_floor(unnormalized / unnormalized.sum(), floor), False


def imm_weight_update(
    weights: np.ndarray, likelihoods: np.ndarray, floor: float = DEFAULT_WEIGHT_FLOOR
) -> np.ndarray:
    """Bayes update of the mode probabilities, then the weight floor.

    When every product ``w_j L_j`` vanishes the weights reset to uniform and a
    warning is logged.
    """
    likelihoods = np.asarray(likelihoods, dtype=float)
    if np.any(likelihoods < 0.0) or not np.all(np.isfinite(likelihoods)):
        raise ValueError("likelihoods must be finite and non-negative")
    with np.errstate(divide="ignore"):
        log_likelihoods = np.log(likelihoods)
    return _posterior_weights(weights, log_likelihoods, floor)[0]


def _unwrapped_headings(xs: np.ndarray, weights: np.ndarray) -> np.ndarray:
    # headings re-expressed within pi of the heaviest filter's heading
    xs = xs.copy()
    anchor = xs[int(np.argmax(weights)), 2]
    xs[:, 2] = anchor + wrap_angle(xs[:, 2] - anchor)
    return xs


def imm_mix(bank: ImmBank) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mixed initial conditions for every filter.

    Returns the stacked mixed means, mixed covariances and the predicted mode
    probabilities ``c_j = sum_i w_i p_ij``.
    """
    xs = np.stack([f.x for f in bank.filters])
    Ps = np.stack([f.P for f in bank.filters])
    joint = bank.weights[:, None] * bank.transition
    predicted = joint.sum(axis=0)
    if np.any(predicted < MIXING_MIN_NORMALIZER):
        raise NumericalDegeneracy(f"mixing normalizer underflow: {predicted}")
    mixing = joint / predicted[None, :]
    mixed_xs = np.empty_like(xs)
    mixed_Ps = np.empty_like(Ps)
    for j in range(bank.size):
        local = _unwrapped_headings(xs, mixing[:, j])
        mixed_xs[j] = mixing[:, j] @ local
        spread = local - mixed_xs[j]
        mixed = np.einsum("i,ik,il->kl", mixing[:, j], spread, spread)
        mixed += np.tensordot(mixing[:, j], Ps, axes=1)
        mixed_Ps[j] = 0.5 * (mixed + mixed.T)
    return mixed_xs, mixed_Ps, predicted


def imm_combine(bank: ImmBank, flags: Sequence[str] = ()) -> ImmOutput:
    """Weight-averaged estimate and covariance; dominant mode by argmax."""
    xs = np.stack([f.x for f in bank.filters])
    Ps = np.stack([f.P for f in bank.filters])
    weights = bank.weights
    xs = _unwrapped_headings(xs, weights)
    x_combined = weights @ xs
    spread = xs - x_combined
    P_combined = np.einsum("i,ik,il->kl", weights, spread, spread)
    P_combined += np.tensordot(weights, Ps, axes=1)
    dominant = bank.filters[int(np.argmax(weights))].mode
    return ImmOutput(
        x_combined=x_combined,
        P_combined=0.5 * (P_combined + P_combined.T),
        weights=weights.copy(),
        dominant_mode=dominant,
        flags=tuple(flags),
    )


def _filter_stage(params, filt, x0, P0, q, y, dt):
    """Propagate and update one filter; returns (x, P, log_likelihood, flag)."""
    try:
        F, H = linearize(params, filt.mode, x0, q)
        f = state_derivative(params, x0, q.sliders, q.spools, filt.mode.mask)
        x_prior, P_prior = ekf_propagate(x0, P0, f, F, filt.Q * dt, dt)
    except DegenerateCable as e:
        logger.debug(f"mode {filt.mode.id}: {e}")
        return x0, P0, -np.inf, f"degenerate_mode{filt.mode.id}"
    try:
        predicted = measurement(PlatformState.from_vector(x_prior))
        x_post, P_post, innovation, E = ekf_update(
            x_prior, P_prior, y, H, filt.R, predicted, measurement_residual
        )
        log_likelihood = gaussian_log_likelihood(innovation, E)
    except SingularInnovation as e:
        logger.debug(f"mode {filt.mode.id}: {e}")
        return x_prior, P_prior, -np.inf, f"singular_mode{filt.mode.id}"
    x_post[2] = wrap_angle(x_post[2])
    return x_post, P_post, log_likelihood, None


def imm_step(
    params: RobotParams,
    bank: ImmBank,
    q: JointInput,
    y: np.ndarray,
    dt: float,
    executor: Optional[Executor] = None,
) -> Tuple[ImmBank, ImmOutput]:
    """One full IMM cycle: mix, per-mode EKF, likelihoods, weights, combine.

    The per-mode stages may run on ``executor``; results are gathered in mode
    order so the outcome does not depend on scheduling. A mode whose stage
    fails keeps its prior and gets zero likelihood.
    """
    mixed_xs, mixed_Ps, predicted = imm_mix(bank)

    def stage(j):
        return _filter_stage(params, bank.filters[j], mixed_xs[j], mixed_Ps[j], q, y, dt)

    if executor is None:
        results = [stage(j) for j in range(bank.size)]
    else:
        results = list(executor.map(stage, range(bank.size)))

    filters = tuple(
        replace(filt, x=x, P=P) for filt, (x, P, _, _) in zip(bank.filters, results)
    )
    log_likelihoods = np.array([r[2] for r in results])
    flags: List[str] = [r[3] for r in results if r[3] is not None]
    weights, reset = _posterior_weights(predicted, log_likelihoods, bank.weight_floor)
    if reset:
        flags.append("all_zero_likelihood")
    new_bank = replace(bank, filters=filters, weights=weights)
    return new_bank, imm_combine(new_bank, flags)


def default_transition_matrix(
    self_transition: float = DEFAULT_SELF_TRANSITION,
    single_failure: float = DEFAULT_SINGLE_FAILURE_TRANSITION,
    double_failure: float = DEFAULT_DOUBLE_FAILURE_TRANSITION,
    impossible: float = DEFAULT_IMPOSSIBLE_TRANSITION,
) -> np.ndarray:
    """Markov matrix over the seven working modes.

    Healthy moves to each single failure; losing A or B can lead to the
    bottom pair (mode 6), losing C or D to the top pair (mode 7). Any mass
    not assigned goes to staying put, and every other transition gets the
    small ``impossible`` probability so a wrong identification can recover.
    """
    n = len(WORKING_MODES)
    transition = np.full((n, n), impossible)
    explicit = {
        0: {1: single_failure, 2: single_failure, 3: single_failure, 4: single_failure},
        1: {5: double_failure},
        2: {5: double_failure},
        3: {6: double_failure},
        4: {6: double_failure},
    }
    for i in range(n):
        targets = explicit.get(i, {})
        for j, p in targets.items():
            transition[i, j] = p
        transition[i, i] = max(self_transition, 1.0 - sum(targets.values()))
    return transition / transition.sum(axis=1, keepdims=True)


def initial_weights(n: int, floor: float = DEFAULT_WEIGHT_FLOOR) -> np.ndarray:
    """Weights favoring the healthy mode: ``[1 - (n-1) eps, eps, ...]``."""
    weights = np.full(n, floor)
    weights[0] = 1.0 - floor * (n - 1)
    return weights


def make_bank(
    pose: np.ndarray,
    process_std: Sequence[float] = DEFAULT_PROCESS_STD,
    measurement_std: Sequence[float] = DEFAULT_MEASUREMENT_STD,
    initial_covariance: float = DEFAULT_INITIAL_COVARIANCE,
    transition: Optional[np.ndarray] = None,
    weight_floor: float = DEFAULT_WEIGHT_FLOOR,
) -> ImmBank:
    """Bank with every filter at ``pose``, at rest, with a shared ``Q`` and ``R``."""
    if transition is None:
        transition = default_transition_matrix()
    transition = np.asarray(transition, dtype=float)
    if not np.allclose(transition.sum(axis=1), 1.0, atol=1e-12) or np.any(transition < 0):
        raise ValueError("transition matrix must be row-stochastic")
    x0 = np.concatenate([np.asarray(pose, dtype=float), np.zeros(3)])
    Q = np.diag(np.square(np.asarray(process_std, dtype=float)))
    R = np.diag(np.square(np.asarray(measurement_std, dtype=float)))
    filters = tuple(
        ModeFilter(mode=mode, x=x0.copy(), P=initial_covariance * np.eye(6), Q=Q, R=R)
        for mode in WORKING_MODES
    )
    return ImmBank(
        filters=filters,
        weights=initial_weights(len(filters), weight_floor),
        transition=transition,
        weight_floor=weight_floor,
    )
