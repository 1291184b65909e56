"""Static SVG figures rendered from a run log."""

from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from .artifacts import HEADER_FILENAME, read_header, read_log, require_columns  # noqa: E402
from .config import validate_scenario  # noqa: E402
from .constants import CABLES  # noqa: E402

PLOT_KINDS = ("trajectory", "weights", "sliders", "tracking_error", "estimation_error")

_REQUIRED_COLUMNS = {
    "trajectory": ("x", "y"),
    "weights": ("t",) + tuple(f"w{j}" for j in range(1, 8)),
    "sliders": ("t",) + tuple(f"ls{i}" for i in range(1, 5)),
    "tracking_error": ("t", "err_norm"),
    "estimation_error": ("t", "x", "y", "phi", "est_x", "est_y", "est_phi"),
}

# Fixed salt keeps the generated SVG ids identical across reruns
_SVG_RC = {"svg.hashsalt": "cdpr-sim", "svg.fonttype": "path"}


def _reference_path(header: Dict[str, Any]) -> np.ndarray:
    scenario = validate_scenario(header["scenario"])
    run = scenario.run
    ticks = -(-run.steps // run.ratio) + 1
    return scenario.trajectory.build(ticks, 1.0 / run.control_hz)


def tracked_reference(frame: pd.DataFrame, header: Dict[str, Any]) -> np.ndarray:
    """Reference sample chased on each controller tick, rebuilt from the log.

    The cursor starts on the first planned sample, stays put after a tick
    flagged ``recovery_hold`` and otherwise advances by one sample.
    """
    run = validate_scenario(header["scenario"]).run
    planned = _reference_path(header)
    index = 0
    samples = []
    for flags in frame["flags"].iloc[:: run.ratio]:
        samples.append(planned[index])
        if "recovery_hold" not in str(flags).split("|"):
            index = min(index + 1, len(planned) - 1)
    return np.array(samples).reshape(-1, 3)


def _plot_trajectory(frame: pd.DataFrame, header: Optional[Dict[str, Any]]):
    fig, ax = plt.subplots(figsize=(7, 5.5))
    if header is not None:
        robot = header["scenario"]["robot"]
        planned = _reference_path(header)
        ax.plot(
            planned[:, 0], planned[:, 1], color="0.7", linestyle=":", linewidth=1, label="planned path"
        )
        if "flags" in frame.columns:
            tracked = tracked_reference(frame, header)
            ax.plot(tracked[:, 0], tracked[:, 1], "k--", linewidth=1, label="tracked reference")
        ax.set_xlim(0.0, robot["frame_width"])
        ax.set_ylim(0.0, robot["frame_height"])
    ax.plot(frame["x"], frame["y"], color="tab:blue", linewidth=1.2, label="end effector")
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.legend(loc="upper right")
    ax.set_title("End-effector path")
    return fig


def _plot_weights(frame: pd.DataFrame, header: Optional[Dict[str, Any]]):
    fig, ax = plt.subplots(figsize=(8, 4))
    for j in range(1, 8):
        ax.plot(frame["t"], frame[f"w{j}"], linewidth=1.2, label=f"mode {j}")
    ax.set_ylim(-0.05, 1.05)
    ax.set_xlabel("t [s]")
    ax.set_ylabel("weight")
    ax.legend(loc="center right", ncol=1, fontsize="small")
    ax.set_title("Mode probabilities")
    return fig


def _plot_sliders(frame: pd.DataFrame, header: Optional[Dict[str, Any]]):
    fig, ax = plt.subplots(figsize=(8, 4))
    for i, cable in enumerate(CABLES, start=1):
        ax.plot(frame["t"], frame[f"ls{i}"], linewidth=1.2, label=f"slider {cable}")
    ax.set_xlabel("t [s]")
    ax.set_ylabel("slider position [m]")
    ax.legend(loc="best")
    ax.set_title("Slider positions")
    return fig


def _plot_tracking_error(frame: pd.DataFrame, header: Optional[Dict[str, Any]]):
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.plot(frame["t"], frame["err_norm"] * 1000.0, color="tab:red", linewidth=1.2)
    ax.set_xlabel("t [s]")
    ax.set_ylabel("tracking error [mm]")
    ax.set_title("Trajectory tracking error")
    return fig


def _plot_estimation_error(frame: pd.DataFrame, header: Optional[Dict[str, Any]]):
    fig, (ax_pos, ax_phi) = plt.subplots(2, 1, figsize=(8, 5), sharex=True)
    for axis in ("x", "y"):
        error = (frame[f"est_{axis}"] - frame[axis]) * 1000.0
        ax_pos.plot(frame["t"], error, linewidth=1.0, label=axis)
    ax_pos.set_ylabel("position error [mm]")
    ax_pos.legend(loc="best")
    ax_phi.plot(frame["t"], np.degrees(frame["est_phi"] - frame["phi"]), linewidth=1.0)
    ax_phi.set_ylabel("phi error [deg]")
    ax_phi.set_xlabel("t [s]")
    ax_pos.set_title("Combined estimate error")
    return fig


_PLOTTERS: Dict[str, Callable] = {
    "trajectory": _plot_trajectory,
    "weights": _plot_weights,
    "sliders": _plot_sliders,
    "tracking_error": _plot_tracking_error,
    "estimation_error": _plot_estimation_error,
}


def plot_command(
    log_path: Union[str, Path],
    kinds: Sequence[str],
    out_dir: Union[str, Path],
    header_path: Optional[Union[str, Path]] = None,
) -> List[Path]:
    """Render one SVG per requested kind into ``out_dir``.

    The run's header.json, when found next to the log, supplies the reference
    path and the frame size for the trajectory plot.
    """
    log_path = Path(log_path)
    frame = read_log(log_path)
    for kind in kinds:
        if kind not in _PLOTTERS:
            raise ValueError(f"unknown plot kind {kind!r}")
        require_columns(frame, _REQUIRED_COLUMNS[kind])

    if header_path is None:
        candidate = log_path.parent / HEADER_FILENAME
        header_path = candidate if candidate.exists() else None
    header = read_header(header_path) if header_path is not None else None

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    with plt.rc_context(_SVG_RC):
        for kind in kinds:
            fig = _PLOTTERS[kind](frame, header)
            path = out_dir / f"{kind}.svg"
            fig.savefig(path, format="svg", metadata={"Date": None})
            plt.close(fig)
            written.append(path)
    return written
