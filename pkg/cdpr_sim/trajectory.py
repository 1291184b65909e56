"""Built-in reference paths, sampled at the controller rate.

Every reference is an ``(n, 3)`` array of poses with zero orientation. Paths
are walked at constant speed and the final point is held once reached.
"""

from enum import Enum
from typing import Sequence

import numpy as np


class TrajectoryKind(str, Enum):
    LINE = "line"
    CIRCLE = "circle"
    ZIGZAG = "zigzag"


def _as_poses(xy: np.ndarray) -> np.ndarray:
    return np.column_stack([xy, np.zeros(len(xy))])


def sample_polyline(points: np.ndarray, speed: float, dt: float, n: int) -> np.ndarray:
    """Constant-speed samples along a polyline, holding the last vertex."""
    points = np.asarray(points, dtype=float)
    segment_lengths = np.linalg.norm(np.diff(points, axis=0), axis=1)
    arclength = np.concatenate([[0.0], np.cumsum(segment_lengths)])
    travelled = np.minimum(speed * dt * np.arange(n), arclength[-1])
    if arclength[-1] == 0.0:
        return _as_poses(np.repeat(points[:1], n, axis=0))
    xy = np.column_stack(
        [np.interp(travelled, arclength, points[:, 0]), np.interp(travelled, arclength, points[:, 1])]
    )
    return _as_poses(xy)


def zigzag_waypoints(
    x_range: Sequence[float], y_range: Sequence[float], row_spacing: float
) -> np.ndarray:
    """Raster of horizontal rows climbing from the bottom of the box."""
    x_min, x_max = x_range
    y_min, y_max = y_range
    rows = np.arange(y_min, y_max + 1e-9, row_spacing)
    points = []
    for k, y in enumerate(rows):
        xs = (x_min, x_max) if k % 2 == 0 else (x_max, x_min)
        points.extend([(xs[0], y), (xs[1], y)])
    return np.array(points)


def line_reference(
    start: Sequence[float], end: Sequence[float], speed: float, dt: float, n: int
) -> np.ndarray:
    return sample_polyline(np.array([start, end], dtype=float), speed, dt, n)


def circle_reference(
    center: Sequence[float], radius: float, speed: float, dt: float, n: int
) -> np.ndarray:
    """Counter-clockwise circle starting at ``center + (radius, 0)``."""
    angle = speed * dt * np.arange(n) / radius
    xy = np.column_stack(
        [center[0] + radius * np.cos(angle), center[1] + radius * np.sin(angle)]
    )
    return _as_poses(xy)


def zigzag_reference(
    x_range: Sequence[float],
    y_range: Sequence[float],
    row_spacing: float,
    speed: float,
    dt: float,
    n: int,
) -> np.ndarray:
    return sample_polyline(zigzag_waypoints(x_range, y_range, row_spacing), speed, dt, n)
