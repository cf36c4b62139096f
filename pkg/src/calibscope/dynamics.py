"""Metric trajectories over training checkpoints and fit-state labelling.

A point is *under-fitted* while held-out accuracy is still climbing, and
*over-fitted* once accuracy has flattened but confidence keeps rising.
Trends are least-squares slopes over a trailing window, measured per
checkpoint (window-local index), not per raw step.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import EmptySetError, LabelSpace, PredictionSet, ValidationError, load_prediction_set
from .metrics import EQUAL_MASS, compute_metrics

UNDER_FITTED = "under_fitted"
OVER_FITTED = "over_fitted"
INDETERMINATE = "indeterminate"

_STEP_FILE = re.compile(r"^step_(\d+)\.[^.]+$")


@dataclass(frozen=True)
class TrajectoryPoint:
    step: int
    acc: float
    conf: float
    ece: float
    cerr_pos: Optional[float]
    cerr_neg: Optional[float]


@dataclass(frozen=True)
class StateReport:
    labels: tuple[str, ...]
    transition_step: Optional[int]
    conf_monotone_fraction: float
    cerr_neg_monotone_fraction: float


def compute_trajectory(checkpoints: Sequence[tuple[int, PredictionSet]], bins: int = 100,
                       binning: str = EQUAL_MASS) -> list[TrajectoryPoint]:
    if not checkpoints:
        raise ValidationError("no checkpoints")
    points = []
    prev = None
    for step, pset in checkpoints:
        if step < 0 or (prev is not None and step <= prev):
            raise ValidationError(f"checkpoint steps must be non-negative and strictly increasing (got {step} after {prev})")
        if len(pset) == 0:
            raise EmptySetError(f"empty prediction set at step {step}")
        m = compute_metrics(pset, bins, binning)
        points.append(TrajectoryPoint(int(step), m.acc, m.conf, m.ece, m.cerr_pos, m.cerr_neg))
        prev = step
    return points


def _window_slopes(values: np.ndarray, window: int) -> np.ndarray:
    """OLS slope of values[i-window+1 .. i] against 0..window-1, for i >= window-1."""
    x = np.arange(window) - (window - 1) / 2.0
    frames = np.lib.stride_tricks.sliding_window_view(values, window)
    return frames @ x / np.dot(x, x)


def _monotone_fraction(values) -> float:
    v = [x for x in values if x is not None]
    if len(v) < 2:
        return 1.0
    return sum(b >= a for a, b in zip(v, v[1:])) / (len(v) - 1)


def classify_states(traj: Sequence[TrajectoryPoint], window: int = 5, acc_slope_eps: float = 0.001,
                    conf_slope_eps: float = 0.001) -> StateReport:
    """Label each checkpoint under-fitted, over-fitted or indeterminate.

    Points before the first full window take the first computable label.
    """
    if window < 2:
        raise ValidationError("window must be >= 2")
    if len(traj) < window:
        raise ValidationError(f"trajectory has {len(traj)} points, window needs {window}")
    acc_slope = _window_slopes(np.array([p.acc for p in traj]), window)
    conf_slope = _window_slopes(np.array([p.conf for p in traj]), window)
    labels = []
    for a, c in zip(acc_slope, conf_slope):
        if a > acc_slope_eps:
            labels.append(UNDER_FITTED)
        elif c > conf_slope_eps:
            labels.append(OVER_FITTED)
        else:
            labels.append(INDETERMINATE)
    labels = [labels[0]] * (window - 1) + labels
    transition = next((p.step for p, lab in zip(traj, labels) if lab == OVER_FITTED), None)
    return StateReport(
        labels=tuple(labels),
        transition_step=transition,
        conf_monotone_fraction=_monotone_fraction([p.conf for p in traj]),
        cerr_neg_monotone_fraction=_monotone_fraction([p.cerr_neg for p in traj]),
    )


def load_checkpoints(directory, label_space: Optional[LabelSpace] = None) -> list[tuple[int, PredictionSet]]:
    """Read every ``step_<n>.<ext>`` log in a directory, ordered by n."""
    found = []
    for path in Path(directory).iterdir():
        m = _STEP_FILE.match(path.name)
        if m and path.is_file():
            found.append((int(m.group(1)), path))
    if not found:
        raise ValidationError(f"{directory}: no step_<n>.<ext> checkpoint logs")
    found.sort()
    steps = [s for s, _ in found]
    if len(set(steps)) != len(steps):
        raise ValidationError(f"{directory}: repeated checkpoint step")
    return [(s, load_prediction_set(p, label_space)) for s, p in found]
