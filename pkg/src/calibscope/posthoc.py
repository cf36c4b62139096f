"""Post-hoc calibration that needs no extra trained model.

Temperature scaling, label-smoothing targets and probability-averaging
ensembles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import EmptySetError, PredictionSet, ValidationError, softmax

_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class TemperatureFit:
    temperature: float
    nll_before: float
    nll_after: float
    iterations: int


def temperature_nll(logits: np.ndarray, labels: np.ndarray, t: float) -> float:
    """Mean negative log-likelihood of softmax(logits / t) at the gold labels."""
    z = logits / t
    zmax = z.max(axis=1)
    lse = zmax + np.log(np.exp(z - zmax[:, None]).sum(axis=1))
    return float(np.mean(lse - z[np.arange(len(labels)), labels]))


def fit_temperature(val: PredictionSet, t_min: float = 0.05, t_max: float = 20.0,
                    tol: float = 1e-4) -> TemperatureFit:
    """Fit one temperature on held-out logits.

    Golden-section search over log T on [t_min, t_max] until the bracket is
    narrower than ``tol`` in T. T = 1 is returned instead if it lies in the
    interval and scores at least as well, so the fit never makes NLL worse.
    """
    if len(val) == 0:
        raise EmptySetError()
    if not 0 < t_min <= t_max:
        raise ValidationError(f"need 0 < t_min <= t_max, got [{t_min}, {t_max}]")
    if tol <= 0:
        raise ValidationError("tol must be positive")
    logits = val.require("logits")
    labels = val.labels
    nll = lambda t: temperature_nll(logits, labels, t)
    nll_one = nll(1.0)

    a, b = math.log(t_min), math.log(t_max)
    iterations = 0
    if t_min == t_max:
        best_t = t_min
    else:
        c = b - _INV_PHI * (b - a)
        d = a + _INV_PHI * (b - a)
        fc, fd = nll(math.exp(c)), nll(math.exp(d))
        while math.exp(b) - math.exp(a) > tol:
            iterations += 1
            if fc <= fd:
                b, d, fd = d, c, fc
                c = b - _INV_PHI * (b - a)
                fc = nll(math.exp(c))
            else:
                a, c, fc = c, d, fd
                d = a + _INV_PHI * (b - a)
                fd = nll(math.exp(d))
        best_t = math.exp((a + b) / 2.0)
    best = nll(best_t)
    if t_min <= 1.0 <= t_max and nll_one <= best:
        best_t, best = 1.0, nll_one
    return TemperatureFit(best_t, nll_one, best, iterations)


def apply_temperature(pset: PredictionSet, t: float) -> PredictionSet:
    """New set with probs = softmax(logits / t).

    The stored logits become ``logits / t`` so that they still generate the
    stored probs; every other column is kept.
    """
    if not t > 0:
        raise ValidationError(f"temperature must be positive, got {t}")
    scaled = pset.require("logits") / t
    return pset.replace(probs=softmax(scaled), logits=scaled)


def smooth_targets(label: int, num_classes: int, epsilon: float) -> np.ndarray:
    """One-hot target mixed with the uniform distribution by weight ``epsilon``."""
    if not 0 <= label < num_classes:
        raise ValidationError(f"label {label} outside [0, {num_classes})")
    if not 0.0 <= epsilon < 1.0:
        raise ValidationError(f"epsilon must lie in [0, 1), got {epsilon}")
    target = np.full(num_classes, epsilon / num_classes)
    target[label] += 1.0 - epsilon
    return target


def ensemble_average(sets: Sequence[PredictionSet]) -> PredictionSet:
    """Member-wise mean of predicted distributions.

    Members must agree on ids, labels and K. Logits, features and override
    confidences do not survive averaging and are dropped.
    """
    if not sets:
        raise ValidationError("ensemble needs at least one member")
    first = sets[0]
    for j, s in enumerate(sets[1:], start=1):
        if s.num_classes != first.num_classes:
            raise ValidationError(f"member {j} has K={s.num_classes}, member 0 has K={first.num_classes}")
        if s.ids != first.ids:
            raise ValidationError(f"member {j} has a different id sequence")
        if not np.array_equal(s.labels, first.labels):
            bad = int(np.flatnonzero(s.labels != first.labels)[0])
            raise ValidationError(f"member {j} disagrees on the label of {first.ids[bad]!r}")
    probs = np.mean(np.stack([s.probs for s in sets]), axis=0)
    return PredictionSet(first.label_space, first.ids, probs, first.labels,
                         steps=first.steps, splits=first.splits)
