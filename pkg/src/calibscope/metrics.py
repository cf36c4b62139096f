"""Accuracy, confidence, ECE and the correct/wrong confidence split.

ECE defaults to 100 equal-mass bins over max-probability confidence.
Confidence comes from :meth:`PredictionSet.confidences`, so a calibrator's
override column is picked up automatically unless ``use_override=False``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np

from .core import EmptySetError, PredictionSet, ValidationError

EQUAL_MASS = "equal_mass"
EQUAL_WIDTH = "equal_width"
BINNINGS = (EQUAL_MASS, EQUAL_WIDTH)


@dataclass(frozen=True)
class MetricsReport:
    acc: float
    conf: float
    ece: float
    conf_pos: Optional[float]
    conf_neg: Optional[float]
    cerr_pos: Optional[float]
    cerr_neg: Optional[float]
    mean_entropy: float
    n: int

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ReliabilityBin:
    lo: float
    hi: float
    count: int
    mean_conf: float
    accuracy: float

    @property
    def gap(self) -> float:
        return abs(self.accuracy - self.mean_conf)


def _mean(x: np.ndarray) -> float:
    # fsum is exactly rounded, so the result does not depend on summation order
    return math.fsum(x) / len(x)


def entropy(probs) -> float:
    """Shannon entropy in nats, with 0 ln 0 taken as 0."""
    p = np.asarray(probs, dtype=np.float64)
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz))) + 0.0


def entropies(probs: np.ndarray) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=-1) + 0.0


def _check_binning(bins: int, binning: str):
    if int(bins) != bins or bins < 1:
        raise ValidationError(f"bins must be a positive integer, got {bins}")
    if binning not in BINNINGS:
        raise ValidationError(f"binning must be one of {BINNINGS}, got {binning!r}")


def bin_assignments(conf: np.ndarray, bins: int, binning: str = EQUAL_MASS) -> list[np.ndarray]:
    """Record indices of each nonempty bin, ordered by bin position.

    Equal-mass bins sort by confidence (stable, so ties keep input order) and
    cut into min(bins, N) contiguous groups whose sizes differ by at most one,
    larger groups first. Equal-width bins are right-closed, except the first
    which also includes 0.
    """
    _check_binning(bins, binning)
    n = len(conf)
    if binning == EQUAL_MASS:
        order = np.argsort(conf, kind="stable")
        return [g for g in np.array_split(order, min(bins, n)) if g.size]
    edges = np.linspace(0.0, 1.0, bins + 1)
    idx = np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, bins - 1)
    order = np.argsort(idx, kind="stable")
    cuts = np.searchsorted(idx[order], np.arange(1, bins))
    return [g for g in np.split(order, cuts) if g.size]


def reliability_diagram(pset: PredictionSet, bins: int = 100, binning: str = EQUAL_MASS,
                        use_override: bool = True) -> list[ReliabilityBin]:
    if len(pset) == 0:
        raise EmptySetError()
    conf = pset.confidences(use_override)
    correct = pset.correct().astype(np.float64)
    out = []
    edges = np.linspace(0.0, 1.0, bins + 1) if binning == EQUAL_WIDTH else None
    for group in bin_assignments(conf, bins, binning):
        c = conf[group]
        if edges is not None:
            b = min(max(int(np.searchsorted(edges, c[0], side="left")) - 1, 0), bins - 1)
            lo, hi = float(edges[b]), float(edges[b + 1])
        else:
            lo, hi = float(c.min()), float(c.max())
        out.append(ReliabilityBin(lo, hi, int(group.size), _mean(c), _mean(correct[group])))
    return out


def ece_from_bins(diagram: list[ReliabilityBin]) -> float:
    n = sum(b.count for b in diagram)
    return math.fsum(b.count / n * b.gap for b in diagram)


def ece(pset: PredictionSet, bins: int = 100, binning: str = EQUAL_MASS,
        use_override: bool = True) -> float:
    """Count-weighted mean |accuracy - confidence| over nonempty bins."""
    return ece_from_bins(reliability_diagram(pset, bins, binning, use_override))


def compute_metrics(pset: PredictionSet, bins: int = 100, binning: str = EQUAL_MASS,
                    use_override: bool = True) -> MetricsReport:
    """All summary metrics for one prediction set.

    ``conf_pos``/``conf_neg`` (and their calibration errors) are ``None``
    when there are no correct, respectively no wrong, predictions.
    """
    if len(pset) == 0:
        raise EmptySetError()
    conf = pset.confidences(use_override)
    correct = pset.correct()
    conf_pos = _mean(conf[correct]) if correct.any() else None
    conf_neg = _mean(conf[~correct]) if (~correct).any() else None
    return MetricsReport(
        acc=float(np.count_nonzero(correct)) / len(pset),
        conf=_mean(conf),
        ece=ece(pset, bins, binning, use_override),
        conf_pos=conf_pos,
        conf_neg=conf_neg,
        cerr_pos=None if conf_pos is None else 1.0 - conf_pos,
        cerr_neg=conf_neg,
        mean_entropy=_mean(entropies(pset.probs)),
        n=len(pset),
    )


def conf_from_errors(acc: float, cerr_pos: float, cerr_neg: float) -> float:
    """Overall confidence implied by accuracy and the two calibration errors."""
    return acc * (1.0 - cerr_pos) + (1.0 - acc) * cerr_neg
