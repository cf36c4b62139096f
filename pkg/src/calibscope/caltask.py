"""Calibration-task data: "was the main model's prediction correct?"

Examples are built from a validation prediction set, optionally balanced by
downsampling the majority outcome, and stored one JSON object per line after
a single header line.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import EmptySetError, PredictionSet, ValidationError
from .rng import SeededStream

DEFAULT_TEMPLATE = ("{input}, the model's prediction is {prediction}, "
                    "is the prediction True or False? It's {mask}.")
DEFAULT_MASK = "<mask>"
FORMAT_TAG = "calibscope-caltask"
FORMAT_VERSION = 1

_KEYS = {"id", "input_ref", "prediction", "correct", "label", "features"}


@dataclass(frozen=True, eq=False)
class CalibrationExample:
    id: str
    input_ref: str
    prediction: int
    correct: bool
    label: Optional[int] = None
    features: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.features is not None:
            f = np.array(self.features, dtype=np.float64)
            f.setflags(write=False)
            object.__setattr__(self, "features", f)
        if self.label is not None and (self.prediction == self.label) != self.correct:
            raise ValidationError(
                f"example {self.id!r}: correct={self.correct} but prediction={self.prediction}, "
                f"label={self.label}")

    def __eq__(self, other):
        if not isinstance(other, CalibrationExample):
            return NotImplemented
        same_feats = (self.features is None and other.features is None) or (
            self.features is not None and other.features is not None
            and np.array_equal(self.features, other.features))
        return (self.id, self.input_ref, self.prediction, self.correct, self.label) == (
            other.id, other.input_ref, other.prediction, other.correct, other.label) and same_feats

    __hash__ = None


@dataclass(frozen=True)
class CalibrationDataset:
    examples: tuple[CalibrationExample, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "examples", tuple(self.examples))

    @property
    def positive_count(self) -> int:
        return sum(1 for e in self.examples if e.correct)

    @property
    def negative_count(self) -> int:
        return len(self.examples) - self.positive_count

    def __len__(self):
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def feature_matrix(self) -> np.ndarray:
        missing = [e.id for e in self.examples if e.features is None]
        if missing:
            raise ValidationError(f"example {missing[0]!r} has no features")
        return np.array([e.features for e in self.examples], dtype=np.float64).reshape(len(self), -1)

    def targets(self) -> np.ndarray:
        return np.array([e.correct for e in self.examples], dtype=np.float64)


def build_calibration_dataset(val: PredictionSet, seed: int, balance: bool = True) -> CalibrationDataset:
    """One example per validation record, optionally balanced.

    With ``balance`` the majority outcome is downsampled, uniformly without
    replacement, to the size of the minority outcome. Retained examples keep
    the source order.
    """
    if len(val) == 0:
        raise EmptySetError("empty validation set")
    pred = val.predictions()
    correct = val.correct()
    keep = np.arange(len(val))
    if balance:
        pos, neg = np.flatnonzero(correct), np.flatnonzero(~correct)
        if pos.size == 0:
            raise ValidationError("cannot balance: no correct predictions in the validation set")
        if neg.size == 0:
            raise ValidationError("cannot balance: no wrong predictions in the validation set")
        major, minor = (pos, neg) if pos.size >= neg.size else (neg, pos)
        picked = SeededStream(seed).choice(major, minor.size)
        keep = np.sort(np.concatenate([minor, picked]))
    feats = val.features
    examples = []
    for i in keep:
        f = None
        if feats is not None and not np.all(np.isnan(feats[i])):
            f = feats[i]
        examples.append(CalibrationExample(
            id=val.ids[i], input_ref=val.ids[i], prediction=int(pred[i]),
            correct=bool(correct[i]), label=int(val.labels[i]), features=f))
    return CalibrationDataset(tuple(examples))


def render_prompt(input_text: str, prediction_name: str, template: str = DEFAULT_TEMPLATE,
                  mask_token: str = DEFAULT_MASK) -> str:
    """Wrap an input and its predicted label into a True/False calibration prompt."""
    for ph in ("{input}", "{prediction}", "{mask}"):
        count = template.count(ph)
        if count != 1:
            raise ValidationError(f"template must contain {ph} exactly once (found {count})")
    values = {"input": input_text, "prediction": prediction_name, "mask": mask_token}
    # one pass, so placeholder-like text inside the values is left alone
    return re.sub(r"\{(input|prediction|mask)\}", lambda m: values[m.group(1)], template)


def _example_to_json(e: CalibrationExample) -> dict:
    obj = {"id": e.id, "input_ref": e.input_ref, "prediction": e.prediction, "correct": e.correct}
    if e.label is not None:
        obj["label"] = e.label
    if e.features is not None:
        obj["features"] = e.features.tolist()
    return obj


def export_calibration_dataset(ds: CalibrationDataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format": FORMAT_TAG, "version": FORMAT_VERSION}) + "\n")
        for e in ds.examples:
            fh.write(json.dumps(_example_to_json(e)) + "\n")


def load_calibration_dataset(path) -> CalibrationDataset:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValidationError(f"{path}: missing header line")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError:
        header = None
    if not isinstance(header, dict) or header.get("format") != FORMAT_TAG:
        raise ValidationError(f"{path}:1: not a calibration dataset header")
    if header.get("version") != FORMAT_VERSION:
        raise ValidationError(f"{path}:1: unsupported version {header.get('version')!r}")
    examples = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        where = f"{path}:{lineno}"
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{where}: malformed line ({exc.msg})") from None
        if not isinstance(obj, dict):
            raise ValidationError(f"{where}: expected an object")
        unknown = set(obj) - _KEYS
        missing = {"id", "input_ref", "prediction", "correct"} - set(obj)
        if unknown or missing:
            raise ValidationError(f"{where}: unknown keys {sorted(unknown)} / missing keys {sorted(missing)}")
        if not isinstance(obj["correct"], bool):
            raise ValidationError(f"{where}: 'correct' must be a boolean")
        for key in ("prediction", "label"):
            v = obj.get(key)
            if v is not None and (not isinstance(v, int) or isinstance(v, bool) or v < 0):
                raise ValidationError(f"{where}: {key!r} must be a non-negative integer")
        try:
            examples.append(CalibrationExample(
                str(obj["id"]), str(obj["input_ref"]), obj["prediction"], obj["correct"],
                label=obj.get("label"), features=obj.get("features")))
        except (ValidationError, ValueError, TypeError) as exc:
            raise ValidationError(f"{where}: {exc}") from None
    ids = [e.id for e in examples]
    if len(set(ids)) != len(ids):
        raise ValidationError(f"{path}: duplicate example ids")
    return CalibrationDataset(tuple(examples))
