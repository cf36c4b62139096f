"""Prediction records, prediction sets and the line-delimited log format.

A :class:`PredictionSet` stores its records column-wise in numpy arrays so
that metric computation over 10^5 records stays vectorized; individual
:class:`PredictionRecord` objects are materialized on demand.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

PROB_SUM_TOL = 1e-6
SOFTMAX_TOL = 1e-5
SPLITS = ("train", "validation", "test")

_REQUIRED_KEYS = {"id", "probs", "label"}
_OPTIONAL_KEYS = {"logits", "features", "confidence", "step", "split"}


class CalibrationError(ValueError):
    """Base class for data errors raised by this package."""


class ValidationError(CalibrationError):
    """A record or file violates the data model."""


class EmptySetError(CalibrationError):
    def __init__(self, what: str = "empty prediction set"):
        super().__init__(what)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def _frozen(a: Optional[np.ndarray]) -> Optional[np.ndarray]:
    if a is not None:
        a.setflags(write=False)
    return a


@dataclass(frozen=True)
class LabelSpace:
    num_classes: int
    class_names: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        if int(self.num_classes) != self.num_classes or self.num_classes < 2:
            raise ValidationError(f"num_classes must be an integer >= 2, got {self.num_classes}")
        if self.class_names is not None:
            names = tuple(self.class_names)
            object.__setattr__(self, "class_names", names)
            if len(names) != self.num_classes:
                raise ValidationError(
                    f"class_names has {len(names)} entries for {self.num_classes} classes")
            if len(set(names)) != len(names):
                raise ValidationError("class_names must be unique")

    def name(self, k: int) -> str:
        return self.class_names[k] if self.class_names else str(k)


@dataclass(frozen=True, eq=False)
class PredictionRecord:
    """One example's predicted distribution and gold label."""

    id: str
    probs: np.ndarray
    label: int
    logits: Optional[np.ndarray] = None
    features: Optional[np.ndarray] = None
    override_confidence: Optional[float] = None
    step: Optional[int] = None
    split: Optional[str] = None

    def __post_init__(self):
        for name in ("probs", "logits", "features"):
            value = getattr(self, name)
            if value is not None:
                arr = np.array(value, dtype=np.float64)
                object.__setattr__(self, name, _frozen(arr))
        _check_record(self.id, self.probs, self.label, self.logits,
                      self.override_confidence, self.step, self.split)

    def __eq__(self, other):
        if not isinstance(other, PredictionRecord):
            return NotImplemented
        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and bool(np.array_equal(a, b))
        return (self.id == other.id and self.label == other.label
                and same(self.probs, other.probs) and same(self.logits, other.logits)
                and same(self.features, other.features)
                and self.override_confidence == other.override_confidence
                and self.step == other.step and self.split == other.split)

    __hash__ = None


def _check_record(rid, probs, label, logits, override, step, split, num_classes=None):
    k = probs.shape[-1] if probs.ndim == 1 else -1
    if probs.ndim != 1 or k < 2:
        raise ValidationError(f"record {rid!r}: probs must be a vector of at least 2 entries")
    if num_classes is not None and k != num_classes:
        raise ValidationError(f"record {rid!r}: probs has {k} entries, label space has {num_classes}")
    if not np.all(np.isfinite(probs)) or np.any(probs < 0):
        raise ValidationError(f"record {rid!r}: probs must be finite and non-negative")
    if abs(math.fsum(probs) - 1.0) > PROB_SUM_TOL:
        raise ValidationError(f"record {rid!r}: probs sum to {math.fsum(probs):.6g}, not 1")
    if isinstance(label, bool) or int(label) != label or not 0 <= label < k:
        raise ValidationError(f"record {rid!r}: label {label!r} outside [0, {k})")
    if logits is not None:
        if logits.shape != probs.shape or not np.all(np.isfinite(logits)):
            raise ValidationError(f"record {rid!r}: logits must be {k} finite reals")
        if np.max(np.abs(softmax(logits) - probs)) > SOFTMAX_TOL:
            raise ValidationError(f"record {rid!r}: softmax(logits) disagrees with probs")
    if override is not None and not 0.0 <= override <= 1.0:
        raise ValidationError(f"record {rid!r}: confidence {override} outside [0, 1]")
    if step is not None and (isinstance(step, bool) or int(step) != step or step < 0):
        raise ValidationError(f"record {rid!r}: step must be a non-negative integer")
    if split is not None and split not in SPLITS:
        raise ValidationError(f"record {rid!r}: split {split!r} not one of {SPLITS}")


def record_confidence(r: PredictionRecord) -> float:
    """Calibrator-supplied confidence when present, else the max probability."""
    if r.override_confidence is not None:
        return float(r.override_confidence)
    return float(np.max(r.probs))


def record_correct(r: PredictionRecord) -> bool:
    # np.argmax returns the first maximum, i.e. ties go to the lowest index
    return int(np.argmax(r.probs)) == r.label


class PredictionSet:
    """Ordered, immutable collection of predictions over one label space.

    Optional per-record fields are stored as full columns with a sentinel for
    "absent": NaN rows for ``logits``/``features``, NaN for ``confidence``,
    -1 for ``steps`` and ``None`` for ``splits``. A column that is absent for
    every record is stored as ``None``.
    """

    def __init__(self, label_space: LabelSpace, ids: Sequence[str], probs, labels,
                 logits=None, features=None, confidence=None, steps=None, splits=None,
                 validate: bool = True):
        self.label_space = label_space
        self.ids = tuple(str(i) for i in ids)
        n = len(self.ids)
        k = label_space.num_classes
        self.probs = _frozen(np.array(probs, dtype=np.float64).reshape(n, k) if n else np.zeros((0, k)))
        self.labels = _frozen(np.array(labels, dtype=np.int64).reshape(n))
        self.logits = _frozen(_column(logits, (n, k)))
        self.features = _frozen(_column(features, (n, -1)))
        self.confidence = _frozen(_column(confidence, (n,)))
        self.steps = None if steps is None or np.all(np.asarray(steps) < 0) else _frozen(
            np.array(steps, dtype=np.int64).reshape(n))
        self.splits = None if splits is None or all(s is None for s in splits) else tuple(splits)
        if validate:
            self._validate()

    # -- construction -----------------------------------------------------

    @classmethod
    def from_records(cls, label_space: LabelSpace, records: Iterable[PredictionRecord]) -> "PredictionSet":
        records = list(records)
        n, k = len(records), label_space.num_classes
        dims = {r.features.shape[0] for r in records if r.features is not None}
        if len(dims) > 1:
            raise ValidationError(f"records carry features of differing lengths {sorted(dims)}")
        d = dims.pop() if dims else 0
        logits = np.full((n, k), np.nan)
        feats = np.full((n, d), np.nan)
        conf = np.full(n, np.nan)
        steps = np.full(n, -1, dtype=np.int64)
        for i, r in enumerate(records):
            if r.probs.shape != (k,):
                raise ValidationError(f"record {r.id!r}: probs has {r.probs.size} entries, label space has {k}")
            if r.logits is not None:
                logits[i] = r.logits
            if r.features is not None:
                feats[i] = r.features
            if r.override_confidence is not None:
                conf[i] = r.override_confidence
            if r.step is not None:
                steps[i] = r.step
        return cls(label_space, [r.id for r in records],
                   np.array([r.probs for r in records]).reshape(n, k),
                   [r.label for r in records],
                   logits=logits, features=feats if d else None, confidence=conf,
                   steps=steps, splits=[r.split for r in records])

    def replace(self, **columns) -> "PredictionSet":
        """Copy with some columns swapped out; unspecified columns are shared."""
        kw = dict(ids=self.ids, probs=self.probs, labels=self.labels, logits=self.logits,
                  features=self.features, confidence=self.confidence, steps=self.steps,
                  splits=self.splits)
        kw.update(columns)
        return PredictionSet(self.label_space, **kw)

    def subset(self, indices) -> "PredictionSet":
        idx = np.asarray(indices, dtype=np.int64)
        pick = lambda a: None if a is None else a[idx]
        return PredictionSet(
            self.label_space, [self.ids[i] for i in idx], self.probs[idx], self.labels[idx],
            logits=pick(self.logits), features=pick(self.features),
            confidence=pick(self.confidence), steps=pick(self.steps),
            splits=None if self.splits is None else [self.splits[i] for i in idx],
            validate=False)

    def _validate(self):
        n, k = self.probs.shape
        if len(set(self.ids)) != n:
            seen = set()
            dup = next(i for i in self.ids if i in seen or seen.add(i))
            raise ValidationError(f"duplicate record id {dup!r}")

        def fail(mask, message):
            bad = np.flatnonzero(mask)
            if bad.size:
                raise ValidationError(f"record {self.ids[bad[0]]!r}: {message}")

        fail(~np.all(np.isfinite(self.probs), axis=1) | np.any(self.probs < 0, axis=1),
             "probs must be finite and non-negative")
        fail(np.abs(self.probs.sum(axis=1) - 1.0) > PROB_SUM_TOL, "probs do not sum to 1")
        fail((self.labels < 0) | (self.labels >= k), f"label outside [0, {k})")
        if self.logits is not None:
            present = ~np.all(np.isnan(self.logits), axis=1)
            fail(present & ~np.all(np.isfinite(self.logits), axis=1), "logits must be finite")
            if present.any():
                diff = np.zeros(n)
                diff[present] = np.max(np.abs(softmax(self.logits[present]) - self.probs[present]), axis=1)
                fail(diff > SOFTMAX_TOL, "softmax(logits) disagrees with probs")
        if self.features is not None:
            rows = np.isnan(self.features)
            fail(np.any(rows, axis=1) & ~np.all(rows, axis=1), "features contain NaN")
            fail(np.any(np.isinf(self.features), axis=1), "features must be finite")
        if self.confidence is not None:
            c = self.confidence
            fail(~np.isnan(c) & ((c < 0) | (c > 1)), "confidence outside [0, 1]")
        if self.splits is not None:
            if len(self.splits) != n:
                raise ValidationError("splits column length differs from record count")
            fail(np.array([s is not None and s not in SPLITS for s in self.splits]),
                 f"split not one of {SPLITS}")

    # -- access -------------------------------------------------------------

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def num_classes(self) -> int:
        return self.label_space.num_classes

    def __getitem__(self, i: int) -> PredictionRecord:
        def row(a):
            if a is None or np.all(np.isnan(a[i])):
                return None
            return a[i]
        conf = None if self.confidence is None or np.isnan(self.confidence[i]) else float(self.confidence[i])
        step = None if self.steps is None or self.steps[i] < 0 else int(self.steps[i])
        return PredictionRecord(
            self.ids[i], self.probs[i], int(self.labels[i]), logits=row(self.logits),
            features=row(self.features), override_confidence=conf, step=step,
            split=None if self.splits is None else self.splits[i])

    def __iter__(self) -> Iterator[PredictionRecord]:
        return (self[i] for i in range(len(self)))

    @property
    def records(self) -> list[PredictionRecord]:
        return list(self)

    def predictions(self) -> np.ndarray:
        return np.argmax(self.probs, axis=1)

    def correct(self) -> np.ndarray:
        """Vectorized :func:`record_correct`."""
        return self.predictions() == self.labels

    def confidences(self, use_override: bool = True) -> np.ndarray:
        """Vectorized :func:`record_confidence`."""
        conf = np.max(self.probs, axis=1) if len(self) else np.zeros(0)
        if use_override and self.confidence is not None:
            conf = np.where(np.isnan(self.confidence), conf, self.confidence)
        return conf

    def rows_missing(self, column: str) -> np.ndarray:
        a = getattr(self, column)
        if a is None:
            return np.ones(len(self), dtype=bool)
        return np.all(np.isnan(a), axis=1)

    def require(self, column: str) -> np.ndarray:
        """The column as a dense array, or a ValidationError naming the first id lacking it."""
        missing = self.rows_missing(column)
        if missing.any():
            rid = self.ids[int(np.flatnonzero(missing)[0])]
            raise ValidationError(f"record {rid!r} has no {column}")
        return getattr(self, column)

    def __repr__(self):
        return f"PredictionSet(n={len(self)}, K={self.num_classes})"


def _column(a, shape) -> Optional[np.ndarray]:
    if a is None:
        return None
    arr = np.array(a, dtype=np.float64)
    n = shape[0]
    if n == 0:
        return None
    arr = arr.reshape(shape)
    if np.all(np.isnan(arr)):
        return None
    return arr


# -- line-delimited log format ------------------------------------------------

def _number_list(value, key, where):
    if not isinstance(value, list) or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
        raise ValidationError(f"{where}: {key!r} must be an array of numbers")
    return value


def parse_record(obj, where: str = "record") -> PredictionRecord:
    """Turn one decoded log object into a validated record."""
    if not isinstance(obj, dict):
        raise ValidationError(f"{where}: expected an object")
    keys = set(obj)
    if keys - _REQUIRED_KEYS - _OPTIONAL_KEYS:
        raise ValidationError(f"{where}: unknown keys {sorted(keys - _REQUIRED_KEYS - _OPTIONAL_KEYS)}")
    if _REQUIRED_KEYS - keys:
        raise ValidationError(f"{where}: missing keys {sorted(_REQUIRED_KEYS - keys)}")
    if not isinstance(obj["id"], str):
        raise ValidationError(f"{where}: 'id' must be a string")
    label = obj["label"]
    if not isinstance(label, int) or isinstance(label, bool):
        raise ValidationError(f"{where}: 'label' must be an integer")
    conf = obj.get("confidence")
    if conf is not None and (not isinstance(conf, (int, float)) or isinstance(conf, bool)):
        raise ValidationError(f"{where}: 'confidence' must be a number")
    step = obj.get("step")
    if step is not None and (not isinstance(step, int) or isinstance(step, bool)):
        raise ValidationError(f"{where}: 'step' must be an integer")
    try:
        return PredictionRecord(
            obj["id"], _number_list(obj["probs"], "probs", where), label,
            logits=_number_list(obj["logits"], "logits", where) if "logits" in obj else None,
            features=_number_list(obj["features"], "features", where) if "features" in obj else None,
            override_confidence=None if conf is None else float(conf),
            step=step, split=obj.get("split"))
    except ValidationError as exc:
        raise ValidationError(f"{where}: {exc}") from None


def load_prediction_set(path, label_space: Optional[LabelSpace] = None) -> PredictionSet:
    """Read a prediction log; the label space defaults to K inferred from the first record."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: malformed line ({exc.msg})") from None
            rec = parse_record(obj, where=f"{path}:{lineno}")
            if label_space is None:
                label_space = LabelSpace(rec.probs.size)
            if rec.probs.size != label_space.num_classes:
                raise ValidationError(
                    f"{path}:{lineno}: record {rec.id!r} has {rec.probs.size} probs, "
                    f"label space has {label_space.num_classes}")
            records.append(rec)
    if label_space is None:
        label_space = LabelSpace(2)
    return PredictionSet.from_records(label_space, records)


def record_to_json(r: PredictionRecord) -> dict:
    obj = {"id": r.id, "probs": r.probs.tolist(), "label": r.label}
    if r.logits is not None:
        obj["logits"] = r.logits.tolist()
    if r.features is not None:
        obj["features"] = r.features.tolist()
    if r.override_confidence is not None:
        obj["confidence"] = r.override_confidence
    if r.step is not None:
        obj["step"] = r.step
    if r.split is not None:
        obj["split"] = r.split
    return obj


def save_prediction_set(pset: PredictionSet, path) -> None:
    # json writes floats with repr(), which round-trips float64 exactly
    with open(path, "w", encoding="utf-8") as fh:
        for r in pset:
            fh.write(json.dumps(record_to_json(r)) + "\n")


def sets_equal(a: PredictionSet, b: PredictionSet, atol: float = 0.0) -> bool:
    if a.label_space != b.label_space or a.ids != b.ids or not np.array_equal(a.labels, b.labels):
        return False
    for name in ("probs", "logits", "features", "confidence"):
        x, y = getattr(a, name), getattr(b, name)
        if (x is None) != (y is None):
            return False
        if x is not None and (x.shape != y.shape or not np.allclose(x, y, rtol=0, atol=atol, equal_nan=True)):
            return False
    same_steps = (a.steps is None and b.steps is None) or (
        a.steps is not None and b.steps is not None and np.array_equal(a.steps, b.steps))
    return same_steps and a.splits == b.splits


@dataclass(frozen=True, eq=False)
class LabeledData:
    """Feature vectors with class labels: the input side of a toy main task."""

    X: np.ndarray
    y: np.ndarray
    num_classes: int
    ids: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        X = np.array(self.X, dtype=np.float64)
        y = np.array(self.y, dtype=np.int64).reshape(-1)
        if X.ndim != 2 or X.shape[0] != y.size:
            raise ValidationError(f"X must be (n, D) with n = len(y); got {X.shape} and {y.size} labels")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValidationError(f"labels must lie in [0, {self.num_classes})")
        if not np.all(np.isfinite(X)):
            raise ValidationError("features must be finite")
        ids = tuple(self.ids) if self.ids is not None else tuple(f"x{i}" for i in range(y.size))
        if len(ids) != y.size or len(set(ids)) != y.size:
            raise ValidationError("ids must be unique, one per row")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "ids", ids)

    def __len__(self):
        return self.y.size

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def subset(self, indices) -> "LabeledData":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledData(self.X[idx], self.y[idx], self.num_classes, [self.ids[i] for i in idx])


def save_labeled_data(data: LabeledData, path) -> None:
    """One ``{"id", "features", "label"}`` object per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for rid, x, y in zip(data.ids, data.X, data.y):
            fh.write(json.dumps({"id": rid, "features": x.tolist(), "label": int(y)}) + "\n")


def load_labeled_data(path, num_classes: Optional[int] = None) -> LabeledData:
    ids, xs, ys = [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{where}: malformed line ({exc.msg})") from None
            if not isinstance(obj, dict) or set(obj) != {"id", "features", "label"}:
                raise ValidationError(f"{where}: expected exactly the keys id, features, label")
            label = obj["label"]
            if not isinstance(label, int) or isinstance(label, bool) or label < 0:
                raise ValidationError(f"{where}: 'label' must be a non-negative integer")
            ids.append(str(obj["id"]))
            xs.append(_number_list(obj["features"], "features", where))
            ys.append(label)
    if not ys:
        raise EmptySetError(f"{path}: empty dataset")
    if len({len(x) for x in xs}) != 1:
        raise ValidationError(f"{path}: feature vectors differ in length")
    k = num_classes if num_classes is not None else max(2, max(ys) + 1)
    return LabeledData(np.array(xs), np.array(ys), k, ids)
