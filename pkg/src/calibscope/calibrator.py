"""Learnable calibrators.

Two routes to a correctness probability:

* extrinsic: a separate MLP reads a record's feature vector (typically the
  main model's last hidden layer) and predicts whether the main prediction
  is right;
* intrinsic: one shared-trunk model with a main head and a calibration head,
  trained on both tasks either alternately (``iterative``) or on a summed
  loss (``simultaneous``).

All training is plain mini-batch gradient descent, ``w <- w - lr * g`` with
g the batch-mean gradient, shuffled by a seeded stream each epoch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from . import nn
from .caltask import CalibrationDataset
from .core import EmptySetError, LabeledData, LabelSpace, PredictionSet, ValidationError, softmax
from .rng import SeededStream

MODES = ("extrinsic", "iterative", "simultaneous")
DEFAULT_HIDDEN = 64

# sigmoid saturates to exactly 1.0 past z ~ 37; keep outputs inside the open interval
_PROB_FLOOR = np.nextafter(0.0, 1.0)
_PROB_CEIL = np.nextafter(1.0, 0.0)

# shuffle sub-streams, fixed so that main-only and iterative runs share main-task batches
_MAIN_STREAM = 1
_CAL_STREAM = 2


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    label_smoothing_epsilon: float = 0.0
    mode: str = "extrinsic"
    cal_learning_rate: Optional[float] = None  # defaults to learning_rate

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValidationError("learning_rate must be non-negative")
        if self.cal_learning_rate is not None and self.cal_learning_rate < 0:
            raise ValidationError("cal_learning_rate must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be positive")
        if not 0.0 <= self.label_smoothing_epsilon < 1.0:
            raise ValidationError("label_smoothing_epsilon must lie in [0, 1)")
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}")

    @property
    def cal_lr(self) -> float:
        return self.learning_rate if self.cal_learning_rate is None else self.cal_learning_rate


# -- extrinsic MLP --------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MLPCalibrator:
    layer_dims: tuple[int, ...]
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    activation: str = "relu"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        _check_dims(dims, out=1)
        if self.activation not in nn.ACTIVATIONS:
            raise ValidationError(f"activation must be one of {nn.ACTIVATIONS}")
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise ValidationError("one weight matrix and bias vector per layer expected")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[i + 1], dims[i]) or b.shape != (dims[i + 1],):
                raise ValidationError(f"layer {i} has weight {w.shape} / bias {b.shape}, "
                                      f"expected {(dims[i + 1], dims[i])} / {(dims[i + 1],)}")
        object.__setattr__(self, "weights", tuple(np.array(w, dtype=np.float64) for w in self.weights))
        object.__setattr__(self, "biases", tuple(np.array(b, dtype=np.float64) for b in self.biases))

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    def logit(self, X: np.ndarray) -> np.ndarray:
        z, _ = nn.dense_forward(self.weights, self.biases, X, self.activation)
        return z[:, 0]

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Probability of "prediction is correct" for each row of X."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise ValidationError(f"expected features of length {self.input_dim}, got shape {X.shape}")
        return np.clip(nn.sigmoid(self.logit(X)), _PROB_FLOOR, _PROB_CEIL)


def _check_dims(dims, out=None):
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ValidationError(f"layer dims must be >= 2 positive integers, got {list(dims)}")
    if out is not None and dims[-1] != out:
        raise ValidationError(f"last layer must have {out} output(s), got {dims[-1]}")


def mlp_dims(input_dim: int, hidden: int = DEFAULT_HIDDEN, layers: int = 2) -> list[int]:
    """[D, H, ..., H, 1] with ``layers`` affine layers."""
    return [input_dim] + [hidden] * (layers - 1) + [1]


def init_mlp(layer_dims: Sequence[int], activation: str = "relu", seed: int = 0) -> MLPCalibrator:
    _check_dims(layer_dims, out=1)
    weights, biases = nn.init_layers(list(layer_dims), seed)
    return MLPCalibrator(tuple(layer_dims), tuple(weights), tuple(biases), activation)


def forward(m: MLPCalibrator, features) -> float:
    """Correctness probability for a single feature vector."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 1 or x.size != m.input_dim:
        raise ValidationError(f"expected {m.input_dim} features, got {x.size}")
    return float(m.predict(x[None, :])[0])


def calibrator_loss_and_grads(m: MLPCalibrator, X: np.ndarray, target: np.ndarray):
    """Mean BCE of the calibrator on (X, soft targets) with its parameter gradients."""
    z, cache = nn.dense_forward(m.weights, m.biases, X, m.activation)
    loss, dz = nn.bce_with_logits(z, target)
    dws, dbs, _ = nn.dense_backward(m.weights, cache, dz, m.activation)
    return loss, dws, dbs


def _correctness_targets(correct: np.ndarray, epsilon: float) -> np.ndarray:
    # two-class smoothing of [wrong, right]; keep the "right" column
    return nn.one_hot(correct.astype(np.int64), 2, epsilon)[:, 1]


def train_calibrator(m: MLPCalibrator, ds: CalibrationDataset, cfg: TrainConfig):
    """Fit an extrinsic calibrator; returns (trained copy, per-epoch mean loss)."""
    if cfg.mode != "extrinsic":
        raise ValidationError("train_calibrator needs mode='extrinsic'; use train_multitask otherwise")
    if len(ds) == 0:
        raise EmptySetError("empty calibration dataset")
    X = ds.feature_matrix()
    if X.shape[1] != m.input_dim:
        raise ValidationError(f"calibrator expects {m.input_dim} features, dataset has {X.shape[1]}")
    target = _correctness_targets(ds.targets().astype(bool), cfg.label_smoothing_epsilon)
    weights = [w.copy() for w in m.weights]
    biases = [b.copy() for b in m.biases]
    stream = SeededStream(cfg.seed, _CAL_STREAM)
    trace = []
    for _ in range(cfg.epochs):
        losses = []
        for idx in nn.minibatches(len(ds), cfg.batch_size, stream):
            z, cache = nn.dense_forward(weights, biases, X[idx], m.activation)
            loss, dz = nn.bce_with_logits(z, target[idx])
            dws, dbs, _ = nn.dense_backward(weights, cache, dz, m.activation)
            losses.append(loss * idx.size)
            nn.sgd_step(weights, dws, cfg.learning_rate)
            nn.sgd_step(biases, dbs, cfg.learning_rate)
        trace.append(math.fsum(losses) / len(ds))
    return MLPCalibrator(m.layer_dims, tuple(weights), tuple(biases), m.activation), trace


def apply_calibrator(m: MLPCalibrator, pset: PredictionSet) -> PredictionSet:
    """Copy of ``pset`` whose confidence column is the calibrator's output.

    Probabilities and labels are untouched, so accuracy cannot change.
    """
    X = pset.require("features")
    if X.shape[1] != m.input_dim:
        raise ValidationError(f"calibrator expects {m.input_dim} features, set has {X.shape[1]}")
    return pset.replace(confidence=m.predict(X))


# -- intrinsic multi-task model -------------------------------------------------

@dataclass(frozen=True, eq=False)
class MultiTaskModel:
    """Shared trunk D -> H feeding a K-way main head and a correctness head.

    The correctness head reads the trunk output concatenated with the main
    head's softmax.
    """

    trunk_dims: tuple[int, ...]
    trunk_weights: tuple[np.ndarray, ...]
    trunk_biases: tuple[np.ndarray, ...]
    main_w: np.ndarray
    main_b: np.ndarray
    cal_w: np.ndarray
    cal_b: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.trunk_dims)
        object.__setattr__(self, "trunk_dims", dims)
        _check_dims(dims)
        h = dims[-1]
        k = self.main_w.shape[0]
        if k < 2 or self.main_w.shape != (k, h) or self.main_b.shape != (k,):
            raise ValidationError("main head must map the trunk width to K >= 2 classes")
        if self.cal_w.shape != (1, h + k) or self.cal_b.shape != (1,):
            raise ValidationError(f"calibration head must be (1, {h + k})")
        for i, (w, b) in enumerate(zip(self.trunk_weights, self.trunk_biases)):
            if w.shape != (dims[i + 1], dims[i]) or b.shape != (dims[i + 1],):
                raise ValidationError(f"trunk layer {i} has inconsistent shape")

    @property
    def num_classes(self) -> int:
        return self.main_w.shape[0]

    @property
    def input_dim(self) -> int:
        return self.trunk_dims[0]

    def params(self) -> list[np.ndarray]:
        return [*self.trunk_weights, *self.trunk_biases, self.main_w, self.main_b, self.cal_w, self.cal_b]

    def with_params(self, params: Sequence[np.ndarray]) -> "MultiTaskModel":
        n = len(self.trunk_weights)
        return replace(self, trunk_weights=tuple(params[:n]), trunk_biases=tuple(params[n:2 * n]),
                       main_w=params[2 * n], main_b=params[2 * n + 1],
                       cal_w=params[2 * n + 2], cal_b=params[2 * n + 3])

    def _forward(self, X):
        h, cache = nn.dense_forward(self.trunk_weights, self.trunk_biases, X, self.activation,
                                    activate_last=True)
        zm = h @ self.main_w.T + self.main_b
        p = softmax(zm)
        u = np.concatenate([h, p], axis=1)
        zc = u @ self.cal_w.T + self.cal_b
        return h, zm, p, u, zc, cache

    def predict(self, X):
        """(main-task class probabilities, correctness probability) per row."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise ValidationError(f"expected features of length {self.input_dim}, got shape {X.shape}")
        _, _, p, _, zc, _ = self._forward(X)
        return p, np.clip(nn.sigmoid(zc[:, 0]), _PROB_FLOOR, _PROB_CEIL)

    def main_logits(self, X):
        return self._forward(np.asarray(X, dtype=np.float64))[1]

    def hidden(self, X):
        return self._forward(np.asarray(X, dtype=np.float64))[0]


def init_multitask(input_dim: int, hidden: Sequence[int] | int, num_classes: int,
                   activation: str = "relu", seed: int = 0) -> MultiTaskModel:
    hidden = [hidden] if isinstance(hidden, int) else list(hidden)
    dims = [input_dim, *hidden]
    _check_dims(dims)
    if num_classes < 2:
        raise ValidationError("num_classes must be >= 2")
    tw, tb = nn.init_layers(dims, seed, stream=0)
    (mw,), (mb,) = nn.init_layers([dims[-1], num_classes], seed, stream=1)
    (cw,), (cb,) = nn.init_layers([dims[-1] + num_classes, 1], seed, stream=2)
    return MultiTaskModel(tuple(dims), tuple(tw), tuple(tb), mw, mb, cw, cb, activation)


def main_loss_and_grads(model: MultiTaskModel, X, y, epsilon: float = 0.0):
    """Main-task cross-entropy and gradients, aligned with ``model.params()``.

    The correctness head gets zero gradient.
    """
    h, zm, p, u, zc, cache = model._forward(X)
    loss, dzm = nn.softmax_cross_entropy(zm, nn.one_hot(y, model.num_classes, epsilon))
    dh = dzm @ model.main_w
    dws, dbs, _ = nn.dense_backward(model.trunk_weights, cache, dh, model.activation, activate_last=True)
    grads = [*dws, *dbs, dzm.T @ h, dzm.sum(axis=0), np.zeros_like(model.cal_w), np.zeros_like(model.cal_b)]
    return loss, grads


def cal_loss_and_grads(model: MultiTaskModel, X, correct, epsilon: float = 0.0):
    """Correctness BCE and gradients, aligned with ``model.params()``.

    Gradients reach the main head through the softmax the correctness head
    conditions on, and the trunk through both paths.
    """
    h, zm, p, u, zc, cache = model._forward(X)
    loss, dzc = nn.bce_with_logits(zc, _correctness_targets(np.asarray(correct, bool), epsilon))
    du = dzc @ model.cal_w
    hdim = h.shape[1]
    dp = du[:, hdim:]
    dzm = p * (dp - np.sum(p * dp, axis=1, keepdims=True))
    dh = du[:, :hdim] + dzm @ model.main_w
    dws, dbs, _ = nn.dense_backward(model.trunk_weights, cache, dh, model.activation, activate_last=True)
    grads = [*dws, *dbs, dzm.T @ h, dzm.sum(axis=0), dzc.T @ u, dzc.sum(axis=0)]
    return loss, grads


def _check_task_data(model: MultiTaskModel, main_data: LabeledData, cal_data: Optional[CalibrationDataset]):
    if len(main_data) == 0:
        raise EmptySetError("empty main-task dataset")
    if main_data.dim != model.input_dim:
        raise ValidationError(f"model expects {model.input_dim} features, main data has {main_data.dim}")
    if main_data.num_classes != model.num_classes:
        raise ValidationError(f"model has {model.num_classes} classes, main data has {main_data.num_classes}")
    if cal_data is not None:
        if len(cal_data) == 0:
            raise EmptySetError("empty calibration dataset")
        Xc = cal_data.feature_matrix()
        if Xc.shape[1] != model.input_dim:
            raise ValidationError(f"model expects {model.input_dim} features, calibration data has {Xc.shape[1]}")


def _main_epoch(params, model, data, cfg, stream):
    for idx in nn.minibatches(len(data), cfg.batch_size, stream):
        _, grads = main_loss_and_grads(model.with_params(params), data.X[idx], data.y[idx],
                                       cfg.label_smoothing_epsilon)
        nn.sgd_step(params, grads, cfg.learning_rate)


def train_main_only(model: MultiTaskModel, main_data: LabeledData, cfg: TrainConfig) -> MultiTaskModel:
    """Vanilla main-task training of the shared-trunk model (correctness head untouched)."""
    _check_task_data(model, main_data, None)
    params = [p.copy() for p in model.params()]
    stream = SeededStream(cfg.seed, _MAIN_STREAM)
    for _ in range(cfg.epochs):
        _main_epoch(params, model, main_data, cfg, stream)
    return model.with_params(params)


def train_multitask(model: MultiTaskModel, main_data: LabeledData, cal_data: CalibrationDataset,
                    cfg: TrainConfig) -> MultiTaskModel:
    """Train both heads of ``model``.

    ``iterative``: ``cfg.epochs`` rounds of one main-task epoch followed by
    one calibration epoch (at ``cfg.cal_lr``). ``simultaneous``: each step
    descends main loss + calibration loss on a pair of batches; an epoch
    covers the larger dataset once and the smaller one is cycled with fresh
    shuffles.
    """
    if cfg.mode not in ("iterative", "simultaneous"):
        raise ValidationError("train_multitask needs mode 'iterative' or 'simultaneous'")
    _check_task_data(model, main_data, cal_data)
    Xc = cal_data.feature_matrix()
    correct = cal_data.targets().astype(bool)
    eps = cfg.label_smoothing_epsilon
    params = [p.copy() for p in model.params()]
    main_stream = SeededStream(cfg.seed, _MAIN_STREAM)
    cal_stream = SeededStream(cfg.seed, _CAL_STREAM)

    if cfg.mode == "iterative":
        for _ in range(cfg.epochs):
            _main_epoch(params, model, main_data, cfg, main_stream)
            for idx in nn.minibatches(len(cal_data), cfg.batch_size, cal_stream):
                _, grads = cal_loss_and_grads(model.with_params(params), Xc[idx], correct[idx], eps)
                nn.sgd_step(params, grads, cfg.cal_lr)
        return model.with_params(params)

    main_batches: list = []
    cal_batches: list = []
    n_steps = max(math.ceil(len(main_data) / cfg.batch_size), math.ceil(len(cal_data) / cfg.batch_size))
    for _ in range(cfg.epochs):
        for _ in range(n_steps):
            if not main_batches:
                main_batches = nn.minibatches(len(main_data), cfg.batch_size, main_stream)
            if not cal_batches:
                cal_batches = nn.minibatches(len(cal_data), cfg.batch_size, cal_stream)
            mi, ci = main_batches.pop(0), cal_batches.pop(0)
            current = model.with_params(params)
            _, g_main = main_loss_and_grads(current, main_data.X[mi], main_data.y[mi], eps)
            _, g_cal = cal_loss_and_grads(current, Xc[ci], correct[ci], eps)
            nn.sgd_step(params, g_main, cfg.learning_rate)
            nn.sgd_step(params, g_cal, cfg.cal_lr)
    return model.with_params(params)


def apply_multitask(model: MultiTaskModel, data: LabeledData,
                    label_space=None) -> PredictionSet:
    """Prediction set from the main head, with the correctness head as confidence."""
    probs, conf = model.predict(data.X)
    return PredictionSet(label_space or LabelSpace(model.num_classes), data.ids, probs, data.y,
                         logits=model.main_logits(data.X), features=model.hidden(data.X),
                         confidence=conf)


# -- weight files ------------------------------------------------------------------

WEIGHTS_MAGIC = "calibscope-weights"
WEIGHTS_VERSION = 1


def _write_array(fh, name: str, a: np.ndarray):
    a = np.atleast_2d(a) if a.ndim == 2 else a.reshape(-1, 1)
    fh.write(f"array {name} {a.shape[0]} {a.shape[1]}\n")
    for row in a:
        fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def save_model(model, path) -> None:
    """Decimal text: a header, the layer dims, then each array row-major."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{WEIGHTS_MAGIC} {WEIGHTS_VERSION}\n")
        if isinstance(model, MLPCalibrator):
            fh.write("kind mlp\n")
            fh.write(f"activation {model.activation}\n")
            fh.write("dims " + " ".join(map(str, model.layer_dims)) + "\n")
            for i, (w, b) in enumerate(zip(model.weights, model.biases)):
                _write_array(fh, f"W{i}", w)
                _write_array(fh, f"b{i}", b)
        elif isinstance(model, MultiTaskModel):
            fh.write("kind multitask\n")
            fh.write(f"activation {model.activation}\n")
            fh.write("dims " + " ".join(map(str, model.trunk_dims)) + f" {model.num_classes}\n")
            for i, (w, b) in enumerate(zip(model.trunk_weights, model.trunk_biases)):
                _write_array(fh, f"W{i}", w)
                _write_array(fh, f"b{i}", b)
            for name in ("main_w", "main_b", "cal_w", "cal_b"):
                _write_array(fh, name, getattr(model, name))
        else:
            raise TypeError(f"cannot serialize {type(model).__name__}")


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    pos = 0

    def take(prefix):
        nonlocal pos
        if pos >= len(lines) or not lines[pos].startswith(prefix + " "):
            raise ValidationError(f"{path}:{pos + 1}: expected {prefix!r}")
        pos += 1
        return lines[pos - 1].split()[1:]

    magic = take(WEIGHTS_MAGIC)
    if magic != [str(WEIGHTS_VERSION)]:
        raise ValidationError(f"{path}: unsupported weights version {magic}")
    kind = take("kind")[0]
    activation = take("activation")[0]
    dims = [int(d) for d in take("dims")]
    arrays = {}
    while pos < len(lines):
        if not lines[pos].strip():
            pos += 1
            continue
        name, rows, cols = take("array")
        rows, cols = int(rows), int(cols)
        try:
            block = [[float(v) for v in lines[pos + r].split()] for r in range(rows)]
            a = np.array(block, dtype=np.float64).reshape(rows, cols)
        except (IndexError, ValueError):
            raise ValidationError(f"{path}:{pos + 1}: malformed array {name!r}") from None
        pos += rows
        arrays[name] = a
    try:
        if kind == "mlp":
            n = len(dims) - 1
            return MLPCalibrator(tuple(dims), tuple(arrays[f"W{i}"] for i in range(n)),
                                 tuple(arrays[f"b{i}"].reshape(-1) for i in range(n)), activation)
        if kind == "multitask":
            trunk = dims[:-1]
            n = len(trunk) - 1
            return MultiTaskModel(tuple(trunk), tuple(arrays[f"W{i}"] for i in range(n)),
                                  tuple(arrays[f"b{i}"].reshape(-1) for i in range(n)),
                                  arrays["main_w"], arrays["main_b"].reshape(-1),
                                  arrays["cal_w"], arrays["cal_b"].reshape(-1), activation)
    except KeyError as exc:
        raise ValidationError(f"{path}: missing array {exc.args[0]!r}") from None
    raise ValidationError(f"{path}: unknown model kind {kind!r}")
