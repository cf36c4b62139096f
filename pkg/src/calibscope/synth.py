"""Synthetic prediction sets and a toy main-task classifier.

The generators double as test oracles: ``gen_calibrated`` has population
ECE exactly 0 by construction, ``gen_overconfident`` is that same set pushed
through a known temperature, and ``gen_predictable_correctness`` makes
correctness linearly decodable from the features while the published
confidence stays flat.
"""

from __future__ import annotations

import numpy as np

from . import nn
from .core import LabeledData, LabelSpace, PredictionSet, ValidationError, softmax
from .rng import SeededStream

KINDS = ("calibrated", "overconfident", "predictable_correctness", "gaussian_mixture")


def _calibrated_draws(n: int, k: int, seed: int):
    if n < 1:
        raise ValidationError("n must be >= 1")
    if k < 2:
        raise ValidationError("K must be >= 2")
    rs = SeededStream(seed)
    conf = rs.uniform(n, 1.0 / k, 1.0)
    pred = rs.integers(n, k)
    hit = rs.uniform(n) < conf
    other = rs.integers(n, k - 1)
    other = other + (other >= pred)  # uniform over the k - 1 classes that are not pred
    labels = np.where(hit, pred, other)
    probs = np.repeat(((1.0 - conf) / (k - 1))[:, None], k, axis=1)
    probs[np.arange(n), pred] = conf
    return probs, labels


def _ids(n, prefix="r"):
    width = len(str(n - 1))
    return [f"{prefix}{i:0{width}d}" for i in range(n)]


def gen_calibrated(n: int, K: int, seed: int) -> PredictionSet:
    """Perfectly calibrated predictions.

    Confidence c ~ U[1/K, 1] goes to a uniformly chosen class and the rest is
    spread evenly; the label is then drawn from that same distribution, so
    P(correct | c) = c.
    """
    probs, labels = _calibrated_draws(n, K, seed)
    logits = np.log(probs)
    return PredictionSet(LabelSpace(K), _ids(n), softmax(logits), labels, logits=logits)


def gen_overconfident(n: int, K: int, seed: int, s: float = 2.0) -> PredictionSet:
    """``gen_calibrated`` with logits multiplied by s > 1; labels are unchanged."""
    if not s > 1.0:
        raise ValidationError(f"overconfidence scale must exceed 1, got {s}")
    probs, labels = _calibrated_draws(n, K, seed)
    logits = s * np.log(probs)
    return PredictionSet(LabelSpace(K), _ids(n), softmax(logits), labels, logits=logits)


def gen_predictable_correctness(n: int, D: int, seed: int, margin: float = 3.0,
                                p_correct: float = 0.5, confidence: float = 0.95) -> PredictionSet:
    """Binary predictions with constant confidence and informative features.

    Each record's correctness is drawn first; its features are
    ``+margin * u`` (correct) or ``-margin * u`` (wrong) plus standard normal
    noise, for one seeded unit direction u.
    """
    if not margin > 0:
        raise ValidationError("margin must be positive")
    if D < 1 or n < 1:
        raise ValidationError("n and D must be positive")
    if not 0.5 < confidence < 1.0:
        raise ValidationError("confidence must lie in (0.5, 1)")
    rs = SeededStream(seed)
    u = rs.normal(D)
    u /= np.linalg.norm(u)
    correct = rs.uniform(n) < p_correct
    pred = rs.integers(n, 2)
    labels = np.where(correct, pred, 1 - pred)
    probs = np.full((n, 2), 1.0 - confidence)
    probs[np.arange(n), pred] = confidence
    sign = np.where(correct, 1.0, -1.0)
    features = sign[:, None] * margin * u[None, :] + rs.normal(n * D).reshape(n, D)
    logits = np.log(probs)
    return PredictionSet(LabelSpace(2), _ids(n), probs, labels, logits=logits, features=features)


def mixture_centers(K: int, D: int, seed: int, separation: float) -> np.ndarray:
    """K seeded centers rescaled so the closest pair is exactly ``separation`` apart."""
    rs = SeededStream(seed, 1)
    centers = rs.normal(K * D).reshape(K, D)
    gaps = np.linalg.norm(centers[:, None, :] - centers[None, :, :], axis=-1)
    closest = gaps[np.triu_indices(K, 1)].min()
    return centers * (separation / closest)


def gen_gaussian_mixture(n: int, K: int, D: int, seed: int, separation: float = 3.0,
                         centers_seed: int | None = None) -> LabeledData:
    """Unit-variance Gaussian classes with uniform priors.

    ``centers_seed`` (default: ``seed``) fixes the class centers, so train,
    validation and test splits of one task share centers but not points.
    """
    if K < 2 or D < 1 or n < 1:
        raise ValidationError("need n >= 1, K >= 2 and D >= 1")
    if not separation > 0:
        raise ValidationError("separation must be positive")
    centers = mixture_centers(K, D, seed if centers_seed is None else centers_seed, separation)
    rs = SeededStream(seed)
    y = rs.integers(n, K)
    X = centers[y] + rs.normal(n * D).reshape(n, D)
    return LabeledData(X, y, K, _ids(n, "x"))


def train_toy_classifier(data: LabeledData, heldout: LabeledData, arch, epochs: int,
                         log_every: int, seed: int, learning_rate: float = 0.1,
                         batch_size: int = 32, activation: str = "relu"):
    """Train a softmax MLP and snapshot its held-out predictions.

    A checkpoint is taken after every ``log_every``-th gradient step; each is
    ``(step, PredictionSet)`` with logits, probs and the last hidden layer as
    features.
    """
    arch = [int(a) for a in arch]
    if len(arch) < 2 or arch[0] != data.dim or arch[-1] != data.num_classes:
        raise ValidationError(f"arch must run from D={data.dim} to K={data.num_classes}, got {arch}")
    if epochs < 1 or log_every < 1:
        raise ValidationError("epochs and log_every must be positive")
    if heldout.dim != data.dim or heldout.num_classes != data.num_classes:
        raise ValidationError("held-out data must match the training data's D and K")
    weights, biases = nn.init_layers(arch, seed)
    stream = SeededStream(seed, 1)
    targets = nn.one_hot(data.y, data.num_classes)
    space = LabelSpace(data.num_classes)
    checkpoints = []
    step = 0
    for _ in range(epochs):
        for idx in nn.minibatches(len(data), batch_size, stream):
            z, cache = nn.dense_forward(weights, biases, data.X[idx], activation)
            _, dz = nn.softmax_cross_entropy(z, targets[idx])
            dws, dbs, _ = nn.dense_backward(weights, cache, dz, activation)
            nn.sgd_step(weights, dws, learning_rate)
            nn.sgd_step(biases, dbs, learning_rate)
            step += 1
            if step % log_every == 0:
                checkpoints.append((step, snapshot(weights, biases, activation, heldout, space, step)))
    return checkpoints


def snapshot(weights, biases, activation, data: LabeledData, space: LabelSpace, step=None) -> PredictionSet:
    logits, cache = nn.dense_forward(weights, biases, data.X, activation)
    hidden = cache[-1][0] if len(cache) > 1 else data.X
    n = len(data)
    return PredictionSet(space, data.ids, softmax(logits), data.y, logits=logits, features=hidden,
                         steps=None if step is None else np.full(n, step), splits=["test"] * n)
