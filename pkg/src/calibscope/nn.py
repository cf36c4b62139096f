"""Minimal dense networks with hand-written backprop.

Weights are stored (fan_out, fan_in) and applied to row-major batches, so a
layer computes ``x @ W.T + b``. Everything here is float64 and
deterministic; there is no autograd.
"""

from __future__ import annotations

import numpy as np

from .rng import SeededStream

ACTIVATIONS = ("relu", "tanh")


def activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0.0)
    if activation == "tanh":
        return np.tanh(z)
    raise ValueError(f"unknown activation {activation!r}")


def activation_grad(z: np.ndarray, a: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return (z > 0).astype(np.float64)
    return 1.0 - a * a


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def init_layers(dims, seed: int, stream: int = 0):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases, layer by layer."""
    rs = SeededStream(seed, stream)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rs.uniform(fan_out * fan_in, -bound, bound).reshape(fan_out, fan_in))
        biases.append(rs.uniform(fan_out, -bound, bound))
    return weights, biases


def dense_forward(weights, biases, x, activation, activate_last=False):
    """Forward pass; returns the output and the cache needed by :func:`dense_backward`."""
    cache = []
    a = x
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        z = a @ w.T + b
        out = activate(z, activation) if (i < last or activate_last) else z
        cache.append((a, z, out))
        a = out
    return a, cache


def dense_backward(weights, cache, dout, activation, activate_last=False):
    """Gradients of a scalar loss given d loss / d output.

    Returns (weight grads, bias grads, d loss / d input).
    """
    last = len(weights) - 1
    dws, dbs = [None] * len(weights), [None] * len(weights)
    g = dout
    for i in range(last, -1, -1):
        a_in, z, out = cache[i]
        if i < last or activate_last:
            g = g * activation_grad(z, out, activation)
        dws[i] = g.T @ a_in
        dbs[i] = g.sum(axis=0)
        g = g @ weights[i]
    return dws, dbs, g


def bce_with_logits(z: np.ndarray, target: np.ndarray):
    """Mean binary cross-entropy of sigmoid(z) against soft targets, and d/dz."""
    z = z.reshape(-1)
    loss = np.logaddexp(0.0, z) - target * z
    grad = (sigmoid(z) - target) / z.size
    return float(np.mean(loss)), grad.reshape(-1, 1)


def softmax_cross_entropy(z: np.ndarray, target: np.ndarray):
    """Mean cross-entropy of softmax(z) against target distributions, and d/dz."""
    zmax = z.max(axis=1, keepdims=True)
    logp = z - zmax - np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))
    loss = -np.sum(target * logp, axis=1)
    grad = (np.exp(logp) - target) / z.shape[0]
    return float(np.mean(loss)), grad


def one_hot(labels: np.ndarray, k: int, epsilon: float = 0.0) -> np.ndarray:
    """Row-wise label-smoothed one-hot targets."""
    t = np.full((len(labels), k), epsilon / k)
    t[np.arange(len(labels)), labels] += 1.0 - epsilon
    return t


def minibatches(n: int, batch_size: int, stream: SeededStream):
    """Index arrays for one shuffled epoch; the final batch may be partial."""
    order = stream.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def sgd_step(params, grads, lr: float):
    """w <- w - lr * g, in place."""
    for p, g in zip(params, grads):
        p -= lr * g
