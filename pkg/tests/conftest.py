import math

import numpy as np
import pytest

from calibscope.core import LabelSpace, PredictionRecord, PredictionSet

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


# -- independent oracles ---------------------------------------------------------
# These deliberately avoid the package's own code paths.

def brute_force_ece(conf, correct, bins, binning):
    """Loop-based ECE, written from the definition."""
    n = len(conf)
    if binning == "equal_mass":
        order = sorted(range(n), key=lambda i: conf[i])  # sorted() is stable
        b = min(bins, n)
        base, extra = divmod(n, b)
        groups, start = [], 0
        for j in range(b):
            size = base + (1 if j < extra else 0)
            groups.append(order[start:start + size])
            start += size
    else:
        groups = [[] for _ in range(bins)]
        for i in range(n):
            c = conf[i]
            j = 0
            while j < bins - 1 and c > (j + 1) / bins:
                j += 1
            groups[j].append(i)
    total = 0.0
    for g in groups:
        if g:
            acc = sum(correct[i] for i in g) / len(g)
            mc = sum(conf[i] for i in g) / len(g)
            total += len(g) / n * abs(acc - mc)
    return total


def newton_logistic(X, y, iters=50, ridge=1e-6):
    """Logistic regression by Newton's method; returns a predict-proba function."""
    Xb = np.hstack([X, np.ones((len(X), 1))])
    w = np.zeros(Xb.shape[1])
    for _ in range(iters):
        p = 1.0 / (1.0 + np.exp(-Xb @ w))
        grad = Xb.T @ (p - y) + ridge * w
        hess = (Xb * (p * (1 - p))[:, None]).T @ Xb + ridge * np.eye(len(w))
        w -= np.linalg.solve(hess, grad)
    return lambda Z: 1.0 / (1.0 + np.exp(-np.hstack([Z, np.ones((len(Z), 1))]) @ w))


def grid_temperature_nll(logits, labels, grid):
    """NLL of softmax(logits / T) at each T in grid, computed with math.* per row."""
    out = []
    for t in grid:
        z = logits / t
        m = z.max(axis=1, keepdims=True)
        lse = (m[:, 0] + np.log(np.exp(z - m).sum(axis=1)))
        out.append(float(np.mean(lse - z[np.arange(len(labels)), labels])))
    return np.array(out)


def make_set(rows, k=None, **kw):
    """PredictionSet from (probs, label) pairs."""
    k = k or len(rows[0][0])
    recs = [PredictionRecord(f"r{i}", p, y, **kw) for i, (p, y) in enumerate(rows)]
    return PredictionSet.from_records(LabelSpace(k), recs)


def central_difference(f, params, h=1e-5):
    grads = []
    for p in params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = p[idx]
            p[idx] = old + h
            up = f()
            p[idx] = old - h
            down = f()
            p[idx] = old
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def relative_error(analytic, numeric):
    a = np.concatenate([g.ravel() for g in analytic])
    n = np.concatenate([g.ravel() for g in numeric])
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a) + np.linalg.norm(n), 1e-12))


@pytest.fixture
def tmp_log(tmp_path):
    return tmp_path / "preds.jsonl"
