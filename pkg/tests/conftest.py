"""Shared helpers: a plain-numpy reference of the network and losses.

The finite-difference oracles evaluate losses through these functions only,
never through the autodiff graph they are checking.
"""

import numpy as np
import pytest


def np_forward(params, x):
    n = len(params) // 2
    h = x
    for i in range(n):
        h = h @ params[f"W{i}"].T + params[f"b{i}"]
        if i < n - 1:
            h = np.maximum(h, 0.0)
    return h


def np_cross_entropy(logits, labels):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -logp[np.arange(len(labels)), labels].mean()


def np_mse(pred, target):
    return np.mean((pred - target) ** 2)


def central_diff(fn, flat, h=1e-5):
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        e = np.zeros_like(flat)
        e[i] = h
        grad[i] = (fn(flat + e) - fn(flat - e)) / (2 * h)
    return grad


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report():
    """Record one acceptance line; all lines are echoed in the terminal summary."""
    return ACCEPTANCE_LINES.append


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
