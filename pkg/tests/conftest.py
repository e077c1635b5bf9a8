import itertools

import numpy as np
import pytest


def numeric_grad(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` with respect to array ``x`` (mutated in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + step
        hi = float(f())
        x[i] = orig - step
        lo = float(f())
        x[i] = orig
        g[i] = (hi - lo) / (2 * step)
    return g


def rel_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def brute_force_ctc(probs: np.ndarray, label, blank: int) -> float:
    """-log sum over every path whose collapse equals ``label`` (enumerates V**T paths)."""
    T, V = probs.shape
    total = 0.0
    for path in itertools.product(range(V), repeat=T):
        merged = [k for i, k in enumerate(path) if i == 0 or path[i - 1] != k]
        if [k for k in merged if k != blank] == list(label):
            total += float(np.prod(probs[np.arange(T), path]))
    return -np.log(total)


def random_log_probs(rng, T, V) -> np.ndarray:
    z = rng.normal(size=(T, V))
    z -= z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for num in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[num])
