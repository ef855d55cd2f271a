import itertools
import json
from importlib import resources

import numpy as np
import pytest

# Worked 4x4 instance: two players who love C and share A/B, two who only want C.
FOUR = np.array([[11, 9, 14, 0], [11, 9, 14, 0], [0, 0, 10, 0], [0, 0, 10, 0]], dtype=float)
FOUR_LAM = np.array([4, 4, 2, 2]) / 7
FOUR_X = np.array([[.5, .5, 0, 0], [.5, .5, 0, 0], [0, 0, .5, .5], [0, 0, .5, .5]])
FOUR_Y = np.array([[.5, .35, .15, 0], [.5, .35, .15, 0], [0, .15, .35, .5], [0, .15, .35, .5]])
FOUR_P1 = np.array([1.1, 0.9, 2.0, 0.0])
FOUR_P2 = np.array([8 / 7, 0.0, 20 / 7, 0.0])
CONTESTED = np.array([[1.0, 0.0], [1.0, 0.0]])


def data_path(name):
    return resources.files("apexmarket") / "data" / name


def load_data(name):
    return json.loads(data_path(name).read_text())


def random_normalized(rng, n):
    u = rng.random((n, n))
    lo = u.min(axis=1, keepdims=True)
    return (u - lo) / (u.max(axis=1, keepdims=True) - lo)


def brute_force_opt(w):
    n = w.shape[0]
    return max(sum(w[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n)))


def brute_force_optimal_perms(w, tol=1e-9):
    n = w.shape[0]
    vals = {p: sum(w[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n))}
    best = max(vals.values())
    return sorted(p for p, v in vals.items() if v >= best - tol)


def brute_force_second_copy(w, j):
    """Best welfare when item j exists twice: enumerate injections into n+1 slots."""
    n = w.shape[0]
    ext = np.hstack([w, w[:, [j]]])
    return max(sum(ext[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n + 1), n))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
