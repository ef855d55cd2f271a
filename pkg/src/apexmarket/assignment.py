"""Exact unit-demand assignment and VCG pricing.

Players and items are both indexed ``0..n-1``. Utilities ``u[i, j]`` are
scaled per player by a nonnegative weight vector ``weights`` (all ones by
default), so the welfare of a permutation ``pi`` is
``sum_i weights[i] * u[i, pi[i]]``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

#: Absolute tolerance for reported values and certificate checks.
TOL_VALUE = 1e-9
#: Tolerance used when comparing welfare of competing permutations.
TOL_COMPARE = 1e-12
#: Entries at or below this are treated as outside the support of a lottery.
SUPPORT_EPS = 1e-10
#: Largest n served by the batched enumeration path.
BATCH_MAX_N = 7


class AssignmentError(ValueError):
    """Raised for malformed utilities, weights or allocations."""


@dataclass(frozen=True)
class Assignment:
    pi: tuple[int, ...]
    value: float

    def matrix(self) -> np.ndarray:
        return permutation_matrix(self.pi)


@dataclass(frozen=True)
class DualCertificate:
    """Dual solution ``(a, b)`` of the assignment LP: ``w[i, j] <= a[i] + b[j]``."""

    a: np.ndarray
    b: np.ndarray

    def slack(self, w: np.ndarray) -> np.ndarray:
        return self.a[:, None] + self.b[None, :] - w


@dataclass(frozen=True)
class VcgOutcome:
    assignment: Assignment
    prices: np.ndarray
    duals: DualCertificate
    payments: np.ndarray


WeightedPermutations = list[tuple[float, tuple[int, ...]]]


def as_utility_matrix(u, normalized: bool = False) -> np.ndarray:
    """Validate and return ``u`` as a float array.

    With ``normalized=True`` every row must have minimum 0 and maximum 1.
    """
    arr = np.array(u, dtype=float)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1] or arr.shape[0] == 0:
        raise AssignmentError(f"utility matrix must be square and non-empty, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise AssignmentError("utility matrix has non-finite entries")
    if np.any(arr < 0):
        raise AssignmentError("utility matrix has negative entries")
    if normalized:
        if not (np.allclose(arr.min(axis=1), 0.0, atol=1e-12) and np.allclose(arr.max(axis=1), 1.0, atol=1e-12)):
            raise AssignmentError("utility matrix is not normalized (each row needs min 0 and max 1)")
    return arr


def normalize_rows(u) -> np.ndarray:
    """Shift and scale each row to span exactly [0, 1].

    Constant rows cannot be normalized and raise :class:`AssignmentError`.
    """
    arr = as_utility_matrix(u)
    lo = arr.min(axis=1, keepdims=True)
    span = arr.max(axis=1, keepdims=True) - lo
    if np.any(span <= 0):
        raise AssignmentError("cannot normalize a constant row")
    return (arr - lo) / span


def as_weights(weights, n: int) -> np.ndarray:
    if weights is None:
        return np.ones(n)
    lam = np.array(weights, dtype=float).reshape(-1)
    if lam.shape != (n,):
        raise AssignmentError(f"weights must have length {n}, got {lam.shape}")
    if not np.all(np.isfinite(lam)) or np.any(lam < 0):
        raise AssignmentError("weights must be finite and nonnegative")
    return lam


def permutation_matrix(pi: Sequence[int]) -> np.ndarray:
    n = len(pi)
    m = np.zeros((n, n))
    m[np.arange(n), list(pi)] = 1.0
    return m


def _scale(w: np.ndarray) -> float:
    return max(1.0, float(np.max(np.abs(w))) if w.size else 1.0)


def _hungarian(w: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Max-weight assignment of every row of ``w`` (n x m, n <= m).

    Returns ``(row_to_col, a, b)`` with ``w[i, j] <= a[i] + b[j]``, ``b >= 0``,
    ``b`` zero on unassigned columns, and equality on assigned pairs.
    """
    n, m = w.shape
    cost = -w
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=int)  # column -> row (1-based), 0 = free
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used
            free[0] = False
            cols = np.nonzero(free)[0]
            cur = cost[i0 - 1, cols - 1] - u[i0] - v[cols]
            better = cur < minv[cols]
            minv[cols[better]] = cur[better]
            way[cols[better]] = j0
            k = int(np.argmin(minv[cols]))
            j1 = int(cols[k])
            delta = minv[j1]
            used_idx = np.nonzero(used)[0]
            u[p[used_idx]] += delta
            v[used_idx] -= delta
            minv[cols] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    row_to_col = np.empty(n, dtype=int)
    for j in range(1, m + 1):
        if p[j]:
            row_to_col[p[j] - 1] = j - 1
    return row_to_col, -u[1:], -v[1:]


def _has_perfect_matching(adj: list[list[int]], rows: list[int], cols_free: set[int]) -> bool:
    match: dict[int, int] = {}

    def augment(r: int, seen: set[int]) -> bool:
        for c in adj[r]:
            if c in cols_free and c not in seen:
                seen.add(c)
                if c not in match or augment(match[c], seen):
                    match[c] = r
                    return True
        return False

    return all(augment(r, set()) for r in rows)


def _lex_smallest_matching(tight: np.ndarray) -> tuple[int, ...]:
    n = tight.shape[0]
    adj = [list(np.nonzero(tight[i])[0]) for i in range(n)]
    free = set(range(n))
    pi = []
    for i in range(n):
        for j in adj[i]:
            if j not in free:
                continue
            free.discard(j)
            if _has_perfect_matching(adj, list(range(i + 1, n)), free):
                pi.append(int(j))
                break
            free.add(j)
        else:  # pragma: no cover - tight graph of an optimal dual always has a perfect matching
            raise RuntimeError("tight graph lost its perfect matching; tolerance breach")
    return tuple(pi)


def _max_weight_value(w: np.ndarray) -> float:
    if w.shape[0] == 0:
        return 0.0
    rows, _, _ = _hungarian(w)
    return float(w[np.arange(w.shape[0]), rows].sum())


def solve_assignment(u, weights=None) -> tuple[Assignment, DualCertificate]:
    """Welfare-maximizing permutation with an optimality certificate.

    Among several optimal permutations the lexicographically smallest one
    (player 0's item first) is returned.

    Parameters
    ----------
    u : array-like, shape (n, n)
        Nonnegative utilities.
    weights : array-like, shape (n,), optional
        Nonnegative per-player weights; defaults to all ones.

    Returns
    -------
    assignment : Assignment
    duals : DualCertificate
        Feasible for the dual of the assignment LP with zero duality gap.
    """
    u = as_utility_matrix(u)
    lam = as_weights(weights, u.shape[0])
    w = lam[:, None] * u
    _, a, b = _hungarian(w)
    tight = (a[:, None] + b[None, :] - w) <= TOL_COMPARE * _scale(w)
    pi = _lex_smallest_matching(tight)
    value = float(w[np.arange(len(pi)), pi].sum())
    return Assignment(pi, value), DualCertificate(a, b)


def _second_copy_values(w: np.ndarray) -> np.ndarray:
    n = w.shape[0]
    return np.array([_max_weight_value(np.hstack([w, w[:, [j]]])) for j in range(n)])


def vcg_prices(u, weights=None) -> np.ndarray:
    """Item prices ``C[j] = OPT_{+j} - OPT``, the welfare gain of a second copy of ``j``."""
    u = as_utility_matrix(u)
    lam = as_weights(weights, u.shape[0])
    w = lam[:, None] * u
    opt = _max_weight_value(w)
    return np.maximum(_second_copy_values(w) - opt, 0.0)


def externality_payments(w: np.ndarray, pi: Sequence[int]) -> np.ndarray:
    """Payments from the externality definition: others' best welfare without ``i``
    minus others' welfare under ``pi``."""
    n = w.shape[0]
    welfare = w[np.arange(n), list(pi)]
    total = welfare.sum()
    out = np.empty(n)
    for i in range(n):
        without = w.copy()
        without[i] = 0.0
        out[i] = _max_weight_value(without) - (total - welfare[i])
    return out


def vcg_outcome(u, weights=None) -> VcgOutcome:
    """Full unit-demand VCG outcome.

    The returned duals are the price certificate ``b = C`` and
    ``a[i] = w[i, pi[i]] - C[pi[i]]``. Payments are cross-checked against the
    externality definition and a mismatch raises ``RuntimeError``.
    """
    u = as_utility_matrix(u)
    lam = as_weights(weights, u.shape[0])
    w = lam[:, None] * u
    assignment, _ = solve_assignment(u, lam)
    prices = vcg_prices(u, lam)
    pi = np.array(assignment.pi)
    payments = prices[pi]
    ext = externality_payments(w, assignment.pi)
    if np.max(np.abs(ext - payments)) > TOL_VALUE * _scale(w):
        raise RuntimeError(f"second-copy prices {payments} disagree with externalities {ext}")
    a = w[np.arange(len(pi)), pi] - payments
    return VcgOutcome(assignment, prices, DualCertificate(a, prices.copy()), payments)


def opt_with_capacities(u, weights, y) -> float:
    """Optimal welfare when item ``j`` is available in quantity ``1 + y[j]``.

    Computed as the mixture ``(1 - sum y) OPT + sum_j y_j OPT_{+j}`` and checked
    against the dual bound ``sum a + sum (1 + y_j) C_j``. Only ``sum y <= 1``
    is accepted; beyond it the identity is no longer guaranteed to be tight.
    """
    u = as_utility_matrix(u)
    n = u.shape[0]
    lam = as_weights(weights, n)
    y = np.array(y, dtype=float).reshape(-1)
    if y.shape != (n,) or np.any(y < 0) or not np.all(np.isfinite(y)):
        raise AssignmentError("extra capacities must be a nonnegative vector of length n")
    if y.sum() > 1 + 1e-12:
        raise AssignmentError(f"total extra capacity {y.sum()} exceeds 1")
    w = lam[:, None] * u
    opt = _max_weight_value(w)
    second = _second_copy_values(w)
    mixture = (1 - y.sum()) * opt + float(y @ second)
    out = vcg_outcome(u, lam)
    bound = out.duals.a.sum() + float((1 + y) @ out.prices)
    if abs(mixture - bound) > 1e-8 * _scale(w):
        raise RuntimeError(f"augmentation mixture {mixture} and dual bound {bound} disagree")
    return mixture


def check_bistochastic(x, tol: float = 1e-8) -> np.ndarray:
    arr = np.array(x, dtype=float)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise AssignmentError(f"allocation must be square, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)) or np.any(arr < -tol):
        raise AssignmentError("allocation has negative or non-finite entries")
    if np.max(np.abs(arr.sum(axis=1) - 1)) > tol or np.max(np.abs(arr.sum(axis=0) - 1)) > tol:
        raise AssignmentError("allocation is not bi-stochastic")
    return arr


def birkhoff_decompose(x) -> WeightedPermutations:
    """Write a bi-stochastic matrix as a lottery over permutations.

    Each step takes a max-weight perfect matching on the current support,
    removes it with weight equal to its smallest entry, and zeroes entries
    that fall to ``SUPPORT_EPS`` or below. Weights are renormalized to sum to 1.
    """
    x = check_bistochastic(x)
    n = x.shape[0]
    residual = np.where(x > SUPPORT_EPS, x, 0.0)
    out: list[tuple[float, tuple[int, ...]]] = []
    max_steps = n * n - 2 * n + 2
    while residual.sum() > n * SUPPORT_EPS:
        if len(out) >= max_steps:
            raise AssignmentError("decomposition exceeded the step bound; input drifted from bi-stochastic")
        support = residual > 0
        w = np.where(support, residual, -float(n + 1))
        rows, _, _ = _hungarian(w)
        if not np.all(support[np.arange(n), rows]):
            raise AssignmentError("no perfect matching on the support; tolerance breach")
        weight = float(residual[np.arange(n), rows].min())
        residual[np.arange(n), rows] -= weight
        residual[residual <= SUPPORT_EPS] = 0.0
        out.append((weight, tuple(int(j) for j in rows)))
    total = sum(wt for wt, _ in out)
    return [(wt / total, pi) for wt, pi in out]


def reconstruct(decomposition: WeightedPermutations, n: int) -> np.ndarray:
    x = np.zeros((n, n))
    for weight, pi in decomposition:
        x[np.arange(n), list(pi)] += weight
    return x


# -- batched enumeration for small n -----------------------------------------

@dataclass(frozen=True)
class BatchVcg:
    """VCG outcomes for a batch of weight vectors (one row per weight vector)."""

    pi: np.ndarray        # (B, n) item index per player
    values: np.ndarray    # (B,)
    prices: np.ndarray    # (B, n)
    payments: np.ndarray  # (B, n)


class _Enumeration:
    """Permutation and second-copy injection tables for one utility matrix."""

    _cache: dict[tuple, "_Enumeration"] = {}

    def __init__(self, u: np.ndarray):
        n = u.shape[0]
        self.perms = np.array(list(itertools.permutations(range(n))), dtype=int)
        self.perm_utils = u[np.arange(n)[:, None], self.perms.T]  # (n, n!)
        inj = np.array(list(itertools.permutations(range(n + 1), n)), dtype=int)
        self.copy_utils = []
        for j in range(n):
            items = np.where(inj == n, j, inj)
            self.copy_utils.append(u[np.arange(n)[:, None], items.T])  # (n, (n+1)!)

    @classmethod
    def get(cls, u: np.ndarray) -> "_Enumeration":
        key = (u.shape, u.tobytes())
        if key not in cls._cache:
            if len(cls._cache) > 64:
                cls._cache.clear()
            cls._cache[key] = cls(u)
        return cls._cache[key]


def batch_vcg(u, weights_batch, chunk: int = 32768) -> BatchVcg:
    """Vectorized VCG by exhaustive enumeration, for ``n <= BATCH_MAX_N``.

    Agrees with :func:`vcg_outcome` including the lexicographic tie-break.
    """
    u = as_utility_matrix(u)
    n = u.shape[0]
    if n > BATCH_MAX_N:
        raise AssignmentError(f"batched enumeration supports n <= {BATCH_MAX_N}")
    lam = np.atleast_2d(np.array(weights_batch, dtype=float))
    if lam.shape[1] != n or np.any(lam < 0) or not np.all(np.isfinite(lam)):
        raise AssignmentError("weights batch must be (B, n), finite and nonnegative")
    enum = _Enumeration.get(u)
    B = lam.shape[0]
    pi = np.empty((B, n), dtype=int)
    values = np.empty(B)
    prices = np.empty((B, n))
    for start in range(0, B, chunk):
        sl = slice(start, min(B, start + chunk))
        lb = lam[sl]
        tol = TOL_COMPARE * np.maximum(1.0, lb.max(axis=1) * max(1.0, u.max()))
        vals = lb @ enum.perm_utils
        opt = vals.max(axis=1)
        k = np.argmax(vals >= (opt - tol)[:, None], axis=1)
        pi[sl] = enum.perms[k]
        values[sl] = vals[np.arange(len(k)), k]
        for j in range(n):
            prices[sl, j] = (lb @ enum.copy_utils[j]).max(axis=1) - opt
    prices = np.maximum(prices, 0.0)
    payments = np.take_along_axis(prices, pi, axis=1)
    return BatchVcg(pi, values, prices, payments)


def envelope_lines(u, weights, i: int) -> tuple[np.ndarray, np.ndarray, float]:
    """Player ``i``'s welfare envelope against fixed opponent weights.

    Returns ``(slopes, intercepts, opt_without)``: ``slopes`` is the raw row
    ``u[i]``, ``intercepts[j]`` is the opponents' best welfare when item ``j``
    goes to player ``i``, and ``opt_without`` is their best welfare with player
    ``i`` absent. With weight ``t`` the round optimum is
    ``max_j (t * slopes[j] + intercepts[j])``; ``weights[i]`` is ignored.
    """
    u = as_utility_matrix(u)
    n = u.shape[0]
    lam = as_weights(weights, n)
    others = np.delete(lam[:, None] * u, i, axis=0)
    intercepts = np.array([_max_weight_value(np.delete(others, j, axis=1)) for j in range(n)])
    without = np.vstack([others, np.zeros((1, n))])
    return u[i].copy(), intercepts, _max_weight_value(without)
