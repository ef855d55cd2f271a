"""Pseudo-market equilibria for one-sided assignment.

Bid weights are adjusted until each player's expected VCG payment is one
token. Payments are smoothed by averaging over a small box of weights, which
makes the adjustment map continuous, and the resulting fractional allocation
with its expected prices is checked directly as a competitive equilibrium.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from .assignment import (
    BATCH_MAX_N,
    AssignmentError,
    _Enumeration,
    as_utility_matrix,
    as_weights,
    batch_vcg,
    birkhoff_decompose,
    check_bistochastic,
    envelope_lines,
    solve_assignment,
    vcg_outcome,
    vcg_prices,
)

TOL_TIE = 1e-12
ENVY_TOL = 1e-9


class InfeasibleBudget(ValueError):
    """No unit bundle is affordable: every item costs more than the budget."""


# -- weight cap ----------------------------------------------------------------

def lambda_max(u, return_flag: bool = False):
    """Bid-weight cap ``1 + n / g`` where ``g`` is the smallest nonzero within-row gap.

    Above the cap a player's smoothed payment cannot fall short of its budget
    unless it already receives only favorite items.

    Parameters
    ----------
    u : array-like, shape (n, n)
    return_flag : bool
        Also return ``True`` when no row has two distinct entries. The cap is
        then 1 and every allocation is equally good.
    """
    u = as_utility_matrix(u)
    n = u.shape[0]
    gaps = np.abs(u[:, :, None] - u[:, None, :])
    nonzero = gaps[gaps > 0]
    degenerate = nonzero.size == 0
    value = 1.0 if degenerate else 1.0 + n / float(nonzero.min())
    return (value, degenerate) if return_flag else value


# -- smoothed payments -----------------------------------------------------------

@dataclass(frozen=True)
class SmoothedEvaluation:
    """Expected VCG outcome over the box ``prod_i [lam_i, lam_i + eps]``."""

    phi: np.ndarray
    x_eps: np.ndarray
    c_eps: np.ndarray
    samples: int
    seed: int
    eps: float
    weights: np.ndarray


def _uniforms(seed: int, samples: int, n: int) -> np.ndarray:
    """Scrambled Sobol points in ``[0, 1)^n``, a deterministic function of ``seed``.

    Low-discrepancy points keep the sampled winner frequencies, and so the
    expected allocation and prices, far closer to their box averages than
    independent draws at the same count. Point ``s`` depends only on
    ``(seed, s, n)``, so larger runs extend smaller ones.
    """
    engine = qmc.Sobol(d=n, scramble=True, rng=np.random.default_rng(int(seed)))
    m = int(np.ceil(np.log2(samples))) if samples > 1 else 0
    return engine.random_base2(m)[:samples]


def _segment_integrals(slopes, intercepts, lo, hi):
    """Exact ``int_lo^hi max_j (t slopes_j + intercepts[s, j]) dt`` per sample ``s``.

    The envelope is linear between consecutive pairwise crossings, so the
    trapezoid rule over all crossings inside the interval is exact.
    """
    S, n = intercepts.shape
    pts = [np.full(S, lo), np.full(S, hi)]
    for j, k in itertools.combinations(range(n), 2):
        ds = slopes[j] - slopes[k]
        if ds == 0:
            continue
        t = (intercepts[:, k] - intercepts[:, j]) / ds
        pts.append(np.clip(t, lo, hi))
    pts = np.sort(np.stack(pts, axis=1), axis=1)
    env = (pts[:, :, None] * slopes[None, None, :] + intercepts[:, None, :]).max(axis=2)
    area = 0.5 * np.diff(pts, axis=1) * (env[:, 1:] + env[:, :-1])
    return area.sum(axis=1), env[:, 0], env[:, -1]


def _opponent_intercepts(u, lam_s, i):
    """``V[s, j]``: opponents' best welfare in sample ``s`` when player ``i`` takes item ``j``."""
    S, n = lam_s.shape
    if n <= BATCH_MAX_N:
        enum = _Enumeration.get(u)
        rows = np.delete(np.arange(n), i)
        others = lam_s[:, rows] @ enum.perm_utils[rows]  # (S, n!)
        owner = enum.perms[:, i]
        return np.stack([others[:, owner == j].max(axis=1) for j in range(n)], axis=1)
    return np.stack([envelope_lines(u, lam, i)[1] for lam in lam_s])


def _conditional_payments(u, lam_s, lam, eps):
    """Per-sample payments with each player's own weight integrated out exactly.

    For player ``i`` the opponents' weights come from the sample while its own
    weight ``t`` is averaged over ``[lam_i, lam_i + eps]``. Her VCG payment at
    ``t`` is ``W - OPT(t) + t OPT'(t)`` with ``OPT(t) = max_j (t u_ij + V_j)`` and
    ``W = max_j V_j``, which integrates in closed form along the envelope. The
    result is continuous in every weight, unlike a plain sample average whose
    value jumps whenever a sampled winner flips.
    """
    S, n = lam_s.shape
    out = np.empty((S, n))
    for i in range(n):
        V = _opponent_intercepts(u, lam_s, i)
        lo, hi = lam[i], lam[i] + eps
        integral, opt_lo, opt_hi = _segment_integrals(u[i], V, lo, hi)
        # int t OPT'(t) dt = hi OPT(hi) - lo OPT(lo) - int OPT(t) dt
        mean_pay = V.max(axis=1) - (2.0 * integral - hi * opt_hi + lo * opt_lo) / eps
        out[:, i] = mean_pay
    return np.maximum(out, 0.0)


def _sample_outcomes(u, lam_s):
    S, n = lam_s.shape
    if n <= BATCH_MAX_N:
        res = batch_vcg(u, lam_s)
        x = np.zeros((n, n))
        np.add.at(x, (np.tile(np.arange(n), S), res.pi.reshape(-1)), 1.0)
        return x / S, res.prices.mean(axis=0)
    x = np.zeros((n, n))
    c = np.zeros(n)
    for lam in lam_s:
        out = vcg_outcome(u, lam)
        x[np.arange(n), out.assignment.pi] += 1.0
        c += out.prices
    return x / S, c / S


def expected_vcg_payments(u, weights, eps: float, samples: int = 512, seed: int = 0) -> SmoothedEvaluation:
    """Monte-Carlo expectation of VCG outcomes for weights uniform on a box.

    Parameters
    ----------
    u : array-like, shape (n, n)
    weights : array-like, shape (n,)
        Lower corner of the box; the upper corner is ``weights + eps``.
    eps : float
        Box side length.
    samples : int
        Number of weight vectors drawn. Draw ``s`` depends only on ``(seed, s)``.
    seed : int

    Returns
    -------
    SmoothedEvaluation
        ``phi`` holds expected payments with each player's own coordinate
        integrated exactly (a lower-variance estimator of the same mean);
        ``x_eps`` and ``c_eps`` are sample means of the optimal permutation
        matrices and of the price vectors.
    """
    u = as_utility_matrix(u)
    n = u.shape[0]
    lam = as_weights(weights, n)
    if not (np.isfinite(eps) and eps > 0):
        raise ValueError(f"eps must be positive, got {eps}")
    if int(samples) != samples or samples < 1:
        raise ValueError(f"samples must be a positive integer, got {samples}")
    samples = int(samples)
    if int(seed) != seed or seed < 0:
        raise ValueError(f"seed must be a nonnegative integer, got {seed}")
    lam_s = lam[None, :] + eps * _uniforms(seed, samples, n)
    phi = _conditional_payments(u, lam_s, lam, eps).mean(axis=0)
    x, c = _sample_outcomes(u, lam_s)
    return SmoothedEvaluation(phi, x, c, samples, int(seed), float(eps), lam)


def psi_step(u, weights, eps: float, lambda_bar: float, samples: int = 512, seed: int = 0,
             *, evaluation: SmoothedEvaluation | None = None) -> np.ndarray:
    """One unit of adjustment: raise weights of under-spenders, lower over-spenders.

    Returns ``clip(lam + 1 - phi, 0, lambda_bar)``.
    """
    lam = as_weights(weights, np.asarray(u).shape[0])
    ev = evaluation if evaluation is not None else expected_vcg_payments(u, lam, eps, samples, seed)
    return np.clip(lam + 1.0 - ev.phi, 0.0, lambda_bar)


# -- fixed-point search -----------------------------------------------------------

@dataclass(frozen=True)
class HzSolution:
    lambda_star: np.ndarray
    allocation: np.ndarray
    prices: np.ndarray
    residual: float
    iterations: int
    converged: bool
    phi: np.ndarray
    lambda_bar: float
    degenerate: bool
    eps: float
    samples: int
    seed: int
    final_alpha: float

    @property
    def box_center(self) -> np.ndarray:
        """Midpoint of the weight box that ``allocation`` and ``prices`` average over."""
        return self.lambda_star + self.eps / 2.0


def find_hz_equilibrium(u, eps: float = 0.01, alpha: float = 0.3, tol: float = 1e-3,
                        max_iter: int = 5000, samples: int = 512, seed: int = 0,
                        init=None, lambda_bar: float | None = None) -> HzSolution:
    """Damped fixed-point iteration on the smoothed adjustment map.

    All evaluations reuse the same draws, so the map is a fixed deterministic
    function of the weights. The step ``alpha`` is an upper bound: it is halved
    whenever the residual grows and recovers slowly while the residual falls.
    Near contested items the map can have slope of order ``lam / eps``, which
    any fixed step larger than ``eps / lam`` would overshoot.

    Non-convergence is reported through ``converged`` and ``residual``; it is
    not an error.
    """
    u = as_utility_matrix(u)
    n = u.shape[0]
    if not 0 < alpha <= 1:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    if not tol > 0:
        raise ValueError(f"tol must be positive, got {tol}")
    if max_iter < 1:
        raise ValueError("max_iter must be at least 1")
    cap, degenerate = lambda_max(u, return_flag=True)
    if lambda_bar is not None:
        cap = float(lambda_bar)
    lam = np.clip(np.ones(n) if init is None else as_weights(init, n), 0.0, cap)

    step = alpha
    prev = np.inf
    best = None
    its = 0
    for its in range(1, max_iter + 1):
        ev = expected_vcg_payments(u, lam, eps, samples, seed)
        target = psi_step(u, lam, eps, cap, evaluation=ev)
        res = float(np.abs(target - lam).max())
        if best is None or res < best[0]:
            best = (res, lam, ev)
        if res < tol:
            break
        if res > prev:
            step = max(step / 2.0, 1e-6)
        else:
            step = min(alpha, step * 1.1)
        prev = res
        lam = (1.0 - step) * lam + step * target

    res, lam, ev = best
    return HzSolution(
        lambda_star=lam, allocation=ev.x_eps, prices=ev.c_eps, residual=res,
        iterations=its, converged=res < tol, phi=ev.phi, lambda_bar=float(cap),
        degenerate=bool(degenerate), eps=float(eps), samples=int(samples), seed=int(seed),
        final_alpha=float(step),
    )


# -- certificates -------------------------------------------------------------------

def best_affordable_bundle(u_row, prices, budget: float) -> tuple[np.ndarray, float]:
    """Best unit bundle ``y`` (``sum y = 1``, ``y >= 0``) with ``prices @ y <= budget``.

    One budget row plus the simplex row means some optimum has at most two
    items, and with two items the budget binds; enumerating those candidates
    is exact. Ties go to the lexicographically smallest support.

    Raises
    ------
    InfeasibleBudget
        If even the cheapest item exceeds the budget.
    """
    u_row = np.asarray(u_row, dtype=float)
    C = np.asarray(prices, dtype=float)
    n = len(u_row)
    if C.shape != (n,) or np.any(C < 0):
        raise ValueError("prices must be a nonnegative vector matching u_row")
    if not budget > 0:
        raise ValueError(f"budget must be positive, got {budget}")
    if C.min() > budget:
        raise InfeasibleBudget(f"cheapest item costs {C.min():.6g} > budget {budget:.6g}")

    candidates = []  # (value, support, weights)
    for j in range(n):
        if C[j] <= budget:
            candidates.append((u_row[j], (j,), (1.0,)))
    for j, k in itertools.combinations(range(n), 2):
        if C[j] == C[k]:
            continue
        yj = (budget - C[k]) / (C[j] - C[k])
        if 0.0 < yj < 1.0:
            candidates.append((yj * u_row[j] + (1 - yj) * u_row[k], (j, k), (yj, 1 - yj)))
    top = max(c[0] for c in candidates)
    slack = TOL_TIE * max(1.0, abs(top))
    value, support, wts = min((c for c in candidates if c[0] >= top - slack), key=lambda c: c[1])
    y = np.zeros(n)
    y[list(support)] = wts
    return y, float(value)


@dataclass(frozen=True)
class EquilibriumCertificate:
    """Per-player budget and demand checks for a candidate equilibrium.

    ``best_bundle_value``, ``realized_value`` and ``gap`` are in the units used
    for the demand check: weighted ``lam_i u_ij`` when weights were supplied,
    raw ``u_ij`` otherwise. ``raw_gap`` is always measured in raw utilities.
    Property flags are ``None`` when the check was not applicable.
    """

    budget_spent: np.ndarray
    budgets: np.ndarray
    best_bundle_value: np.ndarray
    realized_value: np.ndarray
    gap: np.ndarray
    raw_best_value: np.ndarray
    raw_realized_value: np.ndarray
    raw_gap: np.ndarray
    bistochastic: bool
    prices_match: bool | None
    support_optimal: bool | None
    within_budget: bool
    demand_satisfied: bool
    delta: float
    passed: bool
    details: dict = field(default_factory=dict)

    def failing_players(self) -> list[int]:
        bad = (self.budget_spent > self.budgets + self.delta) | (self.gap > self.delta)
        return [int(i) for i in np.flatnonzero(bad)]


def _demand_values(u, x, C, budgets):
    n = u.shape[0]
    best = np.empty(n)
    for i in range(n):
        try:
            best[i] = best_affordable_bundle(u[i], C, budgets[i])[1]
        except InfeasibleBudget:
            best[i] = -np.inf
    realized = (u * x).sum(axis=1)
    return best, realized


def verify_ce(u, x, prices, weights=None, budgets=None, delta: float = 1e-9) -> EquilibriumCertificate:
    """Check a fractional allocation and item prices as a ``delta``-competitive equilibrium.

    Checks, each with additive slack ``delta``:

    * ``x`` is bi-stochastic;
    * each player's spend ``sum_j C_j x_ij`` is within its budget;
    * each player's bundle is worth at least its best affordable bundle,
      with utilities ``lam_i u_ij`` if ``weights`` is given and ``u_ij`` otherwise.

    With ``weights`` also:

    * ``prices`` match ``vcg_prices(u, weights)``;
    * every permutation in a lottery decomposition of ``x`` is optimal for
      ``lam_i u_ij``.

    Failed checks are reported, not raised.
    """
    u = as_utility_matrix(u)
    n = u.shape[0]
    x = np.asarray(x, dtype=float)
    C = np.asarray(prices, dtype=float)
    if x.shape != (n, n) or C.shape != (n,):
        raise ValueError("x must be (n, n) and prices (n,) matching u")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(C))):
        raise ValueError("x and prices must be finite")
    if np.any(C < 0):
        raise ValueError("prices must be nonnegative")
    budgets = np.ones(n) if budgets is None else np.broadcast_to(np.asarray(budgets, dtype=float), (n,)).copy()
    if np.any(budgets <= 0):
        raise ValueError("budgets must be positive")
    if not delta >= 0:
        raise ValueError("delta must be nonnegative")

    try:
        check_bistochastic(x, tol=max(delta, 1e-9))
        bistochastic = bool(np.all(x >= -delta))
    except AssignmentError:
        bistochastic = False

    spent = x @ C
    within = bool(np.all(spent <= budgets + delta))

    raw_best, raw_real = _demand_values(u, x, C, budgets)
    details = {}
    if weights is None:
        best, real = raw_best, raw_real
        prices_match = support_optimal = None
    else:
        lam = as_weights(weights, n)
        w = lam[:, None] * u
        best, real = _demand_values(w, x, C, budgets)
        exact = vcg_prices(u, lam)
        details["vcg_prices"] = exact
        prices_match = bool(np.all(np.abs(exact - C) <= delta))
        support_optimal = False
        if bistochastic:
            opt = solve_assignment(u, lam)[0].value
            losses = []
            for _, pi in birkhoff_decompose(np.clip(x, 0.0, None)):
                losses.append(opt - float(w[np.arange(n), list(pi)].sum()))
            details["support_losses"] = np.array(losses)
            support_optimal = bool(max(losses) <= delta)
    gap = best - real
    raw_gap = raw_best - raw_real
    demand = bool(np.all(gap <= delta))
    passed = bistochastic and within and demand and prices_match is not False and support_optimal is not False
    return EquilibriumCertificate(
        budget_spent=spent, budgets=budgets, best_bundle_value=best, realized_value=real, gap=gap,
        raw_best_value=raw_best, raw_realized_value=raw_real, raw_gap=raw_gap,
        bistochastic=bistochastic, prices_match=prices_match, support_optimal=support_optimal,
        within_budget=within, demand_satisfied=demand, delta=float(delta), passed=passed,
        details=details,
    )


def certify_solution(u, solution: HzSolution, delta: float) -> EquilibriumCertificate:
    """Verify a fixed-point result with weights at the center of its averaging box.

    Prices are box averages, and VCG prices are affine in the weights wherever
    the optimum is unique, so the center is where they should match exactly.
    The lower corner ``lambda_star`` is off by about ``eps / 2`` times the
    largest utility in every price.
    """
    return verify_ce(u, solution.allocation, solution.prices, weights=solution.box_center, delta=delta)


@dataclass(frozen=True)
class EnvyReport:
    """Pairs ``(i, k, excess)``: player ``i`` values ``k``'s bundle ``excess`` above its own."""

    pairs: tuple[tuple[int, int, float], ...]

    @property
    def envy_free(self) -> bool:
        return not self.pairs

    def envious_players(self) -> list[int]:
        return sorted({i for i, _, _ in self.pairs})


def envy_check(u, x) -> EnvyReport:
    """Ex-ante envy under equal budgets: compare each player's bundle with every other."""
    u = as_utility_matrix(u)
    x = check_bistochastic(x)
    values = u @ x.T  # values[i, k] = sum_j u_ij x_kj
    own = np.diag(values)
    pairs = []
    for i, k in zip(*np.nonzero(values > own[:, None] + ENVY_TOL)):
        pairs.append((int(i), int(k), float(values[i, k] - own[i])))
    return EnvyReport(tuple(pairs))
