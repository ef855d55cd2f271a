"""Regularized allocation with the barrier ``F_0(x) = -beta * sum_ij 1/x_ij``.

The round optimizer maximizes ``sum_ij lam_i u_ij x_ij + F_0(x)`` over
bi-stochastic ``x``. Its dual in ``(a, b)`` is

    g(a, b) = sum a + sum b - 2 sqrt(beta) sum_ij sqrt(a_i + b_j - lam_i u_ij)

with primal recovery ``x_ij = sqrt(beta / (a_i + b_j - lam_i u_ij))``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import null_space
from scipy.optimize import brentq

from .assignment import _hungarian, as_utility_matrix, as_weights, solve_assignment


class RegularizationError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class RegularizerParams:
    beta: float
    lambda_bar: float

    def __post_init__(self):
        if not self.beta > 0:
            raise RegularizationError(f"beta must be positive, got {self.beta}")
        if not self.lambda_bar > 1:
            raise RegularizationError(f"lambda_bar must exceed 1, got {self.lambda_bar}")

    @classmethod
    def canonical(cls, lambda_bar: float, n: int) -> "RegularizerParams":
        """Couple the curvature to the bid cap as ``beta = lambda_bar**-3 * n**-4``."""
        return cls(float(lambda_bar) ** -3 * float(n) ** -4, float(lambda_bar))


@dataclass(frozen=True)
class RegularizedOptimum:
    x: np.ndarray
    a: np.ndarray
    b: np.ndarray
    value_reg: float
    value_linear: float
    residual: float
    iterations: int

    def stationarity_residual(self, w: np.ndarray, beta: float) -> float:
        return float(np.max(np.abs(w + beta / self.x ** 2 - self.a[:, None] - self.b[None, :])))


@dataclass(frozen=True)
class EtaBound:
    eta: float
    M: float


def _check_inputs(u, weights, params: RegularizerParams):
    u = as_utility_matrix(u, normalized=True)
    lam = as_weights(weights, u.shape[0])
    if np.any(lam > params.lambda_bar * (1 + 1e-12)):
        raise RegularizationError(f"weights {lam} exceed the cap {params.lambda_bar}")
    return u, lam


def _dual_value(a, b, w, beta):
    s = a[:, None] + b[None, :] - w
    return float(a.sum() + b.sum() - 2.0 * np.sqrt(beta) * np.sqrt(s).sum())


def _feasible_start(w, beta, init):
    n = w.shape[0]
    if init is None:
        return w.max(axis=1) + beta * n * n, np.zeros(n)
    a, b = (np.array(v, dtype=float) for v in init)
    need = (w - b[None, :]).max(axis=1) + beta * 1e-6
    # one exact sweep puts row and column sums back near 1 after the shift
    return _coordinate_sweep(np.maximum(a, need), b, w, beta)


def _coordinate_sweep(a, b, w, beta):
    """One pass of exact coordinate minimization of the dual (rows, then columns)."""
    sb = np.sqrt(beta)

    def solve(offsets):
        # root of sum_k sqrt(beta / (t + offsets_k)) = 1 for t > -min(offsets)
        lo = -offsets.min()
        f = lambda t: sb * np.sum(1.0 / np.sqrt(t + offsets)) - 1.0
        step = max(1e-300, beta)
        while f(lo + step) > 0 and step < 1e300:
            step *= 2
        hi = lo + step
        left = lo + step / 2 if step > beta else lo + np.finfo(float).tiny
        while f(left) < 0 and left > lo:
            left = lo + (left - lo) / 2
        return brentq(f, left, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps)

    for i in range(len(a)):
        a[i] = solve(b - w[i])
    for j in range(len(b)):
        b[j] = solve(a - w[:, j])
    return a, b


def _gradient(a, b, w, sb):
    x = sb / np.sqrt(a[:, None] + b[None, :] - w)
    return 1.0 - x.sum(axis=1), 1.0 - x.sum(axis=0), x


def _newton(a, b, w, beta, tol, max_iter):
    n = w.shape[0]
    sb = np.sqrt(beta)
    val = _dual_value(a, b, w, beta)
    ga, gb, x = _gradient(a, b, w, sb)
    res = max(np.abs(ga).max(), np.abs(gb).max())
    best = (a, b, res)
    stalled = 0
    for it in range(1, max_iter + 1):
        if res < tol or stalled >= 3:
            break
        h = x ** 3 / (2.0 * beta)
        H = np.zeros((2 * n, 2 * n))
        H[:n, :n] = np.diag(h.sum(axis=1))
        H[n:, n:] = np.diag(h.sum(axis=0))
        H[:n, n:] = h
        H[n:, :n] = h.T
        g = np.concatenate([ga, gb])
        # the dual is invariant under a + c, b - c; pin the last b coordinate
        d = np.zeros(2 * n)
        try:
            d[:-1] = np.linalg.solve(H[:-1, :-1], -g[:-1])
        except np.linalg.LinAlgError:
            d[:-1] = np.linalg.lstsq(H[:-1, :-1], -g[:-1], rcond=None)[0]
        da, db = d[:n], d[n:]
        slope = float(g @ d)
        t = 1.0
        accepted = False
        while t >= 1e-12:
            na, nb = a + t * da, b + t * db
            if np.all(na[:, None] + nb[None, :] - w > 0):
                nval = _dual_value(na, nb, w, beta)
                nga, ngb, nx = _gradient(na, nb, w, sb)
                nres = max(np.abs(nga).max(), np.abs(ngb).max())
                # near the optimum value differences sit at rounding level,
                # so a drop in the gradient residual also counts as progress
                if nval <= val + 1e-4 * t * slope or nres < (1 - 1e-4 * t) * res:
                    accepted = True
                    break
            t *= 0.5
        if not accepted:
            na, nb = _coordinate_sweep(a.copy(), b.copy(), w, beta)
            nval = _dual_value(na, nb, w, beta)
            nga, ngb, nx = _gradient(na, nb, w, sb)
            nres = max(np.abs(nga).max(), np.abs(ngb).max())
            if nres >= res:
                break
        a, b, val, ga, gb, x, res = na, nb, nval, nga, ngb, nx, nres
        # only a rounding-level plateau counts as a stall
        if res > 1e-7 or res < 0.5 * best[2]:
            stalled = 0
        else:
            stalled += 1
        if res < best[2]:
            best = (a, b, res)
    return best[0], best[1], best[2], it


def regularized_optimum(u, weights, params: RegularizerParams, *, tol: float = 1e-10,
                        max_iter: int = 500, init=None, method: str = "newton") -> RegularizedOptimum:
    """Maximize ``sum lam_i u_ij x_ij - beta sum 1/x_ij`` over bi-stochastic ``x``.

    Parameters
    ----------
    u : array-like, shape (n, n)
        Normalized utilities (each row has min 0 and max 1).
    weights : array-like, shape (n,)
        Bids in ``[0, params.lambda_bar]``.
    params : RegularizerParams
    tol : float
        Required max row/column sum residual of the recovered ``x``.
    init : tuple of arrays, optional
        Warm-start duals ``(a, b)``, e.g. from the previous round.
    method : {"newton", "coordinate"}
        ``"coordinate"`` runs exact row/column dual sweeps (each coordinate
        solved by bracketing); ``"newton"`` runs damped Newton on the same
        dual and falls back to sweeps when a line search stalls.

    Raises
    ------
    ConvergenceError
        If the residual tolerance is not met within ``max_iter`` iterations.
    """
    u, lam = _check_inputs(u, weights, params)
    return _optimum(u, lam, params.beta, tol=tol, max_iter=max_iter, init=init, method=method)


def _optimum(u, lam, beta, *, tol=1e-10, max_iter=500, init=None, method="newton"):
    w = lam[:, None] * u
    # Iterate on offsets (da, db) from reference duals (a_ref, b_ref). Slacks near the
    # optimal matching are ~beta while the duals are ~lambda_bar, so forming a + b - w
    # afresh each step loses ~1e-9 relative accuracy to cancellation. The reduced matrix
    # is formed once per reference; its rounding is a fixed ~1e-15 perturbation of w.
    _, a_ref, b_ref = _hungarian(w)
    if init is not None:
        init = (np.asarray(init[0]) - a_ref, np.asarray(init[1]) - b_ref)
    reduced = -np.maximum(a_ref[:, None] + b_ref[None, :] - w, 0.0)
    da, db = _feasible_start(reduced, beta, init)
    its = 0
    for _ in range(4):
        if method == "newton":
            da, db, res, k = _newton(da, db, reduced, beta, min(tol, 1e-12), max_iter - its)
        elif method == "coordinate":
            res, k = np.inf, 0
            for k in range(1, max_iter - its + 1):
                da, db = _coordinate_sweep(da, db, reduced, beta)
                x = np.sqrt(beta / (da[:, None] + db[None, :] - reduced))
                res = float(np.abs(1 - x.sum(axis=1)).max())  # columns are exact after the sweep
                if res < tol:
                    break
        else:
            raise RegularizationError(f"unknown method {method!r}")
        its += k
        if res < tol or its >= max_iter:
            break
        # rebase: fold the offsets into the reference so they restart near zero
        reduced = reduced - da[:, None] - db[None, :]
        a_ref, b_ref = a_ref + da, b_ref + db
        da, db = np.zeros_like(da), np.zeros_like(db)
    if res >= tol:
        raise ConvergenceError("regularized optimum did not reach tolerance", res)
    x = np.sqrt(beta / (da[:, None] + db[None, :] - reduced))
    value = float(a_ref.sum() + b_ref.sum()) + _dual_value(da, db, reduced, beta)
    a, b = a_ref + da, b_ref + db
    shift = b.mean()
    return RegularizedOptimum(
        x=x, a=a + shift, b=b - shift,
        value_reg=value,
        value_linear=float((w * x).sum()),
        residual=float(res),
        iterations=its,
    )


def regularized_payment(u, weights, params: RegularizerParams, i: int, *,
                        optimum: RegularizedOptimum | None = None) -> float:
    """Externality charged to player ``i`` under the regularized objective.

    ``P_i = OPT_0(lam with lam_i = 0) - (OPT_0(lam) - sum_j x_ij lam_i u_ij)``.
    """
    u, lam = _check_inputs(u, weights, params)
    if lam[i] == 0:
        return 0.0
    full = optimum if optimum is not None else _optimum(u, lam, params.beta)
    lam0 = lam.copy()
    lam0[i] = 0.0
    without = _optimum(u, lam0, params.beta, init=(full.a, full.b))
    return _payment(full, without.value_reg, u, lam, i)


def _payment(full: RegularizedOptimum, opt_without: float, u, lam, i) -> float:
    own = float(lam[i] * (u[i] @ full.x[i]))
    return max(0.0, opt_without - (full.value_reg - own))


class RoundMenu:
    """Player ``i``'s price and utility as a function of its own bid, opponents fixed.

    Caches the opponents-only optimum and warm-starts each solve from the
    previous one.
    """

    def __init__(self, u, opponent_weights, params: RegularizerParams, i: int):
        self.u = u
        self.i = i
        self.beta = params.beta
        self.lam = np.array(opponent_weights, dtype=float)
        self.lam[i] = 0.0
        base = _optimum(u, self.lam, self.beta)
        self.opt_without = base.value_reg
        self._init = (base.a, base.b)

    def evaluate(self, bid: float) -> tuple[float, float, RegularizedOptimum]:
        """Return ``(payment, utility, optimum)`` for own bid ``bid``."""
        lam = self.lam.copy()
        lam[self.i] = bid
        if bid == 0:
            opt = _optimum(self.u, lam, self.beta, init=self._init)
            return 0.0, float(self.u[self.i] @ opt.x[self.i]), opt
        opt = _optimum(self.u, lam, self.beta, init=self._init)
        self._init = (opt.a, opt.b)
        return _payment(opt, self.opt_without, self.u, lam, self.i), float(self.u[self.i] @ opt.x[self.i]), opt


def _round_groups(opponent_bids, i):
    bids = np.atleast_2d(np.array(opponent_bids, dtype=float))
    if bids.shape[0] == 0:
        raise RegularizationError("need at least one round of opponent bids")
    masked = bids.copy()
    masked[:, i] = 0.0
    profiles, counts = np.unique(masked, axis=0, return_counts=True)
    return profiles, counts


def best_response(opponent_bids, u, i: int, params: RegularizerParams, budget: float,
                  *, xtol: float = 1e-10) -> float:
    """Constant bid for player ``i`` that exhausts ``budget`` against recorded opponents.

    ``opponent_bids`` is a (T, n) array of per-round bids; column ``i`` is
    ignored. Total spend is strictly increasing in the bid, so the root of
    ``spend(bid) = budget`` is unique; the result is capped at
    ``params.lambda_bar``. The returned bid is within ``xtol`` of the root and
    never overspends, so playing it every round needs no budget clamping.
    """
    if not budget > 0:
        raise RegularizationError("budget must be positive")
    u = as_utility_matrix(u, normalized=True)
    profiles, counts = _round_groups(opponent_bids, i)
    if np.any(profiles > params.lambda_bar * (1 + 1e-12)) or np.any(profiles < 0):
        raise RegularizationError("opponent bids must lie in [0, lambda_bar]")
    menus = [RoundMenu(u, p, params, i) for p in profiles]

    def spend(bid):
        return sum(c * m.evaluate(bid)[0] for m, c in zip(menus, counts))

    cap = params.lambda_bar
    if spend(cap) <= budget:
        return float(cap)
    root = brentq(lambda t: spend(t) - budget, 0.0, cap, xtol=xtol, rtol=4 * np.finfo(float).eps)
    if spend(root) <= budget:
        return float(root)
    # land on the affordable side of the root
    lo, hi = max(0.0, root - xtol), root
    while spend(lo) > budget:
        lo, hi = max(0.0, lo - 2 * (hi - lo)), lo
    while hi - lo > xtol:
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if spend(mid) <= budget else (lo, mid)
    return float(lo)


def regularized_payments(u, weights, params: RegularizerParams, *,
                         optimum: RegularizedOptimum | None = None) -> np.ndarray:
    """All players' regularized payments for one bid profile."""
    u, lam = _check_inputs(u, weights, params)
    full = optimum if optimum is not None else _optimum(u, lam, params.beta)
    out = np.zeros(len(lam))
    for i in np.flatnonzero(lam > 0):
        lam0 = lam.copy()
        lam0[i] = 0.0
        without = _optimum(u, lam0, params.beta, init=(full.a, full.b))
        out[i] = _payment(full, without.value_reg, u, lam, i)
    return out


def menu_totals(opponent_bids, u, i: int, params: RegularizerParams, bid: float) -> tuple[float, float]:
    """Total ``(spend, utility)`` over recorded rounds for a constant own bid."""
    u = as_utility_matrix(u, normalized=True)
    profiles, counts = _round_groups(opponent_bids, i)
    spend = util = 0.0
    for p, c in zip(profiles, counts):
        pay, ut, _ = RoundMenu(u, p, params, i).evaluate(bid)
        spend += c * pay
        util += c * ut
    return spend, util


def tangent_basis(n: int) -> np.ndarray:
    """Orthonormal basis (n*n, (n-1)**2) of matrices with zero row and column sums."""
    rows = np.kron(np.eye(n), np.ones((1, n)))
    cols = np.kron(np.ones((1, n)), np.eye(n))
    return null_space(np.vstack([rows, cols]))


def quadratic_price(u, weights, params: RegularizerParams, i: int, *,
                    optimum: RegularizedOptimum | None = None) -> float:
    """Second-order approximation of player ``i``'s regularized payment.

    ``(lam_i**2 / 4) g^T H^{-1} g`` where ``g`` is the gradient of player
    ``i``'s utility and ``H`` is the quadratic coefficient in
    ``F(x + d) = F(x) - d^T H d``, i.e. ``diag(beta / x**3)``, both restricted
    to row- and column-sum preserving directions.
    """
    u, lam = _check_inputs(u, weights, params)
    if lam[i] == 0:
        return 0.0
    opt = optimum if optimum is not None else _optimum(u, lam, params.beta)
    n = u.shape[0]
    Q = tangent_basis(n)
    grad = np.zeros((n, n))
    grad[i] = u[i]
    h = (params.beta / opt.x ** 3).reshape(-1)
    g = Q.T @ grad.reshape(-1)
    Hq = Q.T @ (h[:, None] * Q)
    try:
        z = np.linalg.solve(Hq, g)
    except np.linalg.LinAlgError as exc:
        raise RegularizationError("projected Hessian is singular") from exc
    if np.linalg.norm(Hq @ z - g) > 1e-10 * max(1.0, np.linalg.norm(g)):
        raise RegularizationError("projected Hessian solve is inaccurate")
    return float(lam[i] ** 2 / 4.0 * g @ z)


def eta_bound(weights, n: int, params: RegularizerParams, M: float) -> EtaBound:
    """Welfare and price slack of regularization: ``sum(lam)/M + beta n^3 M``."""
    if not M > 1:
        raise RegularizationError(f"M must exceed 1, got {M}")
    lam = np.asarray(weights, dtype=float)
    return EtaBound(float(lam.sum() / M + params.beta * n ** 3 * M), float(M))


def minimize_eta(weights, n: int, params: RegularizerParams) -> EtaBound:
    """Smallest ``eta`` over ``M > 1``.

    The closed form is convex in ``M`` with minimizer ``sqrt(sum(lam) / (beta n^3))``;
    when that falls at or below 1 the infimum is approached as ``M -> 1`` and the
    bound is returned at the next float above 1.
    """
    lam = np.asarray(weights, dtype=float)
    M = np.sqrt(lam.sum() / (params.beta * n ** 3))
    return eta_bound(lam, n, params, max(float(M), float(np.nextafter(1.0, 2.0))))


def canonical_M(n: int, params: RegularizerParams) -> float:
    """The free parameter ``sqrt(lambda_bar / beta) / n`` that balances both terms of eta."""
    return float(np.sqrt(params.lambda_bar / params.beta) / n)


def linear_opt(u, weights) -> float:
    return solve_assignment(u, weights)[0].value
