"""Repeated allocation with token budgets.

Each round every player submits a bid weight, the round optimizer picks an
allocation for the weighted utilities and each player is charged the
externality it imposes on the others. Two round optimizers are available:
exact VCG on permutations and the barrier-regularized fractional optimum.
Budgets are enforced by re-running a round with an over-spending player's
bid set to zero.

The auditors compare a player's realized utility with the best constant bid
(or two-level bid mixture) in hindsight against the recorded opponent bids,
and check the time-averaged outcome as an approximate competitive equilibrium.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .assignment import as_utility_matrix, envelope_lines, permutation_matrix, vcg_outcome, vcg_prices
from .equilibrium import EquilibriumCertificate, best_affordable_bundle, lambda_max, verify_ce
from .regularized import (
    RegularizerParams,
    _optimum,
    _payment,
    best_response,
    menu_totals,
    regularized_payments,
)

EXACT = "exact-vcg"
REGULARIZED = "regularized"


class ConfigError(ValueError):
    pass


# -- strategies -------------------------------------------------------------------

@dataclass(frozen=True)
class StrategySpec:
    """How one player bids.

    kind : {"constant", "replay", "bwk-pacer"}
        ``constant`` bids ``value`` every round. ``replay`` bids ``script[t]``
        (cycling through ``script`` if ``cycle``). ``bwk-pacer`` starts at
        ``value`` and multiplies its bid by ``step`` while its spend is below
        ``rate * t`` and divides by ``step`` otherwise; ``jitter`` adds seeded
        multiplicative noise of that relative size. ``rate`` defaults to the
        per-round budget.
    """

    kind: str
    value: float = 1.0
    script: tuple[float, ...] = ()
    cycle: bool = False
    rate: float | None = None
    step: float = 1.05
    jitter: float = 0.0

    def validate(self, T: int, lambda_bar: float) -> None:
        if self.kind == "constant":
            bids = [self.value]
        elif self.kind == "replay":
            if not self.script:
                raise ConfigError("replay strategy needs a non-empty script")
            if not self.cycle and len(self.script) < T:
                raise ConfigError(f"replay script has {len(self.script)} bids for {T} rounds")
            bids = list(self.script)
        elif self.kind == "bwk-pacer":
            if not self.step > 1:
                raise ConfigError("bwk-pacer step must exceed 1")
            if self.rate is not None and not self.rate > 0:
                raise ConfigError("bwk-pacer rate must be positive")
            if not 0 <= self.jitter < 1:
                raise ConfigError("bwk-pacer jitter must lie in [0, 1)")
            bids = [self.value]
        else:
            raise ConfigError(f"unknown strategy kind {self.kind!r}")
        bids = np.asarray(bids, dtype=float)
        if not np.all(np.isfinite(bids)) or np.any(bids < 0) or np.any(bids > lambda_bar * (1 + 1e-12)):
            raise ConfigError(f"{self.kind} bids must lie in [0, {lambda_bar}]")


@dataclass
class PlayerView:
    """What a strategy may see: its own history plus round count and cap."""

    t: int
    T: int
    budget: float
    budget_remaining: float
    lambda_bar: float
    own_bids: list = field(default_factory=list)
    own_charges: list = field(default_factory=list)
    own_utilities: list = field(default_factory=list)


class _Constant:
    def __init__(self, spec, view, rng):
        self.value = spec.value

    def bid(self, view):
        return self.value


class _Replay:
    def __init__(self, spec, view, rng):
        self.script = spec.script

    def bid(self, view):
        return self.script[view.t % len(self.script)]


class _Pacer:
    def __init__(self, spec, view, rng):
        self.level = spec.value
        self.step = spec.step
        self.rate = spec.rate if spec.rate is not None else view.budget / view.T
        self.jitter = spec.jitter
        self.rng = rng

    def bid(self, view):
        if view.t > 0:
            spent = view.budget - view.budget_remaining
            self.level = self.level * self.step if spent < self.rate * view.t else self.level / self.step
            self.level = min(max(self.level, 1e-6), view.lambda_bar)
        out = self.level
        if self.jitter:
            out *= 1.0 + self.jitter * (2.0 * self.rng.random() - 1.0)
        return float(min(max(out, 0.0), view.lambda_bar))


_STRATEGIES = {"constant": _Constant, "replay": _Replay, "bwk-pacer": _Pacer}


# -- configuration ------------------------------------------------------------------

@dataclass(frozen=True)
class ScenarioConfig:
    """One repeated-game run.

    ``beta`` is used only by the regularized backend; it defaults to
    ``lambda_bar**-3 * n**-4``. ``lambda_bar`` defaults to the weight cap of
    ``u`` for the exact backend and must be given for the regularized one.
    """

    u: np.ndarray
    T: int
    budgets: np.ndarray
    strategies: tuple[StrategySpec, ...]
    backend: str = EXACT
    lambda_bar: float | None = None
    beta: float | None = None
    seed: int = 0

    def __post_init__(self):
        normalized = self.backend == REGULARIZED
        try:
            u = as_utility_matrix(self.u, normalized=normalized)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        n = u.shape[0]
        object.__setattr__(self, "u", u)
        if self.backend not in (EXACT, REGULARIZED):
            raise ConfigError(f"backend must be {EXACT!r} or {REGULARIZED!r}")
        if int(self.T) != self.T or self.T < 1:
            raise ConfigError("T must be a positive integer")
        object.__setattr__(self, "T", int(self.T))
        budgets = np.broadcast_to(np.asarray(self.budgets, dtype=float), (n,)).copy()
        if not np.all(np.isfinite(budgets)) or np.any(budgets <= 0):
            raise ConfigError("budgets must be positive")
        object.__setattr__(self, "budgets", budgets)
        if len(self.strategies) != n:
            raise ConfigError(f"need {n} strategies, got {len(self.strategies)}")
        if self.lambda_bar is None:
            if normalized:
                raise ConfigError("the regularized backend needs lambda_bar")
            object.__setattr__(self, "lambda_bar", float(lambda_max(u)))
        if not (np.isfinite(self.lambda_bar) and self.lambda_bar > 0):
            raise ConfigError("lambda_bar must be positive")
        if normalized:
            beta = self.beta if self.beta is not None else RegularizerParams.canonical(self.lambda_bar, n).beta
            try:
                RegularizerParams(beta, self.lambda_bar)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
            object.__setattr__(self, "beta", float(beta))
        if int(self.seed) != self.seed or self.seed < 0:
            raise ConfigError("seed must be a nonnegative integer")
        for spec in self.strategies:
            spec.validate(self.T, self.lambda_bar)

    @property
    def n(self) -> int:
        return self.u.shape[0]

    @property
    def params(self) -> RegularizerParams:
        return RegularizerParams(self.beta, self.lambda_bar)


# -- rounds ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RoundRecord:
    t: int
    bids: np.ndarray
    allocation: np.ndarray
    charges: np.ndarray
    utilities: np.ndarray
    budget_remaining: np.ndarray
    clamped: np.ndarray


@dataclass(frozen=True)
class RoundOutcome:
    allocation: np.ndarray
    charges: np.ndarray


class RoundEngine:
    """Computes one round from the bid profile alone.

    Rounds are pure functions of the bids, memoized by profile, so a recorded
    round is reproduced bit-for-bit by recomputation.
    """

    def __init__(self, config: ScenarioConfig):
        self.u = config.u
        self.backend = config.backend
        self.beta = config.beta
        self._cache: dict[bytes, RoundOutcome] = {}

    def __call__(self, bids) -> RoundOutcome:
        bids = np.asarray(bids, dtype=float)
        key = bids.tobytes()
        if key not in self._cache:
            self._cache[key] = self._compute(bids, self.u)
        return self._cache[key]

    def _compute(self, bids, u) -> RoundOutcome:
        n = len(bids)
        if self.backend == EXACT:
            out = vcg_outcome(u, bids)
            return RoundOutcome(permutation_matrix(out.assignment.pi), out.payments.copy())
        full = _optimum(u, bids, self.beta)
        charges = np.zeros(n)
        for i in range(n):
            if bids[i] == 0:
                continue
            lam0 = bids.copy()
            lam0[i] = 0.0
            without = _optimum(u, lam0, self.beta, init=(full.a, full.b))
            charges[i] = _payment(full, without.value_reg, u, bids, i)
        return RoundOutcome(full.x, charges)

    def with_row(self, bids, i: int, row) -> RoundOutcome:
        """Round outcome when player ``i`` reports utility row ``row`` instead of its own."""
        u = self.u.copy()
        u[i] = row
        return self._compute(np.asarray(bids, dtype=float), u)


@dataclass(frozen=True)
class SimulationTrace:
    config: ScenarioConfig
    rounds: tuple[RoundRecord, ...]
    x_bar: np.ndarray
    mean_payments: np.ndarray
    mean_utilities: np.ndarray

    def bids(self) -> np.ndarray:
        """(T, n) recorded bids."""
        return np.array([r.bids for r in self.rounds])

    @classmethod
    def from_rounds(cls, config: ScenarioConfig, rounds: Sequence[RoundRecord]) -> "SimulationTrace":
        rounds = tuple(rounds)
        T = len(rounds)
        x_bar = sum(r.allocation for r in rounds) / T
        pay = sum(r.charges for r in rounds) / T
        util = sum(r.utilities for r in rounds) / T
        return cls(config, rounds, x_bar, pay, util)


def run_simulation(config: ScenarioConfig) -> SimulationTrace:
    """Play ``config.T`` rounds.

    A player whose charge would exceed its remaining budget has its bid for
    that round replaced by 0 (and flagged), after which the round is
    recomputed; this repeats until every charge is affordable.
    """
    n, T = config.n, config.T
    engine = RoundEngine(config)
    seeds = np.random.SeedSequence(config.seed).spawn(n)
    views = [PlayerView(0, T, float(config.budgets[i]), float(config.budgets[i]), float(config.lambda_bar))
             for i in range(n)]
    players = [_STRATEGIES[s.kind](s, views[i], np.random.default_rng(seeds[i]))
               for i, s in enumerate(config.strategies)]
    remaining = config.budgets.copy()
    # cumulative tolerance: absorbs rounding for players spending exactly B_i / T
    # per round while keeping total spend within B_i + 1e-9
    slack = 1e-9
    rounds = []
    for t in range(T):
        bids = np.empty(n)
        for i in range(n):
            views[i].t = t
            views[i].budget_remaining = max(float(remaining[i]), 0.0)
            bids[i] = players[i].bid(views[i])
        clamped = np.zeros(n, dtype=bool)
        out = engine(bids)
        while True:
            over = (out.charges > remaining + slack) & ~clamped
            if not over.any():
                break
            clamped |= over
            bids = np.where(clamped, 0.0, bids)
            out = engine(bids)
        utilities = (config.u * out.allocation).sum(axis=1)
        remaining = remaining - out.charges
        rounds.append(RoundRecord(t, bids.copy(), out.allocation, out.charges, utilities,
                                  np.maximum(remaining, 0.0), clamped))
        for i in range(n):
            views[i].own_bids.append(float(bids[i]))
            views[i].own_charges.append(float(out.charges[i]))
            views[i].own_utilities.append(float(utilities[i]))
    return SimulationTrace.from_rounds(config, rounds)


def counterfactual_round(trace: SimulationTrace, t: int, i: int, bid: float, row=None):
    """Replay round ``t`` with player ``i`` bidding ``bid`` (and optionally reporting ``row``).

    Opponent bids are those recorded. Returns ``(allocation, charge, utility)``
    where utility is measured with player ``i``'s true utility row.
    """
    if not 0 <= t < len(trace.rounds):
        raise IndexError(f"round {t} outside trace of length {len(trace.rounds)}")
    n = trace.config.n
    if not 0 <= i < n:
        raise IndexError(f"player {i} outside 0..{n - 1}")
    if not 0 <= bid <= trace.config.lambda_bar * (1 + 1e-12):
        raise ValueError(f"bid must lie in [0, {trace.config.lambda_bar}]")
    bids = trace.rounds[t].bids.copy()
    bids[i] = bid
    engine = RoundEngine(trace.config)
    out = engine(bids) if row is None else engine.with_row(bids, i, np.asarray(row, dtype=float))
    return out.allocation, float(out.charges[i]), float(trace.config.u[i] @ out.allocation[i])


# -- regret ------------------------------------------------------------------------------

@dataclass(frozen=True)
class RegretReport:
    """Hindsight comparison for one player; utilities in raw ``u`` units.

    For the exact backend the benchmark is the best distribution over at most
    two constant bids, a certified lower bound on the best feasible sequence.
    ``mix`` lists ``(probability, bid)`` pairs of that benchmark.
    """

    player: int
    realized_utility: float
    best_response_lambda: float
    best_response_utility: float
    best_response_spend: float
    strong_regret: float
    normalized: float
    budget: float
    mix: tuple[tuple[float, float], ...]
    lower_bound_only: bool


def _step_levels(trace: SimulationTrace, i: int):
    """Constant-bid menu for player ``i`` under the exact backend.

    Within a round, player ``i``'s charge and utility change only where the top
    line of ``max_j (t u_ij + V_j)`` changes, ``V_j`` being the opponents' best
    welfare when ``i`` takes ``j``. Those crossings are located exactly; each
    open interval between consecutive crossings (over all rounds) is one menu
    level, evaluated by running the round at an interior bid.
    """
    cfg = trace.config
    u, cap = cfg.u, float(cfg.lambda_bar)
    bids = trace.bids()
    masked = bids.copy()
    masked[:, i] = 0.0
    profiles, counts = np.unique(masked, axis=0, return_counts=True)
    engine = RoundEngine(cfg)
    points = {0.0, cap}
    for prof in profiles:
        slopes, V, _ = envelope_lines(u, prof, i)
        for j in range(len(slopes)):
            for k in range(j + 1, len(slopes)):
                if slopes[j] != slopes[k]:
                    tj = (V[k] - V[j]) / (slopes[j] - slopes[k])
                    if 0.0 < tj < cap:
                        points.add(float(tj))
    pts = np.array(sorted(points))
    levels = sorted({0.0, cap} | {float(0.5 * (a + b)) for a, b in zip(pts[:-1], pts[1:])})
    menu = []
    for lev in levels:
        spend = util = 0.0
        for prof, c in zip(profiles, counts):
            b = prof.copy()
            b[i] = lev
            out = engine(b)
            spend += c * out.charges[i]
            util += c * float(u[i] @ out.allocation[i])
        menu.append((lev, spend, util))
    return menu


def audit_strong_regret(trace: SimulationTrace, i: int, budget: float | None = None) -> RegretReport:
    """Strong regret of player ``i`` against the best budget-feasible constant play."""
    cfg = trace.config
    B = float(cfg.budgets[i] if budget is None else budget)
    if not B > 0:
        raise ValueError("budget must be positive")
    T = len(trace.rounds)
    realized = float(sum(r.utilities[i] for r in trace.rounds))
    if cfg.backend == REGULARIZED:
        bids = trace.bids()
        lam = best_response(bids, cfg.u, i, cfg.params, B)
        spend, best = menu_totals(bids, cfg.u, i, cfg.params, lam)
        mix = ((1.0, lam),)
        lower = False
    else:
        menu = _step_levels(trace, i)
        levels = np.array([m[0] for m in menu])
        spends = np.array([m[1] for m in menu])
        utils = np.array([m[2] for m in menu])
        # best mixture of at most two levels within budget: same LP as a unit bundle
        y, best = best_affordable_bundle(utils, np.maximum(spends, 0.0), B)
        spend = float(y @ spends)
        support = np.flatnonzero(y)
        mix = tuple((float(y[k]), float(levels[k])) for k in support)
        lam = float(levels[support[np.argmax(y[support])]])
        lower = True
    regret = best - realized
    return RegretReport(i, realized, float(lam), float(best), float(spend), float(regret),
                        float(regret / T), B, mix, lower)


# -- aggregate certificate ------------------------------------------------------------

@dataclass(frozen=True)
class AggregateReport:
    certificate: EquilibriumCertificate
    concentration: float
    best_response_lambdas: np.ndarray
    prices: np.ndarray
    scaled_prices: np.ndarray


def aggregate_and_verify(trace: SimulationTrace, delta: float) -> AggregateReport:
    """Check the time-averaged allocation of a regularized run as a ``delta``-equilibrium.

    Each player's hindsight best-response weight ``lam_i`` gives VCG prices
    ``C = vcg_prices(u, lam)``; these are shaded to ``(1 - delta / 3) C`` and the
    average allocation is verified at per-round budgets ``B_i / T`` with raw
    utilities. ``concentration`` is the mean over rounds of
    ``sum_i |lam_{i,t} - lam_i|``.
    """
    cfg = trace.config
    if cfg.backend != REGULARIZED:
        raise ConfigError(
            "aggregate verification needs a regularized-backend trace: with exact VCG "
            "a zero-regret run can still average to an allocation no prices support "
            "(two players, one contested item, alternating bids)")
    if not 0 < delta < 3:
        raise ValueError("delta must lie in (0, 3)")
    T = len(trace.rounds)
    bids = trace.bids()
    lam = np.array([best_response(bids, cfg.u, i, cfg.params, float(cfg.budgets[i])) for i in range(cfg.n)])
    C = vcg_prices(cfg.u, lam)
    shaded = (1.0 - delta / 3.0) * C
    cert = verify_ce(cfg.u, trace.x_bar, shaded, budgets=cfg.budgets / T, delta=delta)
    s = float(np.abs(bids - lam[None, :]).sum() / T)
    return AggregateReport(cert, s, lam, C, shaded)


def _complementarity_newton(u, params, b, lam, max_iter=30, steps=(1e-7, 1e-5, 1e-3)):
    """Newton on ``phi(lambda_bar - lam_i, b_i - P_i(lam)) = 0`` with Fischer-Burmeister ``phi``.

    The Jacobian is taken by central differences. No single step width suits
    every instance: a payment can depend on the player's own bid with slope
    ~1e-4, which solver noise swamps at narrow steps, while contested items
    bend payments sharply over widths near the regularization scale. Each
    iteration tries the widths in ``steps`` until one yields a descent step.
    """
    n = len(lam)
    cap = params.lambda_bar

    def system(x):
        a = cap - x
        c = b - regularized_payments(u, x, params)
        return a + c - np.sqrt(a * a + c * c)

    def jacobian(x, rel):
        J = np.empty((n, n))
        for k in range(n):
            h = rel * max(1.0, x[k])
            up, down = x.copy(), x.copy()
            up[k] = min(x[k] + h, cap)
            down[k] = max(x[k] - h, 0.0)
            J[:, k] = (system(up) - system(down)) / (up[k] - down[k])
        return J

    F = system(lam)
    res = float(np.abs(F).max())
    for _ in range(max_iter):
        if res < 1e-12:
            break
        for rel in steps:
            d = np.linalg.lstsq(jacobian(lam, rel), -F, rcond=None)[0]
            t = 1.0
            while t > 1e-6:
                trial = np.clip(lam + t * d, 0.0, cap)
                Ft = system(trial)
                if np.abs(Ft).max() < res:
                    break
                t *= 0.5
            else:
                continue
            break
        else:
            break
        lam, F, res = trial, Ft, float(np.abs(Ft).max())
    return lam, res


def mutual_best_responses(u, params: RegularizerParams, budgets, T: int, *,
                          beta_start: float = 1e-2, shrink: float = 0.3) -> tuple[np.ndarray, float]:
    """Constant bids that are best responses to each other over ``T`` identical rounds.

    With per-round budgets ``b = budgets / T`` each player either pays exactly
    ``b_i`` per round or sits at the cap paying at most ``b_i``. These
    complementarity conditions are solved by Newton's method while the
    curvature ``beta`` is lowered geometrically from ``beta_start`` to
    ``params.beta``, warm-starting each level from the last. At small ``beta``
    payments switch sharply where players contest an item, and neither
    best-response sweeps nor a cold Newton start reliably find the solution;
    at large ``beta`` payments are smooth and the solution is then tracked
    down. Payments at the returned bids sit within about ``1e-10`` (relative)
    below the per-round budgets.

    Returns the bids and ``max_i |lam_i - BR_i(lam)|``.
    """
    u = as_utility_matrix(u, normalized=True)
    n = u.shape[0]
    b = np.broadcast_to(np.asarray(budgets, dtype=float), (n,)) / T
    # aim a hair under the budget so Newton's last-digit error never overspends
    target = b * (1.0 - 1e-10)
    lam = np.ones(n)
    beta = max(beta_start, params.beta)
    while True:
        level = RegularizerParams(beta, params.lambda_bar)
        lam, _ = _complementarity_newton(u, level, target, lam)
        if beta == params.beta:
            break
        beta = max(beta * shrink, params.beta)

    def br(x, i):
        return best_response(x[None, :], u, i, params, float(b[i]))

    gap = max(abs(lam[i] - br(lam, i)) for i in range(n))
    return lam, float(gap)
