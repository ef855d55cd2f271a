import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import brentq

from apexmarket.assignment import AssignmentError, solve_assignment, vcg_prices
from apexmarket.regularized import (
    RegularizationError,
    RegularizerParams,
    best_response,
    canonical_M,
    eta_bound,
    minimize_eta,
    quadratic_price,
    regularized_optimum,
    regularized_payment,
    regularized_payments,
)
from conftest import random_normalized

settings.register_profile("regularized", deadline=None, max_examples=25)
settings.load_profile("regularized")

seeds = st.integers(0, 2 ** 32 - 1)


def instance(seed, n=None, lambda_bar=None):
    r = np.random.default_rng(seed)
    n = n or int(r.integers(2, 5))
    lb = lambda_bar or float(r.choice([5.0, 20.0]))
    p = RegularizerParams.canonical(lb, n)
    return r, random_normalized(r, n), r.uniform(0, lb, n), p


def objective(w, x, beta):
    return float((w * x).sum() - beta * (1 / x).sum())


# -- parameters ----------------------------------------------------------------------

def test_params_validation():
    with pytest.raises(RegularizationError):
        RegularizerParams(0.0, 5.0)
    with pytest.raises(RegularizationError):
        RegularizerParams(1e-3, 1.0)
    p = RegularizerParams.canonical(10, 3)
    assert p.beta == pytest.approx(10.0 ** -3 * 3.0 ** -4)


def test_eta_closed_form():
    p = RegularizerParams(0.01, 5.0)
    assert eta_bound(np.zeros(3), 3, p, 7.0).eta == pytest.approx(0.01 * 27 * 7)
    lam = np.array([1.0, 2.0, 3.0])
    assert eta_bound(lam, 3, p, 4.0).eta == pytest.approx(6 / 4 + 0.01 * 27 * 4)
    assert eta_bound(lam, 3, p, 1e9).eta > 1e6
    with pytest.raises(RegularizationError):
        eta_bound(lam, 3, p, 1.0)


def test_eta_at_canonical_coupling():
    lb, n = 10.0, 3
    p = RegularizerParams.canonical(lb, n)
    M = np.sqrt(lb / p.beta) / n
    assert canonical_M(n, p) == pytest.approx(M)
    assert eta_bound(np.full(n, lb), n, p, M).eta <= 2 / lb + 1e-12


@given(seeds)
def test_minimize_eta_is_minimal(seed):
    r, _, lam, p = instance(seed)
    n = len(lam)
    best = minimize_eta(lam, n, p)
    for M in np.geomspace(1.0001, 1e6, 200):
        assert best.eta <= eta_bound(lam, n, p, M).eta + 1e-12


# -- optimum -------------------------------------------------------------------------------

def test_zero_weights_give_uniform_allocation():
    u = np.array([[1, 0, 0.5], [0.5, 1, 0], [0, 0.5, 1]])
    opt = regularized_optimum(u, [0, 0, 0], RegularizerParams(0.01, 5.0))
    assert np.allclose(opt.x, 1 / 3, atol=1e-10)


def test_circulant_instance_gives_circulant_allocation():
    u = np.array([[1, 0, 0.5], [0.5, 1, 0], [0, 0.5, 1]])
    x = regularized_optimum(u, [2, 2, 2], RegularizerParams(0.01, 5.0)).x
    shifted = np.roll(np.roll(x, 1, axis=0), 1, axis=1)
    assert np.allclose(x, shifted, atol=1e-10)


def test_two_by_two_identity_root():
    beta = 0.01
    opt = regularized_optimum(np.eye(2), [1, 1], RegularizerParams(beta, 5.0))
    p = brentq(lambda q: 1 + beta / q ** 2 - beta / (1 - q) ** 2, 0.5 + 1e-12, 1 - 1e-12)
    assert p == pytest.approx(0.90, abs=0.01)
    assert np.allclose(opt.x, [[p, 1 - p], [1 - p, p]], atol=1e-9)


@given(seeds)
def test_optimum_invariants(seed):
    r, u, lam, p = instance(seed)
    n = len(lam)
    opt = regularized_optimum(u, lam, p)
    w = lam[:, None] * u
    assert np.all(opt.x > 0)
    assert np.abs(opt.x.sum(axis=0) - 1).max() < 1e-10
    assert np.abs(opt.x.sum(axis=1) - 1).max() < 1e-10
    assert opt.stationarity_residual(w, p.beta) < 1e-8
    assert np.all(opt.x > np.sqrt(p.beta / (n ** 4 * p.lambda_bar)) / 3)
    assert opt.value_linear == pytest.approx((w * opt.x).sum(), abs=1e-9)
    assert opt.value_reg == pytest.approx(objective(w, opt.x, p.beta), rel=1e-10, abs=1e-9)
    OPT = solve_assignment(u, lam)[0].value
    for M in (2.0, 10.0, canonical_M(n, p)):
        eta = eta_bound(lam, n, p, M).eta
        assert OPT - eta - 1e-9 <= opt.value_reg <= OPT + 1e-9
        assert opt.value_linear >= OPT - eta - 1e-9


@given(seeds)
def test_gradient_vanishes_along_feasible_directions(seed):
    r = np.random.default_rng(seed)
    n = 3
    u = random_normalized(r, n)
    lam = r.uniform(0, 5, n)
    beta = 1e-2
    opt = regularized_optimum(u, lam, RegularizerParams(beta, 5.0))
    w = lam[:, None] * u
    h = 1e-6 * opt.x.min()
    for _ in range(20):
        d = r.standard_normal((n, n))
        d -= d.mean(axis=1, keepdims=True)
        d -= d.mean(axis=0, keepdims=True)
        d /= np.abs(d).max()
        slope = (objective(w, opt.x + h * d, beta) - objective(w, opt.x - h * d, beta)) / (2 * h)
        assert abs(slope) < 1e-6


def test_coordinate_method_agrees_with_newton():
    r = np.random.default_rng(3)
    u = random_normalized(r, 3)
    lam = np.array([1.0, 2.0, 0.5])
    p = RegularizerParams(1e-3, 5.0)
    a = regularized_optimum(u, lam, p)
    b = regularized_optimum(u, lam, p, method="coordinate", max_iter=100000)
    assert np.allclose(a.x, b.x, atol=1e-8)


def test_warm_start_gives_same_optimum(rng):
    u = random_normalized(rng, 4)
    p = RegularizerParams.canonical(20, 4)
    lam = rng.uniform(0, 20, 4)
    base = regularized_optimum(u, lam, p)
    moved = regularized_optimum(u, lam * 1.01, p, init=(base.a, base.b))
    cold = regularized_optimum(u, lam * 1.01, p)
    assert np.allclose(moved.x, cold.x, atol=1e-9)


def test_optimum_input_errors():
    p = RegularizerParams(0.01, 5.0)
    with pytest.raises(AssignmentError):
        regularized_optimum([[2, 0], [0, 1]], [1, 1], p)
    with pytest.raises(RegularizationError):
        regularized_optimum(np.eye(2), [6, 1], p)


# -- payments -------------------------------------------------------------------------------

def test_zero_bid_pays_nothing(rng):
    u = random_normalized(rng, 3)
    p = RegularizerParams.canonical(5, 3)
    assert regularized_payment(u, [0, 2, 3], p, 0) == 0.0


def test_identity_payment_within_eta():
    p = RegularizerParams(0.01, 5.0)
    P = regularized_payment(np.eye(2), [1, 1], p, 0)
    assert 0 <= P <= eta_bound([1, 1], 2, p, 10).eta


def test_contested_payment_near_vcg():
    p = RegularizerParams(0.01, 5.0)
    u = np.array([[1, 0], [1, 0]])
    lam = np.array([3, 1.5])
    opt = regularized_optimum(u, lam, p)
    P = regularized_payment(u, lam, p, 0)
    assert abs(P - 1.5 * opt.x[0, 0]) <= minimize_eta(lam, 2, p).eta


@given(seeds)
def test_payments_close_to_vcg_and_demand(seed):
    r, u, lam, p = instance(seed)
    n = len(lam)
    opt = regularized_optimum(u, lam, p)
    P = regularized_payments(u, lam, p, optimum=opt)
    C = vcg_prices(u, lam)
    for eta in (minimize_eta(lam, n, p).eta, eta_bound(lam, n, p, canonical_M(n, p)).eta):
        assert np.all(P >= -1e-9)
        assert np.all(np.abs(P - opt.x @ C) <= eta + 1e-8)
        for i in range(n):
            own = lam[i] * u[i] @ opt.x[i]
            for _ in range(10):
                y = r.dirichlet(np.ones(n))
                assert lam[i] * u[i] @ y <= own + y @ C - P[i] + eta + 1e-8


@given(seeds)
def test_truthful_bid_beats_deviation_by_curvature(seed):
    r, u, lam, p = instance(seed)
    n = len(lam)
    i = int(r.integers(n))
    gamma = 2 * p.beta
    opt = regularized_optimum(u, lam, p)
    gain = lam[i] * u[i] @ opt.x[i] - regularized_payment(u, lam, p, i, optimum=opt)
    for dev in r.uniform(0, p.lambda_bar, 4):
        alt = lam.copy()
        alt[i] = dev
        o2 = regularized_optimum(u, alt, p)
        gain2 = lam[i] * u[i] @ o2.x[i] - regularized_payment(u, alt, p, i, optimum=o2)
        assert gain - gain2 >= gamma / 2 * ((opt.x - o2.x) ** 2).sum() - 1e-8


@given(seeds)
def test_payment_and_utility_monotone_in_own_bid(seed):
    r, u, lam, p = instance(seed, n=3)
    i = int(r.integers(3))
    pays, utils = [], []
    for b in np.linspace(0, p.lambda_bar, 50):
        alt = lam.copy()
        alt[i] = b
        opt = regularized_optimum(u, alt, p)
        pays.append(regularized_payment(u, alt, p, i, optimum=opt))
        utils.append(u[i] @ opt.x[i])
    assert pays[0] == 0
    assert np.all(np.diff(pays) >= -1e-9)
    assert np.all(np.diff(utils) >= -1e-9)


# -- best response -----------------------------------------------------------------------------

def test_best_response_symmetric_players():
    u = np.array([[1, 0, 0.5], [1, 0, 0.5], [0, 1, 0.2]])
    p = RegularizerParams.canonical(5, 3)
    bids = np.array([[2.0, 2.0, 1.0], [3.0, 3.0, 0.5]])
    a = best_response(bids, u, 0, p, 2.0)
    b = best_response(bids, u, 1, p, 2.0)
    assert a == pytest.approx(b, abs=1e-9)


@given(seeds)
def test_best_response_exceeds_one_and_is_monotone(seed):
    r, u, _, p = instance(seed, n=3)
    T = 3
    bids = r.uniform(0, p.lambda_bar, (T, 3))
    i = int(r.integers(3))
    lam = best_response(bids, u, i, p, T)
    assert lam > 1 or lam == p.lambda_bar
    assert best_response(bids, u, i, p, 2 * T) >= lam

    def spend(bid):
        total = 0.0
        for row in bids:
            alt = row.copy()
            alt[i] = bid
            total += regularized_payment(u, alt, p, i)
        return total

    assert spend(lam) <= T + 1e-9
    if lam < p.lambda_bar:
        # within 1e-10 of the root, on the affordable side
        assert spend(min(lam + 1e-9, p.lambda_bar)) > T


def test_best_response_errors(rng):
    u = random_normalized(rng, 2)
    p = RegularizerParams.canonical(5, 2)
    with pytest.raises(RegularizationError):
        best_response(np.ones((1, 2)), u, 0, p, 0.0)
    with pytest.raises(RegularizationError):
        best_response(np.empty((0, 2)), u, 0, p, 1.0)


# -- quadratic price ------------------------------------------------------------------------------

def test_quadratic_price_zero_bid_and_scaling(rng):
    u = random_normalized(rng, 3)
    p = RegularizerParams.canonical(20, 3)
    lam = np.array([0.0, 3.0, 5.0])
    assert quadratic_price(u, lam, p, 0) == 0.0
    lam[0] = 0.01
    opt = regularized_optimum(u, lam, p)
    q1 = quadratic_price(u, lam, p, 0, optimum=opt)
    lam[0] = 0.02
    q2 = quadratic_price(u, lam, p, 0, optimum=opt)
    assert q2 == pytest.approx(4 * q1, rel=1e-12)


def _ratios(frac, count=40, seed=5):
    r = np.random.default_rng(seed)
    lb = 20.0
    p = RegularizerParams.canonical(lb, 3)
    out = []
    for _ in range(count):
        u = random_normalized(r, 3)
        lam = r.uniform(0, lb, 3)
        lam[0] = frac * lb
        out.append(quadratic_price(u, lam, p, 0) / regularized_payment(u, lam, p, 0))
    return np.array(out)


def test_quadratic_price_matches_payment_for_small_bids():
    ratios = _ratios(1e-4)
    assert np.all((ratios >= 0.8) & (ratios <= 1.25))
    assert np.abs(ratios - 1).max() < np.abs(_ratios(1e-2) - 1).max()


@pytest.mark.xfail(strict=True, reason="second-order regime at canonical curvature needs bids far below 0.05 of the cap")
def test_quadratic_price_ratio_at_five_percent_of_cap():
    ratios = _ratios(0.05)
    assert np.all((ratios >= 0.8) & (ratios <= 1.25))
