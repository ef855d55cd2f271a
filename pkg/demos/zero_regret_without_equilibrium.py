"""Repeated unregularized VCG can leave nobody with regret and still miss equilibrium.

Both players only value item A. One bids a constant 3; the other cycles
4, 1.5, 1.5. Every round is a truthful VCG auction and each player's spend is
exactly what a hindsight best response would spend, yet the average allocation
makes the second player envious, so no prices support it.

Run: python3 demos/zero_regret_without_equilibrium.py
"""

import numpy as np

from apexmarket import (
    ScenarioConfig, StrategySpec, audit_strong_regret, envy_check, run_simulation, verify_ce,
)

u = np.array([[1.0, 0.0], [1.0, 0.0]])
T = 3000
cfg = ScenarioConfig(u=u, T=T, budgets=[T, T], lambda_bar=4.0,
                     strategies=(StrategySpec("constant", 3.0),
                                 StrategySpec("replay", script=(4.0, 1.5, 1.5), cycle=True)))
trace = run_simulation(cfg)
print("average allocation:\n", np.round(trace.x_bar, 6))
print("mean payment per round:", trace.mean_payments)
for i in range(2):
    rep = audit_strong_regret(trace, i)
    print(f"player {i}: strong regret {rep.strong_regret:.2e} (normalized {rep.normalized:.2e})")
print("envy:", envy_check(u, trace.x_bar).pairs)

worst = min((verify_ce(u, trace.x_bar, [a, b], delta=1e-9) for a in np.linspace(0, 3, 31)
             for b in np.linspace(0, 3, 31)), key=lambda c: len(c.failing_players()))
print("best price vector on a grid still fails for players", worst.failing_players())
