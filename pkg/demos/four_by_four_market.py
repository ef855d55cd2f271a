"""Prices for a small contested market, checked three ways.

Two players want items A and C, two others want only C. We compute one-shot
VCG prices at fixed bid weights, check two candidate price vectors as
equilibria, then search for an equilibrium from scratch and certify it.

Run: python3 demos/four_by_four_market.py
"""

import numpy as np

from apexmarket import certify_solution, find_hz_equilibrium, vcg_outcome, verify_ce

u = np.array([[11, 9, 14, 0], [11, 9, 14, 0], [0, 0, 10, 0], [0, 0, 10, 0]], dtype=float)
lam = np.array([4, 4, 2, 2]) / 7

out = vcg_outcome(u, lam)
print("assignment:", out.assignment.pi)
print("item prices:", np.round(out.prices, 6))

half = np.kron(np.eye(2), np.full((2, 2), 0.5))
for label, x, prices, weights in (
    ("half/half at (1.1, 0.9, 2, 0)", half, [1.1, 0.9, 2.0, 0.0], None),
    ("mixed bundle at the VCG prices",
     np.array([[.5, .35, .15, 0], [.5, .35, .15, 0], [0, .15, .35, .5], [0, .15, .35, .5]]), out.prices, lam),
):
    cert = verify_ce(u, x, prices, weights=weights, delta=1e-9)
    print(f"{label}: {'equilibrium' if cert.passed else 'rejected'}")

sol = find_hz_equilibrium(u, samples=512, seed=0)
cert = certify_solution(u, sol, 0.05)
print(f"search: converged={sol.converged} after {sol.iterations} steps, residual {sol.residual:.1e}")
print("  weights:", np.round(sol.lambda_star, 4), " prices:", np.round(sol.prices, 4))
print("  certificate at delta=0.05:", "pass" if cert.passed else f"fail {cert.failing_players()}")
