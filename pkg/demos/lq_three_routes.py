"""One LQ value computed three independent ways.

The Riccati ODE gives the exact value.  The lifted HJB solves a PDE on a
grid in the common-noise state, and the mean-field BSDE estimates the same
number by regression Monte Carlo.  Finally the BSDE control is fed back into
a particle simulation and compared with the exact optimal feedback.

Run: python3 demos/lq_three_routes.py   (a few seconds)
"""

import numpy as np

from mfclab.bsde import extract_control, solve_mf_bsde
from mfclab.hjb import default_grid, solve_value, value_at
from mfclab.model import LqParams, lq_value_oracle, solve_riccati
from mfclab.noise import NoiseBundle, TimeGrid
from mfclab.particle import EmpiricalFeedback, estimate_reward, simulate_controlled_system

p = LqParams()
spec = p.spec()

exact = lq_value_oracle(p, 0.0, p.m0, p.v0)
pde = value_at(solve_value(spec, spec.initial_law.quadrature(8), default_grid(spec, 200, 200)))
grid = TimeGrid(p.T, 25)
sol = solve_mf_bsde(spec, 512, 4000, grid, seed=1)

print(f"Riccati value     {exact: .5f}")
print(f"HJB on 200x200    {pde: .5f}   rel err {abs(pde - exact) / abs(exact):.1e}")
print(f"BSDE Y0           {sol.Y0: .5f}   +- {sol.Y0_stderr:.4f}")

# The regressed Z gives a feedback control.  Simulate 500 agents with it and,
# on the same noise, with the exact Riccati feedback: the paired difference
# isolates the control error from the Monte Carlo noise of either reward.
ric = solve_riccati(p)
N, M = 500, 1000
noise = NoiseBundle(5, M, N, grid)
J_bsde = estimate_reward(spec, simulate_controlled_system(spec, extract_control(spec, sol), N, grid, noise))
J_ric = estimate_reward(spec, simulate_controlled_system(
    spec, EmpiricalFeedback(lambda t, s: ric.feedback(t, s.mean)), N, grid, noise))
d = J_bsde - J_ric
print(f"reward with N={N} agents: BSDE control {J_bsde.mean(): .5f}, Riccati control {J_ric.mean(): .5f}"
      f"  (each +- {J_ric.std(ddof=1) / np.sqrt(M):.3f})")
print(f"paired difference {d.mean(): .5f} +- {d.std(ddof=1) / np.sqrt(M):.5f}")
