"""Controlling agents who only see a noisy signal of the common state.

Particles are reweighted by the likelihood of the observation path, which
turns the filtering problem into a weighted particle system.  In the
linear-Gaussian case, the Kalman filter plus the control Riccati equation give
the exact optimal value. A search over linear filter gains should land on the
oracle gain.

Run: python3 demos/partial_observation.py   (about 10 s)
"""

import numpy as np

from mfclab.noise import TimeGrid
from mfclab.partialobs import (
    LqgParams,
    estimate_partial_value,
    linear_filter_policy,
    lqg_oracle,
    optimize_parametric_policy,
)

p = LqgParams(eta=1.0)
pspec = p.pspec()
grid = TimeGrid(p.T, 50)
oracle = lqg_oracle(p)
print(f"oracle value {oracle.value:.5f}, oracle gain at t=0 {oracle.gain(0.0):.3f}")

for N in (16, 64, 256):
    est = estimate_partial_value(pspec, oracle.policy(), N, 4000, grid, seed=0)
    print(f"N={N:4d}  certainty-equivalence value {est.value:.5f} +- {est.stderr:.5f}")

gains = np.arange(0.0, 3.01, 0.25)
search = optimize_parametric_policy(pspec, linear_filter_policy, gains, 64, 2000, grid, 0)
for g, v in zip(gains, search.values):
    mark = "  <- best" if g == search.best_params[0] else ""
    print(f"gain {g:4.2f}  value {v:.5f}{mark}")
