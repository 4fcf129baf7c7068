"""How fast does an interacting particle cloud approach its mean-field limit?

Each interacting cloud is compared, under the same noise, with decoupled
copies driven by a large reference cloud.  The mean squared Wasserstein gap
should decay like 1/N, i.e. with log-log slope -1.

Run: python3 demos/propagation_of_chaos.py   (a few seconds)
"""

from mfclab.lab.config import ExperimentConfig
from mfclab.lab.experiments import run_chaos_experiment

cfg = ExperimentConfig(kind="chaos", preset="tanh-drift", N_list=(8, 16, 32, 64, 128, 256), M=200, n_steps=50)
res = run_chaos_experiment(cfg)
print(f"{'N':>5}  {'E W2^2':>10}  {'stderr':>9}")
for N, s, e in zip(res.table.N, res.table.stat, res.table.stderr):
    print(f"{N:5d}  {s:10.3e}  {e:9.1e}")
fit = res.table.fit
print(f"fitted slope {fit.slope:.3f}, 95% CI [{fit.ci[0]:.3f}, {fit.ci[1]:.3f}]")
