"""Prediction error of the filter against tuned AdaGrad on static regression.

Uses the shipped ``regression`` configuration with parameters frozen and
fewer replicas than the full experiment. Prints the cumulative average
absolute error at a few horizons for both methods.

Run with ``python3 demos/02_estimation_vs_adagrad.py``.
"""

from dekf import config, sim

cfg = config.builtin("regression").replace(dynamic=False, n_sims=3, methods=["dekf", "adagrad"])
series = sim.run_estimation(cfg, tune_adagrad=True)
print(f"AdaGrad learning-rate grid (final error): {series['adagrad'].meta['grid']}")
print(f"{'t':>6} {'dekf':>10} {'adagrad':>10}")
curves = {m: s.cumulative_error.mean(axis=0) for m, s in series.items()}
for t in (10, 100, 500, 1000, 2500, 5000):
    print(f"{t:6d} {curves['dekf'][t - 1]:10.5f} {curves['adagrad'][t - 1]:10.5f}")
