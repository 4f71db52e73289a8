"""Thompson sampling, greedy-mean and random recommendations on tensor data.

A shortened version of the tensor-factorization bandit: each step fixes
random ids on the first three modes and offers every id of the last one.
Regret is normalized by a random policy run on the same candidate sets, so
random itself sits near 1.

Run with ``python3 demos/03_bandit_policies.py``.
"""

from dekf import config, sim

for dynamic in (False, True):
    cfg = config.builtin("tf").replace(dynamic=dynamic, n_sims=4, horizon=3000)
    series = sim.run_bandit(cfg)
    label = "dynamic" if dynamic else "static"
    summary = ", ".join(f"{p} {s.final_mean():.3f}" for p, s in series.items())
    print(f"{label:8s} normalized regret at t={cfg.horizon}: {summary}")
