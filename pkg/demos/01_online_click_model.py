"""Online matrix factorization on a toy click stream.

Three users with opposite tastes click on four items. Parameters drift with
a half-life of 200 steps, and halfway through user 0 changes its mind. The
filter only touches the user and item of each click and predicts everyone
else lazily when they next show up.

Run with ``python3 demos/01_online_click_model.py``.
"""

import numpy as np

from dekf import DecoupledEKF, DynamicsSpec, Family, MFSignal, alpha_from_half_life
from dekf import snapshot

rng = np.random.default_rng(0)
k = 2
alpha = alpha_from_half_life(200)
dyn = DynamicsSpec(pi=0.3 * np.ones(k), Pi=0.2 * np.eye(k), alpha=alpha,
                   omega=(1 - alpha ** 2) * 0.3 * np.eye(k))
model = DecoupledEKF(MFSignal(k), Family.bernoulli(), defaults={"user": dyn, "item": dyn})

users = np.array([[1.5, 0.0], [0.0, 1.5], [1.0, 1.0]])
items = np.array([[1.5, -1.0], [-1.0, 1.5], [1.0, 1.0], [-1.0, -1.0]])

for t in range(1, 2001):
    if t == 1000:
        users[0] = [0.0, 1.5]
    u, i = int(rng.integers(3)), int(rng.integers(4))
    p = 1 / (1 + np.exp(-users[u] @ items[i]))
    model.update(float(rng.random() < p), (("user", u), ("item", i)), t)
    if t in (200, 999, 1200, 2000):
        row = [model.predict_mean((("user", 0), ("item", j)), t)[0] for j in range(4)]
        truth = 1 / (1 + np.exp(-items @ users[0]))
        print(f"t={t:4d} user 0 predicted {np.round(row, 2)}  true {np.round(truth, 2)}")

print()
print("store counters:", dict(model.store.counters))
text = snapshot.dumps(model.store.entities)
print(f"text snapshot: {len(text.splitlines()) - 3} records, first line of data:")
print(text.splitlines()[3][:100], "...")
