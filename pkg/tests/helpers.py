"""Random problem instances shared by the unit and acceptance tests."""

import numpy as np

from dekf import DynamicsSpec, EntityId, EntityPosterior, EntityStore, Family
from dekf.filter import predict_posterior
from dekf.signal import BIAS_ID, FMSignal, GLMSignal, MFSignal, TFSignal
from oracles import random_spd


def static_store(namespaces, k=1):
    dyn = DynamicsSpec(pi=np.zeros(k), Pi=np.eye(k), static=True)
    return EntityStore({ns: dyn for ns in namespaces})


def place(store, eid, mean, cov, t=0, ref=None):
    """Install a posterior directly. ``ref`` = (ref_mean, ref_cross, ref_cov)."""
    k = len(mean)
    if ref is None:
        ref = (np.zeros(k), np.zeros((k, k)), np.zeros((k, k)))
    store.entities[EntityId(*eid)] = EntityPosterior(
        np.array(mean, dtype=float), np.array(cov, dtype=float),
        *(np.array(r, dtype=float) for r in ref), t,
    )


def random_joint(rng, k, scale=1.0):
    """A random PSD joint covariance split into (cov, ref_cross, ref_cov)."""
    S = scale * random_spd(rng, 2 * k)
    return S[:k, :k], S[k:, :k], S[k:, k:]


def random_family(rng, kind, d=1):
    if kind == "gaussian":
        return Family.gaussian(random_spd(rng, d) if d > 1 else rng.uniform(0.3, 2.0))
    return Family.bernoulli() if kind == "bernoulli" else Family.poisson()


def random_observation(rng, family):
    if family.kind == "bernoulli":
        return np.array([float(rng.integers(0, 2))])
    if family.kind == "poisson":
        return np.array([float(rng.poisson(2.0))])
    return rng.standard_normal(family.dim)


def model_instance(rng, kind, scale=0.5):
    """(signal, layout, ctx) for a random MF/TF/FM observation."""
    if kind == "mf":
        a = int(rng.integers(1, 7))
        u, v = EntityId("user", int(rng.integers(0, 50))), EntityId("item", int(rng.integers(0, 50)))
        return MFSignal(a), [(u, a), (v, a)], (u, v)
    if kind == "tf":
        a = int(rng.integers(1, 5))
        q = int(rng.integers(2, 5))
        ids = [EntityId(f"mode{i}", int(rng.integers(0, 5))) for i in range(q)]
        return TFSignal(a), [(e, a) for e in ids], ids
    if kind == "fm":
        dims = [1] + [int(rng.integers(1, 4)) for _ in range(int(rng.integers(1, 3)))]
        model = FMSignal(dims)
        m = int(rng.integers(1, 5))
        ids = [EntityId("feat", i) for i in rng.choice(20, size=m, replace=False)]
        x = rng.uniform(0.5, 1.5, size=m) * rng.choice([-1.0, 1.0], size=m)
        ctx = list(zip(ids, x))
        return model, [(BIAS_ID, 1)] + [(e, model.a) for e in ids], ctx
    if kind == "glm":
        sizes = [int(rng.integers(1, 4)) for _ in range(int(rng.integers(1, 4)))]
        layout = [(EntityId("block", i), k) for i, k in enumerate(sizes)]
        return GLMSignal(layout), layout, rng.standard_normal(sum(sizes))
    raise ValueError(kind)


def one_step_composed(post, dyn, steps):
    """Apply the single-step predict ``steps`` times (oracle for the closed form)."""
    post = post.copy()
    for _ in range(steps):
        predict_posterior(post, dyn, post.last_t + 1)
    return post


def one_step_textbook(post, dyn):
    """One step of the joint linear dynamics on (xi, xi_0), written directly.

    ``[xi; xi_0] <- M [xi; xi_0] + [omega; 0]`` with ``M = [[a I, (1-a) I], [0, I]]``.
    """
    k = post.dim
    a = dyn.alpha
    I = np.eye(k)
    M = np.block([[a * I, (1 - a) * I], [np.zeros((k, k)), I]])
    m = M @ np.concatenate([post.mean, post.ref_mean])
    S = M @ post.joint_cov() @ M.T
    S[:k, :k] += dyn.omega
    return m[:k], S


ACCEPTANCE = {}


def report(criterion, ok, detail):
    """Record (and print) the verdict of one acceptance criterion."""
    line = f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[criterion] = line
    print(line)
    return ok
