"""Simulated data streams, the AdaGrad baseline and experiment drivers.

A :class:`SimulatedWorld` holds ground-truth entity parameters drawn from the
same priors the filter is given, moves them with the mean-reverting drift
every step, and emits observations for randomly chosen contexts. The drivers
:func:`run_estimation` and :func:`run_bandit` replay worlds through the
filter (or the baseline) and collect :class:`MetricSeries`.

Every replica ``r`` of an experiment with seed ``s`` draws from
``SeedSequence([s, r])``, split into independent child streams for the
world's initial draw, its drift, the context choice, the observation noise,
the policy and the random-regret baseline. Two runs that differ only in the
method or policy therefore see exactly the same world.
"""

import logging
import math
from collections.abc import Mapping
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import expfam
from .bandit import CandidateSet, RegretLedger, record_regret, recommend
from .config import ExperimentConfig
from .errors import ConfigError
from .expfam import Family
from .filter import DynamicsSpec, EntityStore, alpha_from_half_life, update
from .numerics import random_pd_positive
from .signal import BIAS_ID, EntityId, FMSignal, GLMSignal, MFSignal, TFSignal

log = logging.getLogger(__name__)

_N_STREAMS = 6
INIT, DRIFT, CONTEXT, OBSERVE, POLICY, BASELINE = range(_N_STREAMS)

CANDIDATE_RULES = {
    "glm": "candidates drawn uniformly without replacement from the context pool",
    "mf": "a uniformly chosen user paired with every item",
    "tf": "uniform ids on all modes but the last, paired with every id of the last mode",
}


def replica_streams(seed, replica):
    """Independent generators for one replica (see the module docstring)."""
    children = np.random.SeedSequence([int(seed), int(replica)]).spawn(_N_STREAMS)
    return [np.random.default_rng(c) for c in children]


def make_family(cfg):
    return Family.gaussian(cfg.dispersion) if cfg.family == "gaussian" else Family.from_name(cfg.family)


def make_signal(cfg):
    names = [ns.name for ns in cfg.namespaces]
    if cfg.model == "glm":
        return GLMSignal([(EntityId(names[0], 0), cfg.context_dim)])
    if cfg.model == "mf":
        return MFSignal(cfg.rank, names[0], names[1])
    if cfg.model == "tf":
        return TFSignal(cfg.rank, modes=names)
    return FMSignal(cfg.fm_dims)


def namespace_dim(cfg, name):
    if cfg.model == "fm" and name == BIAS_ID.namespace:
        return 1
    return cfg.entity_dim()


@dataclass
class NamespacePrior:
    """Hyperparameters of one namespace, with ``Pi`` drawn for one replica."""

    name: str
    count: int
    dim: int
    pi: np.ndarray  # (count, dim) prior means, one row per entity
    Pi: np.ndarray
    alpha: float
    steady_scale: float  # Omega / (1 - alpha^2) = steady_scale * I

    @property
    def omega(self):
        return (1.0 - self.alpha ** 2) * self.steady_scale * np.eye(self.dim)


def draw_priors(cfg, rng):
    """Per-namespace priors for one replica.

    ``Pi`` is one random positive matrix per namespace, and every entity's
    prior mean is the configured fill value plus a small Gaussian jitter
    (standard deviation ``prior_perturbation * |pi|``).
    """
    out = []
    for ns in cfg.namespaces:
        k = namespace_dim(cfg, ns.name)
        Pi = random_pd_positive(rng, k, ns.Pi_trace)
        pi = np.full((ns.count, k), ns.pi)
        if cfg.prior_perturbation > 0:
            pi = pi + cfg.prior_perturbation * abs(ns.pi) * rng.standard_normal((ns.count, k))
        if ns.half_life_steps is None:
            alpha, scale = 1.0, 0.0
        else:
            alpha, scale = alpha_from_half_life(ns.half_life_steps), ns.omega_scale
        out.append(NamespacePrior(ns.name, ns.count, k, pi, Pi, alpha, scale))
    return out


def model_dynamics(priors, method, dynamic, reference_vectors=True):
    """Entity overrides for an :class:`EntityStore` implementing ``method``."""
    static = method == "static" or not dynamic
    use_ref = reference_vectors and method != "dekf_noref"
    overrides = {}
    for p in priors:
        for i in range(p.count):
            overrides[EntityId(p.name, i)] = DynamicsSpec(
                pi=p.pi[i], Pi=p.Pi, alpha=p.alpha, omega=p.omega,
                static=static, use_reference=use_ref,
                init_cov=p.steady_scale * np.eye(p.dim) if p.alpha >= 1.0 else None,
            )
    return overrides


def stream_dynamics(cfg):
    """Namespace dynamics for filtering a stream without a simulated world.

    Every entity of a namespace gets the prior mean ``pi * 1`` and the
    isotropic reference covariance ``(Pi_trace / k) * I``. Factorization
    machines also need a ``global_bias`` namespace for the bias entity.
    """
    if cfg.model == "fm" and BIAS_ID.namespace not in [ns.name for ns in cfg.namespaces]:
        raise ConfigError(f"namespaces.{BIAS_ID.namespace}", "required for factorization machines")
    out = {}
    for ns in cfg.namespaces:
        k = namespace_dim(cfg, ns.name)
        if ns.half_life_steps is None:
            alpha, scale = 1.0, 0.0
        else:
            alpha, scale = alpha_from_half_life(ns.half_life_steps), ns.omega_scale
        out[ns.name] = DynamicsSpec(
            pi=np.full(k, ns.pi), Pi=ns.Pi_trace / k * np.eye(k), alpha=alpha,
            omega=(1.0 - alpha ** 2) * scale * np.eye(k),
            static=not cfg.dynamic or scale == 0.0, use_reference=cfg.reference_vectors,
            init_cov=scale * np.eye(k) if alpha >= 1.0 else None,
        )
    return out


class _TruthView(Mapping):
    def __init__(self, current):
        self._current = current

    def __getitem__(self, eid):
        return self._current[eid[0]][eid[1]]

    def __iter__(self):
        for ns, X in self._current.items():
            for i in range(X.shape[0]):
                yield EntityId(ns, i)

    def __len__(self):
        return sum(X.shape[0] for X in self._current.values())


class SimulatedWorld:
    """Ground truth for one replica of an experiment.

    Parameters
    ----------
    cfg : ExperimentConfig
    rngs : list of numpy.random.Generator
        As returned by :func:`replica_streams`.
    """

    def __init__(self, cfg, rngs):
        if cfg.model == "fm":
            raise ConfigError("model.class", "the simulator covers glm, mf and tf models")
        self.cfg = cfg
        self.rngs = rngs
        self.family = make_family(cfg)
        self.link = cfg.link
        self.signal = make_signal(cfg)
        rng = rngs[INIT]
        self.priors = draw_priors(cfg, rng)
        self.reference = {}
        self.current = {}
        for p in self.priors:
            L = np.linalg.cholesky(p.Pi)
            ref = p.pi + rng.standard_normal((p.count, p.dim)) @ L.T
            self.reference[p.name] = ref
            self.current[p.name] = ref + math.sqrt(p.steady_scale) * rng.standard_normal((p.count, p.dim))
        self.truth = _TruthView(self.current)
        if cfg.model == "glm":
            self.contexts = rng.standard_normal((cfg.n_contexts, cfg.context_dim))
        self.t = 0

    def advance(self):
        """Move time forward one step, drifting the truth when dynamic."""
        self.t += 1
        if self.t == 1 or not self.cfg.dynamic:
            return
        rng = self.rngs[DRIFT]
        for p in self.priors:
            if p.alpha >= 1.0 or p.steady_scale == 0.0:
                continue
            X = self.current[p.name]
            X0 = self.reference[p.name]
            noise = math.sqrt((1.0 - p.alpha ** 2) * p.steady_scale)
            self.current[p.name] = p.alpha * (X - X0) + X0 + noise * rng.standard_normal(X.shape)
        self.truth = _TruthView(self.current)

    def random_context(self):
        rng = self.rngs[CONTEXT]
        if self.cfg.model == "glm":
            return self.contexts[rng.integers(self.cfg.n_contexts)]
        ids = tuple(EntityId(p.name, int(rng.integers(p.count))) for p in self.priors)
        return ids

    def candidate_set(self):
        rng = self.rngs[CONTEXT]
        cfg = self.cfg
        if cfg.model == "glm":
            idx = rng.choice(cfg.n_contexts, size=cfg.candidates, replace=False)
            contexts = [self.contexts[i] for i in idx]
        else:
            fixed = [EntityId(p.name, int(rng.integers(p.count))) for p in self.priors[:-1]]
            last = self.priors[-1]
            contexts = [tuple(fixed) + (EntityId(last.name, j),) for j in range(last.count)]
        return CandidateSet(contexts, self.mean_batch(contexts))

    def mean(self, ctx):
        lam = self.signal.signal(self.truth, ctx)
        return float(expfam.response(self.family, expfam.natural_param(self.family, self.link, lam))[0])

    def mean_batch(self, contexts):
        lam = self.signal.signal_batch(self.truth, contexts)
        return expfam.response(self.family, expfam.natural_param(self.family, self.link, lam))[:, 0]

    def observe(self, mean):
        """Draw ``y`` with the given true mean from the observation stream."""
        rng = self.rngs[OBSERVE]
        if self.family.kind == "bernoulli":
            return float(rng.random() < mean)
        if self.family.kind == "poisson":
            return float(rng.poisson(mean))
        return float(mean + math.sqrt(self.family.dispersion[0, 0]) * rng.standard_normal())


@dataclass
class StreamItem:
    t: int
    ctx: object
    y: float
    p_true: float


def generate_stream(cfg, rng_or_replica=0):
    """The observation stream of one replica, plus the world that made it.

    ``rng_or_replica`` is either a replica index (combined with
    ``cfg.seed``) or a list of generators from :func:`replica_streams`.
    """
    rngs = replica_streams(cfg.seed, rng_or_replica) if isinstance(rng_or_replica, (int, np.integer)) \
        else rng_or_replica
    world = SimulatedWorld(cfg, rngs)
    items = []
    for _ in range(cfg.horizon):
        world.advance()
        ctx = world.random_context()
        p = world.mean(ctx)
        items.append(StreamItem(world.t, ctx, world.observe(p), p))
    return items, world


class AdaGrad:
    """Per-coordinate AdaGrad on the negative log-likelihood.

    Only the entities involved in an observation move. Each entity starts at
    ``init[eid]`` the first time it is seen.
    """

    def __init__(self, signal, family, link, init, lr=0.1, eps=1e-8):
        self.signal = signal
        self.family = family
        self.link = link
        self.init = init
        self.lr = lr
        self.eps = eps
        self.params = {}
        self.acc = {}

    def _param(self, eid):
        if eid not in self.params:
            self.params[eid] = np.array(self.init[eid], dtype=float)
            self.acc[eid] = np.zeros_like(self.params[eid])
        return self.params[eid]

    def predict(self, ctx):
        for eid in self.signal.involved(ctx):
            self._param(eid)
        lam = self.signal.signal(self.params, ctx)
        return expfam.response(self.family, expfam.natural_param(self.family, self.link, lam))

    def step(self, y, ctx):
        """Take one step; returns the prediction made before the step."""
        y = expfam.check_observation(self.family, y)
        for eid in self.signal.involved(ctx):
            self._param(eid)
        ev = self.signal.evaluate(self.params, ctx)
        eta = expfam.natural_param(self.family, self.link, ev.lam)
        h = expfam.response(self.family, eta)
        r = self.family.dispersion_inv @ (y - h)
        E = None if self.family.is_canonical(self.link) else expfam.deta_dlambda(self.family, self.link, ev.lam)
        for eid in ev.involved:
            J = ev.grads[eid] if E is None else E @ ev.grads[eid]
            g = -(J.T @ r)
            self.acc[eid] += g * g
            self.params[eid] = self.params[eid] - self.lr / np.sqrt(self.acc[eid] + self.eps) * g
        return h


@dataclass
class MetricSeries:
    """Per-replica curves of one method or policy.

    Arrays have shape ``(n_sims, horizon)``. Estimation series carry
    ``p_true``/``p_pred``; bandit series carry per-step regret of the policy
    and of the paired random baseline.
    """

    label: str
    kind: str
    p_true: Optional[np.ndarray] = None
    p_pred: Optional[np.ndarray] = None
    regret: Optional[np.ndarray] = None
    random_regret: Optional[np.ndarray] = None
    meta: Optional[dict] = None

    @property
    def n_sims(self):
        return (self.p_true if self.kind == "estimation" else self.regret).shape[0]

    @property
    def horizon(self):
        return (self.p_true if self.kind == "estimation" else self.regret).shape[1]

    @property
    def abs_error(self):
        return np.abs(self.p_true - self.p_pred)

    @property
    def cumulative_error(self):
        """``(1/t) sum_{i<=t} |p_true,i - p_pred,i|`` per replica."""
        return np.cumsum(self.abs_error, axis=1) / np.arange(1, self.horizon + 1)

    @property
    def normalized_regret(self):
        num = np.cumsum(self.regret, axis=1)
        den = np.cumsum(self.random_regret, axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)

    def curve(self):
        """The headline metric per replica (``(n_sims, horizon)``)."""
        return self.cumulative_error if self.kind == "estimation" else self.normalized_regret

    def final(self):
        return self.curve()[:, -1]

    def final_mean(self):
        return float(np.mean(self.final()))

    def final_stderr(self):
        f = self.final()
        return float(np.std(f, ddof=1) / math.sqrt(f.size)) if f.size > 1 else 0.0

    def rows(self):
        """CSV header and rows, averaged across replicas."""
        t = np.arange(1, self.horizon + 1)
        curve = self.curve()
        mean = np.nanmean(curve, axis=0) if self.n_sims else curve
        if self.n_sims > 1:
            se = np.nanstd(curve, axis=0, ddof=1) / math.sqrt(self.n_sims)
        else:
            se = np.zeros(self.horizon)
        if self.kind == "estimation":
            header = ["t", "mean_abs_error", "cum_avg_abs_error", "cum_avg_abs_error_stderr"]
            cols = [np.mean(self.abs_error, axis=0), mean, se]
        else:
            header = ["t", "cum_regret", "cum_random_regret", "normalized_regret", "normalized_regret_stderr"]
            cols = [np.mean(np.cumsum(self.regret, axis=1), axis=0),
                    np.mean(np.cumsum(self.random_regret, axis=1), axis=0), mean, se]
        rows = [[int(ti)] + [float(c[i]) for c in cols] for i, ti in enumerate(t)]
        return header, rows


def _format(v):
    return str(v) if isinstance(v, int) else repr(float(v))


def write_csv(series, path):
    header, rows = series.rows()
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_format(v) for v in row) + "\n")


def _estimation_replica(cfg, replica, methods, lrs):
    rngs = replica_streams(cfg.seed, replica)
    stream, world = generate_stream(cfg, rngs)
    family, link, signal = world.family, world.link, world.signal
    p_true = np.array([it.p_true for it in stream])
    out = {}
    for method in methods:
        if method == "adagrad":
            init = {EntityId(p.name, i): p.pi[i] for p in world.priors for i in range(p.count)}
            for lr in lrs:
                opt = AdaGrad(signal, family, link, init, lr=lr, eps=cfg.adagrad_eps)
                out[("adagrad", lr)] = np.array([opt.step([it.y], it.ctx)[0] for it in stream])
            continue
        overrides = model_dynamics(world.priors, method, cfg.dynamic, cfg.reference_vectors)
        store = EntityStore({}, overrides)
        mode = "iekf" if method == "iekf" or cfg.update == "iekf" else "dekf"
        preds = np.empty(len(stream))
        for n, it in enumerate(stream):
            preds[n] = update(store, family, link, signal, [it.y], it.ctx, it.t, mode=mode).predicted_mean[0]
        out[(method, None)] = preds
    return p_true, out


def _map(fn, args, jobs):
    if jobs <= 1:
        return [fn(*a) for a in args]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(fn, *a) for a in args]
        return [f.result() for f in futures]


def run_estimation(cfg, methods=None, jobs=1, tune_adagrad=False):
    """Filter (and baseline) predictions over ``cfg.n_sims`` replicas.

    Returns a dict ``method -> MetricSeries``. With ``tune_adagrad`` every
    learning rate in ``cfg.adagrad_lr_grid`` is run and the one with the
    lowest mean final error is reported (its value is in ``meta["lr"]``).
    """
    methods = list(methods or cfg.methods)
    lrs = list(cfg.adagrad_lr_grid) if tune_adagrad else [cfg.adagrad_lr]
    results = _map(_estimation_replica, [(cfg, r, methods, lrs) for r in range(cfg.n_sims)], jobs)
    p_true = np.stack([r[0] for r in results])
    series = {}
    for method in methods:
        if method == "adagrad":
            candidates = []
            for lr in lrs:
                s = MetricSeries("adagrad", "estimation", p_true, np.stack([r[1][("adagrad", lr)] for r in results]),
                                 meta={"lr": lr})
                candidates.append(s)
            series["adagrad"] = min(candidates, key=lambda s: s.final_mean())
            series["adagrad"].meta["grid"] = {s.meta["lr"]: s.final_mean() for s in candidates}
        else:
            series[method] = MetricSeries(method, "estimation", p_true,
                                          np.stack([r[1][(method, None)] for r in results]))
    return series


def _bandit_replica(cfg, replica, policy):
    rngs = replica_streams(cfg.seed, replica)
    world = SimulatedWorld(cfg, rngs)
    family, link, signal = world.family, world.link, world.signal
    store = EntityStore({}, model_dynamics(world.priors, "dekf", cfg.dynamic, cfg.reference_vectors))
    mode = cfg.update
    ledger = RegretLedger()
    regret = np.empty(cfg.horizon)
    baseline = np.empty(cfg.horizon)
    for n in range(cfg.horizon):
        world.advance()
        cands = world.candidate_set()
        chosen = recommend(store, family, link, signal, policy, cands, world.t, rngs[POLICY])
        y = world.observe(cands.true_probs[chosen])
        update(store, family, link, signal, [y], cands.contexts[chosen], world.t, mode=mode)
        rand = int(rngs[BASELINE].integers(len(cands)))
        record_regret(ledger, cands, chosen, t=world.t, random_choice=rand)
        _, best, p_chosen = ledger.records[-1]
        regret[n] = best - p_chosen
        baseline[n] = best - float(cands.true_probs[rand])
    return regret, baseline


def run_bandit(cfg, policies=None, jobs=1):
    """Regret of each policy over ``cfg.n_sims`` replicas (dict policy -> MetricSeries)."""
    policies = list(policies or cfg.policies)
    series = {}
    for policy in policies:
        results = _map(_bandit_replica, [(cfg, r, policy) for r in range(cfg.n_sims)], jobs)
        series[policy] = MetricSeries(
            policy, "bandit",
            regret=np.stack([r[0] for r in results]),
            random_regret=np.stack([r[1] for r in results]),
            meta={"candidates": CANDIDATE_RULES[cfg.model]},
        )
        log.info("%s: final normalized regret %.4f", policy, series[policy].final_mean())
    return series


def pooled_stderr(a, b):
    """Standard error of the difference of two final-value means."""
    return math.sqrt(a.final_stderr() ** 2 + b.final_stderr() ** 2)
