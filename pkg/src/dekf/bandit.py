"""Recommendation policies on top of the entity posteriors, and regret bookkeeping."""

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import expfam
from .errors import DimensionMismatch, MissingGroundTruth
from .numerics import sample_gaussian_batch
from .signal import EntityId

POLICIES = ("thompson", "greedy", "random")


@dataclass
class CandidateSet:
    """The contexts offered at one decision.

    ``true_probs`` is only known to a simulator and is what regret is
    measured against.
    """

    contexts: list
    true_probs: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.contexts) < 1:
            raise ValueError("a candidate set needs at least one context")
        if self.true_probs is not None:
            self.true_probs = np.asarray(self.true_probs, dtype=float)
            if self.true_probs.shape != (len(self.contexts),):
                raise DimensionMismatch("true_probs must have one entry per context")

    def __len__(self):
        return len(self.contexts)


def parse_policy(name):
    name = str(name).lower()
    if name in ("mean", "greedy_mean", "greedymean"):
        name = "greedy"
    if name not in POLICIES:
        raise ValueError(f"unknown policy {name!r}; expected one of {POLICIES}")
    return name


def _candidate_entities(signal, contexts):
    seen = {}
    for ctx in contexts:
        for eid in signal.involved(ctx):
            seen.setdefault(eid, None)
    return list(seen)


def _thompson_params(store, ids, rng):
    """One joint draw of the current parameters of every entity in ``ids``.

    Entities are grouped by dimension and drawn in a single batch per group,
    in order of first appearance, so the draw is a deterministic function of
    the generator state.
    """
    groups = {}
    for eid in ids:
        groups.setdefault(store[eid].dim, []).append(eid)
    params = {}
    for k, members in groups.items():
        means = np.stack([store[e].mean for e in members])
        covs = np.stack([store[e].cov for e in members])
        draws = sample_gaussian_batch(rng, means, covs)
        for e, x in zip(members, draws):
            params[e] = x
    return params


def scores(family, link, signal, contexts, params):
    """Response ``h`` of every context under the parameter values ``params``."""
    lam = signal.signal_batch(params, contexts)
    h = expfam.response(family, expfam.natural_param(family, link, lam))
    if h.shape[-1] != 1:
        raise DimensionMismatch("recommendation needs a scalar response")
    return h[:, 0]


def recommend(store, family, link, signal, policy, candidates, t, rng):
    """Index of the candidate chosen by ``policy``.

    Every entity referenced by the candidates is first predicted to ``t``
    (and created if new). Thompson sampling draws one sample per entity,
    shared by all candidates that reference it; ``greedy`` scores by the
    response at the posterior mean; ``random`` picks uniformly. Ties go to
    the lowest index.
    """
    policy = parse_policy(policy)
    contexts = candidates.contexts if isinstance(candidates, CandidateSet) else list(candidates)
    with store.lock:
        ids = _candidate_entities(signal, contexts)
        for eid in ids:
            store.predict(EntityId(*eid), t)
        if policy == "random":
            return int(rng.integers(len(contexts)))
        if policy == "thompson":
            params = _thompson_params(store, ids, rng)
        else:
            params = {eid: store[eid].mean for eid in ids}
    return int(np.argmax(scores(family, link, signal, contexts, params)))


@dataclass
class RegretLedger:
    """Running regret of a policy next to a paired uniform-random baseline."""

    cumulative_regret: float = 0.0
    cumulative_random_regret: float = 0.0
    records: List[tuple] = field(default_factory=list)

    @property
    def normalized(self):
        if self.cumulative_random_regret > 0:
            return self.cumulative_regret / self.cumulative_random_regret
        return float("nan")


def record_regret(ledger, candidates, chosen, rng=None, t=None, random_choice=None):
    """Add the regret of ``chosen`` (and of the paired random draw) to ``ledger``.

    The random baseline uses ``random_choice`` when given, otherwise a
    uniform draw from ``rng``. Returns the ledger.
    """
    probs = candidates.true_probs
    if probs is None:
        raise MissingGroundTruth("candidate set carries no true probabilities")
    best = float(np.max(probs))
    if random_choice is None:
        random_choice = int(rng.integers(len(probs))) if rng is not None else None
    ledger.cumulative_regret += best - float(probs[chosen])
    if random_choice is not None:
        ledger.cumulative_random_regret += best - float(probs[random_choice])
    ledger.records.append((t if t is not None else len(ledger.records), best, float(probs[chosen])))
    return ledger
