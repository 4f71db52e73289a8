"""Signal models: the map from entity parameters and context to ``lambda``.

Every model answers three questions for an observation context: which
entities are involved, what the signal is, and what the gradient of the
signal with respect to each involved entity's parameter vector is.
Entities that are not involved have a zero gradient and are simply absent.

Parameter vectors are passed as a mapping ``EntityId -> ndarray``; gradients
come back as ``(d, k_i)`` matrices.
"""

from dataclasses import dataclass
from typing import Dict, List, NamedTuple

import numpy as np

from .errors import DimensionMismatch, DuplicateMode, OrderUnsupported


class EntityId(NamedTuple):
    namespace: str
    index: int

    def __str__(self):
        return f"{self.namespace}:{self.index}"

    @classmethod
    def parse(cls, text):
        ns, _, idx = str(text).strip().rpartition(":")
        if not ns:
            raise ValueError(f"entity id must look like 'namespace:index', got {text!r}")
        return cls(ns, int(idx))


@dataclass
class SignalEval:
    lam: np.ndarray
    grads: Dict[EntityId, np.ndarray]
    involved: List[EntityId]


class SignalModel:
    """Interface shared by the concrete models below."""

    #: dimension of the signal (and of the observation)
    d = 1

    def involved(self, ctx):
        raise NotImplementedError

    def entity_dim(self, eid):
        raise NotImplementedError

    def evaluate(self, params, ctx):
        raise NotImplementedError

    def signal(self, params, ctx):
        return self.evaluate(params, ctx).lam

    def signal_batch(self, params, contexts):
        """Signals for several contexts as an array of shape ``(n, d)``."""
        return np.stack([self.signal(params, ctx) for ctx in contexts])


def _param(params, eid, k):
    try:
        v = params[eid]
    except KeyError:
        raise DimensionMismatch(f"no parameters for entity {eid}") from None
    v = np.asarray(v, dtype=float)
    if v.shape != (k,):
        raise DimensionMismatch(f"entity {eid} has shape {v.shape}, expected ({k},)")
    return v


class GLMSignal(SignalModel):
    """Linear signal ``lambda = X' theta``.

    Parameters
    ----------
    partition : sequence of (EntityId, int)
        Entities in the order their blocks appear as rows of ``X``.
    d : int
        Output dimension.

    A context is either the dense predictor matrix ``X`` of shape ``(k, d)``
    (or a length-``k`` vector when ``d == 1``), or a mapping from entity id
    to that entity's ``(k_i, d)`` block. An entity is involved iff its block
    is not identically zero.
    """

    def __init__(self, partition, d=1):
        self.partition = [(EntityId(*eid), int(k)) for eid, k in partition]
        self.d = int(d)
        self._dims = dict(self.partition)
        self._offsets = {}
        off = 0
        for eid, k in self.partition:
            self._offsets[eid] = off
            off += k
        self.k = off

    def entity_dim(self, eid):
        return self._dims[eid]

    def blocks(self, ctx):
        d = self.d
        if isinstance(ctx, dict):
            out = {}
            for eid, X in ctx.items():
                eid = EntityId(*eid)
                X = np.asarray(X, dtype=float).reshape(-1, d) if d == 1 else np.asarray(X, dtype=float)
                if eid not in self._dims or X.shape != (self._dims[eid], d):
                    raise DimensionMismatch(f"predictor block for {eid} has shape {X.shape}")
                out[eid] = X
            return out
        X = np.asarray(ctx, dtype=float)
        if X.ndim == 1 and d == 1:
            X = X[:, None]
        if X.shape != (self.k, d):
            raise DimensionMismatch(f"predictor matrix has shape {X.shape}, expected ({self.k}, {d})")
        return {eid: X[self._offsets[eid]:self._offsets[eid] + k] for eid, k in self.partition}

    def involved(self, ctx):
        return [eid for eid, X in self.blocks(ctx).items() if np.any(X != 0.0)]

    def evaluate(self, params, ctx):
        lam = np.zeros(self.d)
        grads = {}
        for eid, X in self.blocks(ctx).items():
            if not np.any(X != 0.0):
                continue
            xi = _param(params, eid, X.shape[0])
            lam += X.T @ xi
            grads[eid] = X.T.copy()
        return SignalEval(lam, grads, list(grads))


class MFSignal(SignalModel):
    """Matrix factorization: ``lambda = xi_u' xi_v``.

    A context is the pair ``(user_id, item_id)``.
    """

    def __init__(self, a, user_namespace="user", item_namespace="item"):
        self.a = int(a)
        self.namespaces = (user_namespace, item_namespace)

    def entity_dim(self, eid):
        return self.a

    def involved(self, ctx):
        u, v = ctx
        return [EntityId(*u), EntityId(*v)]

    def evaluate(self, params, ctx):
        u, v = self.involved(ctx)
        xu = _param(params, u, self.a)
        xv = _param(params, v, self.a)
        # same reduction as the tensor and FM paths so the special cases agree bitwise
        lam = np.array([np.sum(xu * xv)])
        return SignalEval(lam, {u: xv.reshape(1, -1).copy(), v: xu.reshape(1, -1).copy()}, [u, v])

    def signal_batch(self, params, contexts):
        try:
            U = np.array([params[u] for u, _ in contexts], dtype=float)
            V = np.array([params[v] for _, v in contexts], dtype=float)
        except KeyError as exc:
            raise DimensionMismatch(f"no parameters for entity {exc}") from None
        if U.shape != (len(contexts), self.a) or V.shape != U.shape:
            raise DimensionMismatch(f"factor vectors must have length {self.a}")
        return np.sum(U * V, axis=1)[:, None]


class TFSignal(SignalModel):
    """CP tensor factorization: ``lambda = sum_l prod_i xi_{i,l}``.

    A context is a sequence of ``q`` entity ids, one per mode; ids must come
    from distinct namespaces.
    """

    def __init__(self, a, modes=None):
        self.a = int(a)
        self.modes = list(modes) if modes is not None else None

    def entity_dim(self, eid):
        return self.a

    def involved(self, ctx):
        ids = [EntityId(*e) for e in ctx]
        if len(ids) < 2:
            raise DimensionMismatch("tensor factorization needs at least two modes")
        if len({e.namespace for e in ids}) != len(ids):
            raise DuplicateMode(f"two ids share a mode in {ids}")
        if self.modes is not None and [e.namespace for e in ids] != self.modes:
            raise DimensionMismatch(f"context modes {[e.namespace for e in ids]} != {self.modes}")
        return ids

    def evaluate(self, params, ctx):
        ids = self.involved(ctx)
        V = np.stack([_param(params, e, self.a) for e in ids])
        q = V.shape[0]
        # prefix/suffix products give the leave-one-out products without division
        prefix = np.ones_like(V)
        suffix = np.ones_like(V)
        for i in range(1, q):
            prefix[i] = prefix[i - 1] * V[i - 1]
            suffix[q - 1 - i] = suffix[q - i] * V[q - i]
        loo = prefix * suffix
        lam = np.array([np.sum(loo[0] * V[0])])
        grads = {e: loo[i].reshape(1, -1) for i, e in enumerate(ids)}
        return SignalEval(lam, grads, ids)

    def signal_batch(self, params, contexts):
        try:
            V = np.array([[params[e] for e in self.involved(ctx)] for ctx in contexts], dtype=float)
        except KeyError as exc:
            raise DimensionMismatch(f"no parameters for entity {exc}") from None
        if V.ndim != 3 or V.shape[2] != self.a:
            raise DimensionMismatch(f"factor vectors must have length {self.a}")
        return np.sum(np.prod(V, axis=1), axis=1)[:, None]


BIAS_ID = EntityId("global_bias", 0)


def elementary_symmetric(z, order):
    """Elementary symmetric polynomials ``e_0..e_order`` of the rows of ``z``.

    ``z`` has shape ``(m, a)``; the result has shape ``(order + 1, a)``. Rows
    are folded in one at a time with ``e_n <- e_n + z_i e_{n-1}``, which avoids
    the cancellation of the power-sum (Newton) route.
    """
    z = np.asarray(z, dtype=float)
    e = np.zeros((order + 1, z.shape[1]))
    e[0] = 1.0
    for zi in z:
        for n in range(order, 0, -1):
            e[n] = e[n] + zi * e[n - 1]
    return e


class FMSignal(SignalModel):
    """Factorization machine of order ``q``.

    Each non-bias entity stacks ``v^(1) = w`` (length 1) and the factor
    vectors ``v^(2)..v^(q)`` of lengths ``dims[1:]``. The global bias is its
    own one-dimensional entity, always involved.

    A context is a sequence of ``(EntityId, x_i)`` pairs with distinct ids and
    nonzero ``x_i``.
    """

    def __init__(self, dims, bias_id=BIAS_ID):
        dims = [int(a) for a in dims]
        if len(dims) < 1:
            raise OrderUnsupported("factorization machine order must be >= 1")
        if dims[0] != 1:
            raise DimensionMismatch("the first-order block (w) must have length 1")
        self.dims = dims
        self.q = len(dims)
        self.bias_id = EntityId(*bias_id)
        self.offsets = np.concatenate([[0], np.cumsum(dims)]).astype(int)
        self.a = int(self.offsets[-1])

    def entity_dim(self, eid):
        return 1 if eid == self.bias_id else self.a

    def _terms(self, ctx):
        ids, xs = [], []
        for eid, x in ctx:
            eid = EntityId(*eid)
            if eid == self.bias_id:
                raise DimensionMismatch("the bias entity is implicit in every context")
            if x == 0:
                continue
            ids.append(eid)
            xs.append(float(x))
        if len(set(ids)) != len(ids):
            raise DimensionMismatch("factorization machine context repeats an entity")
        return ids, np.asarray(xs)

    def involved(self, ctx):
        ids, _ = self._terms(ctx)
        return [self.bias_id] + ids

    def evaluate(self, params, ctx):
        ids, x = self._terms(ctx)
        w0 = _param(params, self.bias_id, 1)
        lam = float(w0[0])
        grads = {self.bias_id: np.ones((1, 1))}
        if ids:
            Xi = np.stack([_param(params, e, self.a) for e in ids])
            G = np.zeros_like(Xi)
            for l in range(1, self.q + 1):
                lo, hi = self.offsets[l - 1], self.offsets[l]
                z = x[:, None] * Xi[:, lo:hi]
                e = elementary_symmetric(z, l)
                lam += float(np.sum(e[l]))
                # e_{l-1} over all entities except i, by peeling z_i off
                excl = np.ones_like(z)
                for j in range(1, l):
                    excl = e[j][None, :] - z * excl
                G[:, lo:hi] = x[:, None] * excl
            for i, eid in enumerate(ids):
                grads[eid] = G[i].reshape(1, -1)
        return SignalEval(np.array([lam]), grads, [self.bias_id] + ids)

