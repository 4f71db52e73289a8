"""Decoupled extended Kalman filter over entity-blocked Gaussian posteriors.

Each entity ``i`` carries a Gaussian posterior over its current parameters
``xi_i`` and, for drifting entities, over a reference vector ``xi_0i`` the
parameters revert to::

    xi_{i,t} = alpha_i (xi_{i,t-1} - xi_0i) + xi_0i + omega_{i,t},
    omega_{i,t} ~ N(0, Omega_i),   xi_0i ~ N(pi_i, Pi_i).

Only the per-entity blocks of the covariance are stored; cross-entity blocks
created by an update are dropped. Entities are predicted lazily: a posterior
is only propagated through the dynamics when the entity is next touched, with
a closed form covering any number of elapsed steps.

The public entry points are :func:`predict`, :func:`update`,
:func:`iekf_update`, :func:`fisher_info` and the dense oracle
:func:`full_ekf_update`. :class:`DecoupledEKF` bundles them for convenience.
"""

import math
import threading
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import expfam
from .errors import (
    ConfigError,
    LineSearchFailed,
    ObservationOverflow,
    SingularInnovation,
    TimeTravel,
)
from .numerics import psd_repair, solve_spd, symmetrize
from .signal import EntityId

DEFAULT_IEKF_TOL = 1e-8
DEFAULT_IEKF_MAX_ITERS = 50
_LINE_SEARCH_HALVINGS = 20


def alpha_from_half_life(half_life):
    """Memory parameter whose mean deviation halves every ``half_life`` steps."""
    if half_life is None or math.isinf(half_life):
        return 1.0
    if half_life <= 0:
        return 0.0
    return math.exp(math.log(0.5) / half_life)


@dataclass
class DynamicsSpec:
    """Drift hyperparameters and reference prior for one entity (or type).

    ``omega`` is the per-step drift covariance and ``(pi, Pi)`` the prior of
    the reference vector. With ``static=True`` the entity never moves and no
    reference state is tracked. With ``use_reference=False`` the reference
    vector is pinned to zero with zero covariance, so the parameters decay
    toward the origin.

    ``init_cov`` replaces the steady-state drift covariance
    ``Omega / (1 - alpha^2)`` for new entities; it is required when
    ``alpha == 1`` and ``omega`` is nonzero.
    """

    pi: np.ndarray
    Pi: np.ndarray
    alpha: float = 1.0
    omega: Optional[np.ndarray] = None
    static: bool = False
    use_reference: bool = True
    init_cov: Optional[np.ndarray] = None

    def __post_init__(self):
        self.pi = np.atleast_1d(np.asarray(self.pi, dtype=float))
        k = self.pi.shape[0]
        self.Pi = symmetrize(np.asarray(self.Pi, dtype=float).reshape(k, k))
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha", f"must lie in [0, 1], got {self.alpha}")
        if self.omega is None:
            self.omega = np.zeros((k, k))
        self.omega = symmetrize(np.asarray(self.omega, dtype=float).reshape(k, k))
        if self.init_cov is not None:
            self.init_cov = symmetrize(np.asarray(self.init_cov, dtype=float).reshape(k, k))

    @property
    def dim(self):
        return self.pi.shape[0]

    def drift_cov(self):
        """Covariance of the current parameters around the reference vector."""
        if self.init_cov is not None:
            return self.init_cov
        if not np.any(self.omega):
            return np.zeros_like(self.omega)
        if self.alpha >= 1.0:
            raise ConfigError(
                "init_cov", "alpha == 1 has no steady state; an explicit initial covariance is required"
            )
        return self.omega / (1.0 - self.alpha ** 2)


@dataclass
class EntityPosterior:
    """Lazy Gaussian posterior of one entity.

    ``ref_cross`` is ``Cov(xi_0i, xi_i)``; its transpose is the other
    off-diagonal block of the joint covariance.
    """

    mean: np.ndarray
    cov: np.ndarray
    ref_mean: np.ndarray
    ref_cross: np.ndarray
    ref_cov: np.ndarray
    last_t: int

    @property
    def dim(self):
        return self.mean.shape[0]

    def joint_cov(self):
        return np.block([[self.cov, self.ref_cross.T], [self.ref_cross, self.ref_cov]])

    def copy(self):
        return EntityPosterior(
            self.mean.copy(), self.cov.copy(), self.ref_mean.copy(),
            self.ref_cross.copy(), self.ref_cov.copy(), self.last_t,
        )

    def same_as(self, other):
        """Bitwise equality of every field."""
        return (
            self.last_t == other.last_t
            and np.array_equal(self.mean, other.mean)
            and np.array_equal(self.cov, other.cov)
            and np.array_equal(self.ref_mean, other.ref_mean)
            and np.array_equal(self.ref_cross, other.ref_cross)
            and np.array_equal(self.ref_cov, other.ref_cov)
        )


def new_posterior(dyn, t):
    """Posterior of an entity seen for the first time at ``t``."""
    k = dyn.dim
    cov = dyn.Pi + dyn.drift_cov()
    if dyn.static or not dyn.use_reference:
        zero = np.zeros((k, k))
        return EntityPosterior(dyn.pi.copy(), cov, np.zeros(k), zero, zero.copy(), t)
    return EntityPosterior(dyn.pi.copy(), cov, dyn.pi.copy(), dyn.Pi.copy(), dyn.Pi.copy(), t)


def predict_posterior(post, dyn, t):
    """Propagate ``post`` (in place) from ``post.last_t`` to ``t``."""
    if t < post.last_t:
        raise TimeTravel(f"cannot predict back from t={post.last_t} to t={t}")
    steps = t - post.last_t
    if steps == 0 or dyn.static:
        post.last_t = t
        return post
    alpha = dyn.alpha
    a = alpha ** steps
    a2 = a * a
    geo = float(steps) if alpha == 1.0 else (1.0 - a2) / (1.0 - alpha * alpha)
    S0 = post.ref_cross
    S00 = post.ref_cov
    post.mean = a * (post.mean - post.ref_mean) + post.ref_mean
    post.cov = geo * dyn.omega + a2 * post.cov + (a2 - 2.0 * a + 1.0) * S00 + (a - a2) * (S0 + S0.T)
    post.ref_cross = a * S0 + (1.0 - a) * S00
    post.last_t = t
    return post


class EntityStore:
    """All entity posteriors plus the dynamics used to create and move them.

    Parameters
    ----------
    defaults : dict
        Namespace -> :class:`DynamicsSpec` for entities created on first sight.
    overrides : dict, optional
        EntityId -> :class:`DynamicsSpec` taking precedence over the defaults.
    """

    def __init__(self, defaults, overrides=None):
        self.defaults = dict(defaults)
        self.overrides = {EntityId(*k): v for k, v in (overrides or {}).items()}
        self.entities: Dict[EntityId, EntityPosterior] = {}
        self.counters = Counter()
        self.lock = threading.RLock()

    def __contains__(self, eid):
        return eid in self.entities

    def __len__(self):
        return len(self.entities)

    def __getitem__(self, eid):
        return self.entities[eid]

    def dynamics(self, eid):
        dyn = self.overrides.get(eid)
        if dyn is not None:
            return dyn
        try:
            return self.defaults[eid.namespace]
        except KeyError:
            raise ConfigError(f"dynamics.{eid.namespace}", "no dynamics declared for this namespace") from None

    def predict(self, eid, t):
        """Posterior of ``eid`` predicted to time ``t`` (created if new)."""
        post = self.entities.get(eid)
        if post is None:
            post = new_posterior(self.dynamics(eid), t)
            self.entities[eid] = post
            self.counters["create"] += 1
            return post
        self.counters["predict"] += 1
        return predict_posterior(post, self.dynamics(eid), t)

    def predict_all(self, t):
        for eid in list(self.entities):
            self.predict(eid, t)

    def means(self, ids):
        return {eid: self.entities[eid].mean for eid in ids}

    def snapshot(self):
        return {eid: post.copy() for eid, post in self.entities.items()}


def predict(store, eid, t):
    return store.predict(EntityId(*eid), t)


@dataclass
class UpdateReport:
    predicted_mean: np.ndarray
    error: np.ndarray
    updated_ids: List[EntityId]
    iekf_iterations: int = 0
    objective_trace: List[float] = field(default_factory=list)


@dataclass
class _Linearization:
    ids: list
    lam: np.ndarray
    eta: np.ndarray
    h: np.ndarray
    Sy: np.ndarray
    J: dict  # EntityId -> (d, k_i) = d eta / d xi_i


def _linearize(family, link, signal, params, ctx):
    ev = signal.evaluate(params, ctx)
    eta = expfam.natural_param(family, link, ev.lam)
    h, Sy = expfam.mean_and_covariance(family, eta)
    if family.is_canonical(link):
        J = ev.grads
    else:
        E = expfam.deta_dlambda(family, link, ev.lam)
        J = {eid: E @ g for eid, g in ev.grads.items()}
    return _Linearization(ev.involved, ev.lam, eta, h, Sy, J)


def _solve_innovation(M, rhs):
    try:
        return np.linalg.solve(M, rhs)
    except np.linalg.LinAlgError:
        pass
    n = M.shape[0]
    jitter = 1e-12 * max(abs(np.trace(M)) / n, 1.0)
    for _ in range(3):
        try:
            return np.linalg.solve(M + jitter * np.eye(n), rhs)
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise SingularInnovation("I + A D is singular")


def _apply_general(posts, lin, family, y, track_reference):
    """Algorithm-2 update for any observation dimension (in place)."""
    d = family.dim
    Pinv = family.dispersion_inv
    qs, q0s = [], []
    D = np.zeros((d, d))
    for eid, post in zip(lin.ids, posts):
        Jt = lin.J[eid].T
        q = post.cov @ Jt
        qs.append(q)
        q0s.append(post.ref_cross @ Jt if track_reference[eid] else None)
        D += lin.J[eid] @ q
    A = Pinv @ lin.Sy @ Pinv
    e = y - lin.h
    sol = _solve_innovation(np.eye(d) + A @ D, np.column_stack([A, Pinv @ e]))
    C = sol[:, :d]
    F = sol[:, d]
    for eid, post, q, q0 in zip(lin.ids, posts, qs, q0s):
        G = C @ q.T
        post.mean = post.mean + q @ F
        post.cov = psd_repair(post.cov - q @ G)
        if q0 is not None:
            post.ref_mean = post.ref_mean + q0 @ F
            post.ref_cross = post.ref_cross - q0 @ G
            post.ref_cov = psd_repair(post.ref_cov - q0 @ C @ q0.T)
    return e


def _apply_univariate(posts, lin, family, y, track_reference):
    """Scalar-observation form of the same update (no matrix inverse)."""
    phi = float(family.dispersion[0, 0])
    var_y = float(lin.Sy[0, 0])
    err = float(y[0] - lin.h[0])
    gs, qs = [], []
    s = 0.0
    for eid, post in zip(lin.ids, posts):
        g = lin.J[eid][0]
        q = post.cov @ g
        gs.append(g)
        qs.append(q)
        s += float(g @ q)
    denom = phi * phi + var_y * s
    gain = phi * err / denom
    shrink = var_y / denom
    for eid, post, g, q in zip(lin.ids, posts, gs, qs):
        sq = shrink * q
        post.mean = post.mean + gain * q
        # broadcasting outer products; np.outer is slow for tiny vectors
        post.cov = psd_repair(post.cov - q[:, None] * sq)
        if track_reference[eid]:
            q0 = post.ref_cross @ g
            post.ref_mean = post.ref_mean + gain * q0
            post.ref_cross = post.ref_cross - q0[:, None] * sq
            post.ref_cov = psd_repair(post.ref_cov - q0[:, None] * (shrink * q0))
    return np.array([err])


def _tracks_reference(store, ids):
    out = {}
    for eid in ids:
        dyn = store.dynamics(eid)
        out[eid] = not dyn.static and dyn.use_reference
    return out


def update(store, family, link, signal, y, ctx, t, mode="dekf", univariate=None,
           max_iters=DEFAULT_IEKF_MAX_ITERS, tol=DEFAULT_IEKF_TOL):
    """Incorporate one observation into the involved entities.

    Every involved entity is first predicted to ``t``. All Jacobians and the
    observation covariance are evaluated at the predicted means. Entities not
    involved in the observation are not touched at all.

    Parameters
    ----------
    mode : {"dekf", "iekf"}
        ``"iekf"`` dispatches to :func:`iekf_update`.
    univariate : bool, optional
        Force (or forbid) the scalar-observation code path. Defaults to the
        scalar path whenever ``family.dim == 1``.

    Returns
    -------
    UpdateReport
    """
    mode = str(mode).lower()
    if mode == "iekf":
        return iekf_update(store, family, link, signal, y, ctx, t, max_iters=max_iters, tol=tol)
    if mode != "dekf":
        raise ValueError(f"unknown update mode {mode!r}")
    y = expfam.check_observation(family, y)
    with store.lock:
        ids = signal.involved(ctx)
        posts = [store.predict(eid, t) for eid in ids]
        lin = _linearize(family, link, signal, {e: p.mean for e, p in zip(ids, posts)}, ctx)
        posts = [store.entities[eid] for eid in lin.ids]
        track = _tracks_reference(store, lin.ids)
        if univariate is None:
            univariate = family.dim == 1
        if univariate:
            if family.dim != 1:
                raise ValueError("the univariate path needs a scalar observation")
            err = _apply_univariate(posts, lin, family, y, track)
        else:
            err = _apply_general(posts, lin, family, y, track)
        store.counters["update_block"] += len(lin.ids)
        store.counters["observations"] += 1
    return UpdateReport(lin.h, err, list(lin.ids))


def predictive_mean(store, family, link, signal, ctx, t):
    """``h(mu)`` for a context after predicting its entities to ``t``."""
    with store.lock:
        ids = signal.involved(ctx)
        params = {eid: store.predict(eid, t).mean for eid in ids}
    lam = signal.signal(params, ctx)
    return expfam.response(family, expfam.natural_param(family, link, lam))


def fisher_info(family, link, signal, point, ctx):
    """Per-entity diagonal blocks of the Fisher information at ``point``.

    ``F_ii = J_i' Phi^{-1} Sigma_y Phi^{-1} J_i`` with ``J_i = d eta / d xi_i``.
    """
    lin = _linearize(family, link, signal, point, ctx)
    A = family.dispersion_inv @ lin.Sy @ family.dispersion_inv
    return {eid: symmetrize(lin.J[eid].T @ A @ lin.J[eid]) for eid in lin.ids}


def _objective(family, link, signal, y, ctx, theta, prior):
    """Log-likelihood plus Gaussian log-prior (both up to constants)."""
    try:
        ev = signal.evaluate(theta, ctx)
        eta = expfam.natural_param(family, link, ev.lam)
        ll = expfam.log_likelihood(family, y, eta)
    except ObservationOverflow:
        return -math.inf
    if not math.isfinite(ll):
        return -math.inf
    quad = 0.0
    for eid, (mu, prec_delta) in prior.items():
        delta = theta[eid] - mu
        quad += float(delta @ prec_delta(delta))
    return ll - 0.5 * quad


def iekf_update(store, family, link, signal, y, ctx, t,
                max_iters=DEFAULT_IEKF_MAX_ITERS, tol=DEFAULT_IEKF_TOL):
    """Decoupled iterated EKF update with a backtracking line search.

    Iterates the Fisher-scoring step on the involved entities only::

        s_i = mu_i - theta_i + Sigma_i J_i' (I + B)^{-1} Phi^{-1}
              (y - h(theta) + Sigma_y Phi^{-1} sum_j J_j (theta_j - mu_j))

    accepting the largest step ``2^-n s`` (n <= 20) that does not decrease
    the log-posterior. Iteration stops when the proposed step norm drops
    below ``tol`` or after ``max_iters`` accepted steps. The new mean is the
    final iterate; the covariance uses the linearization from which the
    final step was taken.
    """
    y = expfam.check_observation(family, y)
    d = family.dim
    Pinv = family.dispersion_inv
    with store.lock:
        ids = signal.involved(ctx)
        posts = [store.predict(eid, t) for eid in ids]
        mu = {eid: p.mean.copy() for eid, p in zip(ids, posts)}
        covs = {eid: p.cov for eid, p in zip(ids, posts)}
        prior = {eid: (mu[eid], (lambda v, S=covs[eid]: solve_spd(S, v))) for eid in ids}

        theta = {eid: m.copy() for eid, m in mu.items()}
        obj = _objective(family, link, signal, y, ctx, theta, prior)
        trace = [obj]
        lin_used = None
        first_lin = None
        iters = 0
        while True:
            lin = _linearize(family, link, signal, theta, ctx)
            if first_lin is None:
                first_lin = lin
            A = Pinv @ lin.Sy @ Pinv
            D = np.zeros((d, d))
            Jdelta = np.zeros(d)
            qs = {}
            for eid in lin.ids:
                q = covs[eid] @ lin.J[eid].T
                qs[eid] = q
                D += lin.J[eid] @ q
                Jdelta += lin.J[eid] @ (theta[eid] - mu[eid])
            M = np.eye(d) + A @ D
            r = Pinv @ (y - lin.h + lin.Sy @ (Pinv @ Jdelta))
            Fv = _solve_innovation(M, r)
            step = {eid: (mu[eid] - theta[eid]) + qs[eid] @ Fv for eid in lin.ids}
            norm = math.sqrt(sum(float(s @ s) for s in step.values()))
            if norm < tol or iters >= max_iters:
                break
            for n in range(_LINE_SEARCH_HALVINGS + 1):
                scale = 0.5 ** n
                trial = {eid: theta[eid] + scale * step[eid] for eid in theta}
                trial_obj = _objective(family, link, signal, y, ctx, trial, prior)
                if trial_obj >= obj:
                    break
            else:
                raise LineSearchFailed(
                    f"no step in 2^-{_LINE_SEARCH_HALVINGS}..1 increases the log-posterior"
                )
            lin_used = (lin, M, A, qs)
            theta, obj = trial, trial_obj
            trace.append(obj)
            iters += 1
            if scale * norm < tol:
                break

        if lin_used is None:
            lin0 = first_lin
            A0 = Pinv @ lin0.Sy @ Pinv
            qs0 = {eid: covs[eid] @ lin0.J[eid].T for eid in lin0.ids}
            D0 = sum(lin0.J[eid] @ qs0[eid] for eid in lin0.ids)
            lin_used = (lin0, np.eye(d) + A0 @ D0, A0, qs0)
        lin_c, M_c, A_c, qs_c = lin_used
        C = _solve_innovation(M_c, A_c)
        track = _tracks_reference(store, ids)
        for eid, post in zip(ids, posts):
            q = qs_c[eid]
            G = C @ q.T
            shift = theta[eid] - mu[eid]
            if track[eid]:
                q0 = post.ref_cross @ lin_c.J[eid].T
                # MAP of the reference given the new current-parameter mean
                post.ref_mean = post.ref_mean + post.ref_cross @ solve_spd(post.cov, shift)
                post.ref_cross = post.ref_cross - q0 @ G
                post.ref_cov = psd_repair(post.ref_cov - q0 @ C @ q0.T)
            post.mean = theta[eid]
            post.cov = psd_repair(post.cov - q @ G)
        store.counters["update_block"] += len(ids)
        store.counters["observations"] += 1
    return UpdateReport(first_lin.h, y - first_lin.h, list(ids), iters, trace)


def _dense_jacobian(lin, layout, d):
    k = sum(ki for _, ki in layout)
    J = np.zeros((d, k))
    off = 0
    for eid, ki in layout:
        if eid in lin.J:
            J[:, off:off + ki] = lin.J[eid]
        off += ki
    return J


def _split(theta, layout):
    out, off = {}, 0
    for eid, ki in layout:
        out[EntityId(*eid)] = theta[off:off + ki]
        off += ki
    return out


def full_ekf_update(mu, Sigma, family, link, signal, layout, y, ctx, form="information"):
    """Dense EKF update of a full ``(k, k)`` covariance (test oracle).

    Parameters
    ----------
    layout : sequence of (EntityId, int)
        How ``mu`` is cut into entity parameter vectors.
    form : {"information", "woodbury"}
        ``"information"`` inverts ``Sigma^{-1} + F(mu)``; ``"woodbury"``
        uses the ``d x d`` inverse of ``I + B(mu)`` instead.

    Returns
    -------
    (ndarray, ndarray)
        Posterior mean and covariance.
    """
    mu = np.asarray(mu, dtype=float)
    Sigma = np.asarray(Sigma, dtype=float)
    layout = [(EntityId(*eid), int(k)) for eid, k in layout]
    y = expfam.check_observation(family, y)
    d = family.dim
    lin = _linearize(family, link, signal, _split(mu, layout), ctx)
    J = _dense_jacobian(lin, layout, d)
    Pinv = family.dispersion_inv
    A = Pinv @ lin.Sy @ Pinv
    e = y - lin.h
    if form == "information":
        k = mu.shape[0]
        prec = solve_spd(Sigma, np.eye(k)) + J.T @ A @ J
        Sigma_new = solve_spd(symmetrize(prec), np.eye(k))
        delta = Sigma_new @ (J.T @ (Pinv @ e))
        return mu + delta, symmetrize(Sigma_new)
    if form == "woodbury":
        SJt = Sigma @ J.T
        M = np.eye(d) + A @ J @ SJt
        F = np.linalg.solve(M, Pinv @ e)
        C = np.linalg.solve(M, A)
        return mu + SJt @ F, symmetrize(Sigma - SJt @ C @ SJt.T)
    raise ValueError(f"unknown form {form!r}")


class DecoupledEKF:
    """A store bundled with the observation model it is trained under.

    >>> import numpy as np
    >>> from dekf import DecoupledEKF, DynamicsSpec, Family, MFSignal
    >>> dyn = DynamicsSpec(pi=[0.1, 0.1], Pi=0.1 * np.eye(2), static=True)
    >>> f = DecoupledEKF(MFSignal(2), Family.bernoulli(), defaults={"user": dyn, "item": dyn})
    >>> report = f.update(1.0, (("user", 0), ("item", 3)), t=1)
    >>> sorted(str(e) for e in report.updated_ids)
    ['item:3', 'user:0']
    """

    def __init__(self, signal, family, link="canonical", defaults=None, overrides=None,
                 store=None, mode="dekf"):
        self.signal = signal
        self.family = family
        self.link = expfam.Link.parse(link)
        family.resolve_link(self.link)
        self.store = store if store is not None else EntityStore(defaults or {}, overrides)
        self.mode = mode

    def update(self, y, ctx, t, mode=None, **kwargs):
        return update(self.store, self.family, self.link, self.signal, y, ctx, t,
                      mode=mode or self.mode, **kwargs)

    def predict_mean(self, ctx, t):
        return predictive_mean(self.store, self.family, self.link, self.signal, ctx, t)

    def posterior(self, eid, t=None):
        eid = EntityId(*eid)
        if t is not None:
            return self.store.predict(eid, t)
        return self.store[eid]
