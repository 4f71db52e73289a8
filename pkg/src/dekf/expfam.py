"""Exponential-family observation models.

An observation ``y`` in R^d has log-likelihood

    l(y) = eta' Phi^{-1} y - b(eta, Phi) + c(y, Phi)

with natural parameter ``eta`` and known dispersion ``Phi``. The mean is the
response ``h(eta) = Phi db/deta`` and the covariance ``Phi d2b/deta2 Phi``.
The signal ``lambda`` produced by a model reaches ``eta`` through a link.

Supported families are Gaussian (known covariance), Bernoulli and Poisson.
``c(y, Phi)`` is never computed: only gradients and likelihood differences at
fixed ``y`` are used downstream.
"""

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import IncompatibleLink, InvalidObservation, ObservationOverflow

BERNOULLI_ETA_CAP = 30.0
BERNOULLI_P_FLOOR = 1e-13
POISSON_ETA_MAX = 30.0


class Link(enum.Enum):
    CANONICAL = "canonical"
    IDENTITY = "identity"
    LOG = "log"
    LOGIT = "logit"

    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).lower())
        except ValueError:
            raise IncompatibleLink(f"unknown link {name!r}") from None


# mean range of each family -> links whose inverse lands inside it
_CANONICAL = {"gaussian": Link.IDENTITY, "bernoulli": Link.LOGIT, "poisson": Link.LOG}
_ALLOWED = {
    "gaussian": {Link.IDENTITY, Link.LOG, Link.LOGIT},
    "bernoulli": {Link.LOGIT},
    "poisson": {Link.LOG, Link.LOGIT},
}


@dataclass(frozen=True, eq=False)
class Family:
    """An exponential family with fixed dimension and dispersion.

    Use the :meth:`gaussian`, :meth:`bernoulli` and :meth:`poisson`
    constructors rather than building instances directly.
    """

    kind: str
    dim: int
    dispersion: np.ndarray = field(repr=False)
    dispersion_inv: np.ndarray = field(repr=False)

    @classmethod
    def gaussian(cls, cov=1.0):
        Phi = np.atleast_2d(np.asarray(cov, dtype=float))
        if Phi.shape[0] != Phi.shape[1]:
            raise ValueError("Gaussian dispersion must be square")
        if np.any(np.linalg.eigvalsh(0.5 * (Phi + Phi.T)) <= 0):
            raise ValueError("Gaussian dispersion must be positive definite")
        return cls("gaussian", Phi.shape[0], Phi, np.linalg.inv(Phi))

    @classmethod
    def bernoulli(cls):
        return cls("bernoulli", 1, np.eye(1), np.eye(1))

    @classmethod
    def poisson(cls):
        return cls("poisson", 1, np.eye(1), np.eye(1))

    @classmethod
    def from_name(cls, name, dispersion=None):
        name = str(name).lower()
        if name == "gaussian":
            return cls.gaussian(1.0 if dispersion is None else dispersion)
        if name == "bernoulli":
            return cls.bernoulli()
        if name == "poisson":
            return cls.poisson()
        raise ValueError(f"unknown family {name!r}")

    @property
    def is_identity_dispersion(self):
        return self.kind != "gaussian" or np.array_equal(self.dispersion, np.eye(self.dim))

    def resolve_link(self, link):
        """Concrete link for this family; ``CANONICAL`` is mapped explicitly."""
        link = Link.parse(link)
        if link is Link.CANONICAL:
            return _CANONICAL[self.kind]
        if link not in _ALLOWED[self.kind]:
            raise IncompatibleLink(
                f"link {link.value!r} does not respect the mean range of the {self.kind} family"
            )
        return link

    def is_canonical(self, link):
        return self.resolve_link(link) is _CANONICAL[self.kind]


def _vec(v, d, batch=False):
    v = np.atleast_1d(np.asarray(v, dtype=float))
    ok = v.shape[-1] == d if batch else v.shape == (d,)
    if not ok:
        raise ValueError(f"expected a vector of length {d}, got shape {v.shape}")
    return v


def natural_param(family, link, lam):
    """Natural parameter ``eta`` for signal ``lam``.

    For the canonical link the signal is returned unchanged. ``lam`` may be a
    stack of signals with the last axis of length ``d``.
    """
    lam = _vec(lam, family.dim, batch=True)
    concrete = family.resolve_link(link)
    if concrete is _CANONICAL[family.kind]:
        return lam
    if family.kind == "gaussian":
        # eta equals the mean for the Gaussian family
        if concrete is Link.LOG:
            with np.errstate(over="raise"):
                try:
                    return np.exp(lam)
                except FloatingPointError:
                    raise ObservationOverflow("exp overflow in log link") from None
        return expit(lam)
    # Poisson with logit link: mean = sigmoid(lam), eta = log(mean)
    return -np.logaddexp(0.0, -lam)


def deta_dlambda(family, link, lam):
    """Jacobian ``d eta / d lambda`` as a (d, d) matrix (diagonal here)."""
    lam = _vec(lam, family.dim)
    concrete = family.resolve_link(link)
    if concrete is _CANONICAL[family.kind]:
        return np.eye(family.dim)
    if family.kind == "gaussian":
        if concrete is Link.LOG:
            return np.diag(np.exp(lam))
        s = expit(lam)
        return np.diag(s * (1.0 - s))
    return np.diag(1.0 - expit(lam))


def response(family, eta):
    """Mean of ``y`` given ``eta`` (a single vector or a stack of them)."""
    eta = _vec(eta, family.dim, batch=True)
    if family.kind == "gaussian":
        return eta.copy()
    if family.kind == "bernoulli":
        return np.clip(expit(eta), BERNOULLI_P_FLOOR, 1.0 - BERNOULLI_P_FLOOR)
    if np.any(eta > POISSON_ETA_MAX):
        raise ObservationOverflow(
            f"Poisson natural parameter {np.max(eta):.4g} exceeds {POISSON_ETA_MAX}"
        )
    return np.exp(eta)


def obs_covariance(family, eta):
    """Covariance ``Sigma_y(eta)`` of the observation, shape (d, d)."""
    if family.kind == "gaussian":
        return family.dispersion.copy()
    mu = response(family, eta)
    if family.kind == "bernoulli":
        return (mu * (1.0 - mu)).reshape(1, 1)
    return mu.reshape(1, 1)


def mean_and_covariance(family, eta):
    """``(h(eta), Sigma_y(eta))`` computed together."""
    mu = response(family, eta)
    if family.kind == "gaussian":
        return mu, family.dispersion
    if family.kind == "bernoulli":
        return mu, (mu * (1.0 - mu)).reshape(1, 1)
    return mu, mu.reshape(1, 1)


def check_observation(family, y):
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if y.shape != (family.dim,):
        raise InvalidObservation(f"observation must have length {family.dim}, got {y.shape}")
    if not np.all(np.isfinite(y)):
        raise InvalidObservation("observation is not finite")
    if family.kind == "bernoulli" and y[0] not in (0.0, 1.0):
        raise InvalidObservation(f"Bernoulli observation must be 0 or 1, got {y[0]}")
    if family.kind == "poisson" and (y[0] < 0 or y[0] != np.floor(y[0])):
        raise InvalidObservation(f"Poisson observation must be a non-negative integer, got {y[0]}")
    return y


def log_likelihood(family, y, eta):
    """Log-likelihood of ``y`` up to the additive ``c(y, Phi)`` term."""
    y = check_observation(family, y)
    eta = _vec(eta, family.dim)
    if family.kind == "gaussian":
        Pinv = family.dispersion_inv
        return float(eta @ Pinv @ y - 0.5 * eta @ Pinv @ eta)
    if family.kind == "bernoulli":
        return float(y[0] * eta[0] - np.logaddexp(0.0, eta[0]))
    if eta[0] > POISSON_ETA_MAX:
        raise ObservationOverflow(
            f"Poisson natural parameter {eta[0]:.4g} exceeds {POISSON_ETA_MAX}"
        )
    return float(y[0] * eta[0] - np.exp(eta[0]))
