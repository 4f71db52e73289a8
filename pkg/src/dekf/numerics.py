"""Small dense symmetric kernels shared by the filter, bandit and simulator.

Entity blocks are tiny (a handful of parameters), so everything here works on
dense ``numpy`` arrays. Randomness always comes in through an explicit
:class:`numpy.random.Generator`.
"""

from functools import lru_cache

import numpy as np
from scipy import linalg
from scipy.linalg import lapack

from .errors import NonPositiveDefinite

#: eigenvalue below which a covariance is considered broken and gets clamped
PSD_TOLERANCE = 1e-9
#: value negative eigenvalues are clamped up to
PSD_FLOOR = 1e-12

_JITTER_RETRIES = 3


@lru_cache(maxsize=64)
def _shift(n):
    shift = PSD_TOLERANCE * np.eye(n)
    shift.flags.writeable = False
    return shift


def symmetrize(S):
    S = np.asarray(S, dtype=float)
    return 0.5 * (S + S.T)


def cholesky_jitter(A):
    """Lower Cholesky factor of ``A`` with escalating diagonal jitter.

    The first retry adds ``1e-12 * trace(A) / dim`` to the diagonal and each
    further retry multiplies the jitter by ten.

    Raises
    ------
    NonPositiveDefinite
        If the factorization still fails after the last retry.
    """
    A = np.asarray(A, dtype=float)
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        pass
    n = A.shape[0]
    scale = abs(np.trace(A)) / n
    if scale == 0.0:
        scale = 1.0
    jitter = 1e-12 * scale
    eye = np.eye(n)
    for _ in range(_JITTER_RETRIES):
        try:
            return np.linalg.cholesky(A + jitter * eye)
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise NonPositiveDefinite(
        f"matrix of size {n} is not positive definite (jitter up to {jitter / 10.0:.3g})"
    )


def solve_spd(A, B):
    """Solve ``A X = B`` for symmetric positive definite ``A``.

    Parameters
    ----------
    A : ndarray, shape (n, n)
    B : ndarray, shape (n,) or (n, m)

    Returns
    -------
    ndarray
        ``X`` with the shape of ``B``. ``A`` is never modified.
    """
    L = cholesky_jitter(A)
    return linalg.cho_solve((L, True), np.asarray(B, dtype=float), check_finite=False)


def min_eigenvalue(S):
    return float(np.linalg.eigvalsh(symmetrize(S))[0])


def psd_repair(S):
    """Symmetrize ``S`` and clamp its spectrum if it went indefinite.

    Eigenvalues are floored at ``PSD_FLOOR`` only when the smallest one is
    below ``-PSD_TOLERANCE``; otherwise the symmetrized input is returned.
    """
    S = symmetrize(S)
    # Cholesky succeeding on the shifted matrix proves min eig > -PSD_TOLERANCE.
    _, info = lapack.dpotrf(S + _shift(S.shape[0]), lower=1, clean=0, overwrite_a=1)
    if info == 0:
        return S
    w, Q = np.linalg.eigh(S)
    if w[0] >= -PSD_TOLERANCE:
        return S
    w = np.maximum(w, PSD_FLOOR)
    return symmetrize((Q * w) @ Q.T)


def psd_sqrt(cov):
    """A square root ``L`` with ``L @ L.T == cov`` for a PSD ``cov``.

    Cholesky is used when it succeeds; singular (e.g. all-zero) covariances
    fall back to an eigendecomposition.
    """
    cov = np.asarray(cov, dtype=float)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    w, Q = np.linalg.eigh(symmetrize(cov))
    scale = max(float(np.max(np.abs(w))), 1.0)
    if w[0] < -PSD_TOLERANCE * scale:
        raise NonPositiveDefinite(f"covariance has eigenvalue {w[0]:.3g}")
    return Q * np.sqrt(np.maximum(w, 0.0))


def sample_gaussian(rng, mean, cov):
    """Draw ``mean + L z`` with ``z`` standard normal and ``L L' = cov``."""
    mean = np.asarray(mean, dtype=float)
    L = psd_sqrt(cov)
    z = rng.standard_normal(mean.shape[0])
    return mean + L @ z


def sample_gaussian_batch(rng, means, covs):
    """Independent draws for a stack of Gaussians.

    ``means`` has shape (m, k) and ``covs`` shape (m, k, k). One standard
    normal block of shape (m, k) is consumed from ``rng``.
    """
    means = np.asarray(means, dtype=float)
    covs = np.asarray(covs, dtype=float)
    try:
        L = np.linalg.cholesky(covs)
    except np.linalg.LinAlgError:
        L = np.stack([psd_sqrt(c) for c in covs])
    z = rng.standard_normal(means.shape)
    return means + np.einsum("mij,mj->mi", L, z)


def random_pd_positive(rng, dim, target_trace):
    """Random positive definite matrix with all entries positive.

    Built as ``G G'`` with ``G`` filled by ``|N(0, 1)|`` draws, then rescaled so
    that its trace equals ``target_trace``.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if not target_trace > 0:
        raise ValueError("target_trace must be positive")
    G = np.abs(rng.standard_normal((dim, dim)))
    S = G @ G.T
    S *= target_trace / np.trace(S)
    return symmetrize(S)
