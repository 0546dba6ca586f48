"""Empirical moments, Gaussian densities, KL divergence and conditioning.

All covariance estimators take an explicit ``ddof``: ``ddof=1`` gives the
unbiased ``1/(J-1)`` normalization used for Gaussian fits, ``ddof=0`` the
``1/J`` normalization used inside the particle dynamics.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import NumericalDegeneracyError

LOG_2PI = float(np.log(2.0 * np.pi))
SYMMETRY_TOL = 1e-10
PSD_CLIP_TOL = 1e-10


def substream(seed, *labels):
    """Independent generator derived from ``(seed, labels)``.

    The derivation only depends on the seed and the label text, so the
    stream a consumer receives does not depend on call order.
    """
    words = [int(seed) & 0xFFFFFFFF, (int(seed) >> 32) & 0xFFFFFFFF]
    for label in labels:
        digest = hashlib.sha256(str(label).encode("utf-8")).digest()
        words.extend(int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4))
    return np.random.default_rng(np.random.SeedSequence(words))


def _as_matrix(a, d=None):
    a = np.asarray(a, dtype=float)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1 and d is not None and d > 1 and a.size == d:
        a = np.diag(a)
    elif a.ndim == 1:
        a = a.reshape(1, 1) if a.size == 1 else np.diag(a)
    return a


def _smallest_pivot(a):
    """Smallest pivot of a symmetric LDL^T factorization.

    ``D`` may contain 2x2 blocks, so the pivots are its eigenvalues.
    """
    try:
        _, dmat, _ = sla.ldl(a)
        return float(np.min(np.linalg.eigvalsh(dmat)))
    except (ValueError, np.linalg.LinAlgError):
        return float("nan")


def cholesky(a, what="covariance"):
    """Lower Cholesky factor, raising :class:`NumericalDegeneracyError`."""
    try:
        return sla.cholesky(a, lower=True, check_finite=True)
    except (np.linalg.LinAlgError, ValueError):
        raise NumericalDegeneracyError(
            f"{what} is not positive definite", pivot=_smallest_pivot(a)
        ) from None


class Gaussian:
    """Multivariate normal distribution with mean and covariance.

    Scalars are promoted to one-dimensional distributions and a 1-D
    covariance array is read as a diagonal.
    """

    def __init__(self, mean, covariance):
        mean = np.atleast_1d(np.asarray(mean, dtype=float)).ravel()
        cov = _as_matrix(covariance, mean.size)
        if cov.shape != (mean.size, mean.size):
            raise ValueError(
                f"covariance shape {cov.shape} does not match mean length {mean.size}"
            )
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise ValueError("Gaussian parameters must be finite")
        scale = max(1.0, float(np.max(np.abs(cov)))) if cov.size else 1.0
        if np.max(np.abs(cov - cov.T), initial=0.0) > 1e3 * SYMMETRY_TOL * scale:
            raise ValueError("covariance is not symmetric")
        self.mean = mean
        self.covariance = 0.5 * (cov + cov.T)
        self._chol = None

    @property
    def dim(self):
        return self.mean.size

    @property
    def chol(self):
        if self._chol is None:
            self._chol = cholesky(self.covariance)
        return self._chol

    def precision(self):
        return sla.cho_solve((self.chol, True), np.eye(self.dim))

    def log_det(self):
        return 2.0 * float(np.sum(np.log(np.diag(self.chol))))

    def __repr__(self):
        return f"Gaussian(mean={self.mean!r}, covariance={self.covariance!r})"


@dataclass
class EmpiricalMoments:
    mean_u: np.ndarray
    mean_y: np.ndarray
    cov_u: np.ndarray
    cov_y: np.ndarray
    cov_uy: np.ndarray
    sample_count: int

    @property
    def dim_u(self):
        return self.mean_u.size

    @property
    def dim_y(self):
        return self.mean_y.size

    def joint_covariance(self):
        return np.block([[self.cov_u, self.cov_uy], [self.cov_uy.T, self.cov_y]])

    def joint(self):
        return Gaussian(np.concatenate([self.mean_u, self.mean_y]), self.joint_covariance())

    def marginal_u(self):
        return Gaussian(self.mean_u, self.cov_u)

    def marginal_y(self):
        return Gaussian(self.mean_y, self.cov_y)


def _as_samples(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ValueError("samples must be a J x d matrix")
    return x


def empirical_moments(samples_u, samples_y=None, ddof=1):
    """Per-block sample means and (cross-)covariances.

    Parameters
    ----------
    samples_u : (J, d) array
    samples_y : (J, k) array, optional
        Omitted means an empty ``y`` block.
    ddof : {1, 0}
        1 for ``1/(J-1)``, 0 for ``1/J`` normalization.
    """
    u = _as_samples(samples_u)
    y = np.empty((u.shape[0], 0)) if samples_y is None else _as_samples(samples_y)
    count = u.shape[0]
    if y.shape[0] != count:
        raise ValueError(f"row counts differ: {count} vs {y.shape[0]}")
    if count < 2:
        raise ValueError("empirical moments need at least 2 samples")
    if ddof not in (0, 1):
        raise ValueError("ddof must be 0 or 1")
    mu, my = u.mean(axis=0), y.mean(axis=0)
    du, dy = u - mu, y - my
    norm = 1.0 / (count - ddof)
    cov_u = norm * du.T @ du
    cov_y = norm * dy.T @ dy
    return EmpiricalMoments(
        mean_u=mu,
        mean_y=my,
        cov_u=0.5 * (cov_u + cov_u.T),
        cov_y=0.5 * (cov_y + cov_y.T),
        cov_uy=norm * du.T @ dy,
        sample_count=count,
    )


def gaussian_log_density(g, x):
    """log N(x; mean, covariance) for one point ``(d,)`` or rows of ``(n, d)``."""
    x = np.asarray(x, dtype=float)
    single = x.ndim <= 1
    xs = x.reshape(1, -1) if single else x
    if xs.shape[1] != g.dim:
        raise ValueError(f"point dimension {xs.shape[1]} != {g.dim}")
    white = sla.solve_triangular(g.chol, (xs - g.mean).T, lower=True)
    out = -0.5 * np.sum(white**2, axis=0) - 0.5 * (g.dim * LOG_2PI + g.log_det())
    return float(out[0]) if single else out


def kl_gaussian(p, q):
    """KL(p || q) between two Gaussians in closed form."""
    if p.dim != q.dim:
        raise ValueError(f"dimension mismatch: {p.dim} vs {q.dim}")
    lq = q.chol
    a = sla.solve_triangular(lq, p.chol, lower=True)
    diff = sla.solve_triangular(lq, q.mean - p.mean, lower=True)
    trace_term = float(np.sum(a**2))
    maha = float(diff @ diff)
    log_det_ratio = q.log_det() - p.log_det()
    return 0.5 * (trace_term - p.dim + maha + log_det_ratio)


def _repair_psd(c, what):
    c = 0.5 * (c + c.T)
    if c.size == 0:
        return c
    evals, evecs = np.linalg.eigh(c)
    if evals[0] >= 0.0:
        return c
    tol = PSD_CLIP_TOL * max(np.linalg.norm(c, 2), np.finfo(float).tiny)
    if evals[0] < -tol:
        raise NumericalDegeneracyError(f"{what} is indefinite", pivot=float(evals[0]))
    evals = np.clip(evals, 0.0, None)
    c = (evecs * evals) @ evecs.T
    return 0.5 * (c + c.T)


def _regularized_cholesky(cov, what):
    try:
        return sla.cholesky(cov, lower=True)
    except (np.linalg.LinAlgError, ValueError):
        pass
    k = cov.shape[0]
    jitter = 1e-10 * max(np.trace(cov), 0.0) / k
    if jitter > 0.0:
        try:
            return sla.cholesky(cov + jitter * np.eye(k), lower=True)
        except (np.linalg.LinAlgError, ValueError):
            pass
    raise NumericalDegeneracyError(
        f"{what} is singular after jitter", pivot=_smallest_pivot(cov)
    )


def conditional_gain(m):
    """Kalman gain ``C_uy C_y^{-1}`` and the Schur-complement covariance.

    Returns ``(gain, cov)`` such that ``u | y`` has mean
    ``mean_u + gain @ (y - mean_y)`` and covariance ``cov``.
    """
    if m.dim_y == 0:
        return np.zeros((m.dim_u, 0)), m.cov_u.copy()
    lower = _regularized_cholesky(m.cov_y, "cov_y")
    gain = sla.cho_solve((lower, True), m.cov_uy.T).T
    cov = m.cov_u - gain @ m.cov_uy.T
    return gain, _repair_psd(cov, "conditional covariance")


def condition_gaussian(m, y_value):
    """Gaussian conditional of ``u`` given ``y = y_value`` under the joint fit."""
    y_value = np.atleast_1d(np.asarray(y_value, dtype=float))
    if y_value.shape != (m.dim_y,):
        raise ValueError(f"y_value must have length {m.dim_y}")
    gain, cov = conditional_gain(m)
    return Gaussian(m.mean_u + gain @ (y_value - m.mean_y), cov)


def sample_gaussian(g, count, rng):
    """``count`` i.i.d. draws as a ``(count, d)`` matrix.

    Semidefinite covariances fall back to a symmetric eigen square root.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    try:
        factor = sla.cholesky(g.covariance, lower=True)
    except (np.linalg.LinAlgError, ValueError):
        evals, evecs = np.linalg.eigh(g.covariance)
        factor = evecs * np.sqrt(np.clip(evals, 0.0, None))
    z = rng.standard_normal((count, g.dim))
    return g.mean + z @ factor.T
