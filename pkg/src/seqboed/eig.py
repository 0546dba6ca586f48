"""Expected information gain: Gaussian/Laplace bounds and reference estimators.

All bound estimators are sample averages of per-sample terms, so each one
also reports a batch-means standard error (10 contiguous batches).
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.special import logsumexp

from .errors import NumericalDegeneracyError
from .gaussian_core import (
    LOG_2PI,
    Gaussian,
    _regularized_cholesky,
    conditional_gain,
    empirical_moments,
    gaussian_log_density,
    sample_gaussian,
)

log = logging.getLogger(__name__)

N_BATCHES = 10
# Gaussian fits are evaluated out of fold: an in-sample fit inflates the
# fitted log-density by roughly (#parameters)/(2J), which pushes the lower
# bound up and the upper bound down at moderate J.
DEFAULT_FOLDS = 10


def noise_block(noise, k):
    """``N(0, Γ)`` of dimension ``k``; a 1-D noise is repeated as ``Γ I_k``."""
    if noise.dim == k:
        return noise
    if noise.dim == 1:
        return Gaussian(np.zeros(k), noise.covariance[0, 0] * np.eye(k))
    reps, rem = divmod(k, noise.dim)
    if rem:
        raise ValueError(f"noise of dim {noise.dim} cannot cover observation of length {k}")
    return Gaussian(np.zeros(k), sla.block_diag(*([noise.covariance] * reps)))


def batch_standard_error(terms, n_batches=N_BATCHES):
    """Standard error of ``mean(terms)`` from contiguous batch means."""
    terms = np.asarray(terms, dtype=float)
    n_batches = min(n_batches, terms.size)
    if n_batches < 2:
        return float("nan")
    means = np.array([b.mean() for b in np.array_split(terms, n_batches)])
    return float(means.std(ddof=1) / math.sqrt(n_batches))


@dataclass
class JointSampleSet:
    design: object
    samples_u: np.ndarray
    samples_y: np.ndarray
    loglik: np.ndarray
    log_prior_seq: np.ndarray
    model: object = None
    noise: Gaussian | None = None
    log_normalizer: float = 0.0

    def __post_init__(self):
        n = self.samples_u.shape[0]
        if self.samples_y.shape[0] != n or self.loglik.shape != (n,):
            raise ValueError("joint sample arrays have inconsistent row counts")
        if not np.all(np.isfinite(self.loglik)):
            raise ValueError("log-likelihood cache contains non-finite values")

    @property
    def size(self):
        return self.samples_u.shape[0]


@dataclass
class EIGBounds:
    lower: float
    upper: float
    lower_method: str
    sample_count: int
    se_lower: float = float("nan")
    se_upper: float = float("nan")
    lb_gauss: float = float("nan")
    lb_laplace: float = float("nan")
    se_lb_gauss: float = float("nan")
    se_lb_laplace: float = float("nan")
    laplace_fallback_count: int = 0
    log_normalizer: float = 0.0
    design: object = None
    extra: dict = field(default_factory=dict)

    @property
    def gap(self):
        return self.upper - self.lower

    @property
    def combined_se(self):
        return math.hypot(self.se_lower, self.se_upper)

    @property
    def lower_unnormalized(self):
        """Lower bound without the estimated ``log Z`` of the sequential prior."""
        return self.lower - self.log_normalizer

    def ordered(self, slack=3.0):
        return self.upper >= self.lower - slack * self.combined_se


# --------------------------------------------------------------------------
# sampling


def simulate_joint(prior_samples, model, p, noise, rng, target=None):
    """Pair each prior sample with simulated data ``y = G(u, p) + η``.

    ``target`` (a :class:`~seqboed.aldi.SequentialTarget`) supplies the
    sequential-prior log-density needed by the lower bounds; without it the
    ``log_prior_seq`` column is NaN and only the upper bound is available.
    """
    U = np.atleast_2d(np.asarray(prior_samples, dtype=float))
    if U.shape[0] < 2:
        raise ValueError("simulate_joint needs at least 2 samples")
    g = model.evaluate_batch(U, p)
    nz = noise_block(noise, g.shape[1])
    eta = sample_gaussian(nz, U.shape[0], rng)
    y = g + eta
    loglik = gaussian_log_density(nz, eta)
    if target is None:
        lps, logz = np.full(U.shape[0], np.nan), 0.0
    else:
        lps, logz = target.log_density(U), target.log_normalizer
    return JointSampleSet(p, U, y, np.atleast_1d(loglik), lps, model, nz, logz)


def _require_prior(js):
    if np.any(np.isnan(js.log_prior_seq)):
        raise ValueError("lower bounds need a joint sample set built with a target")


# --------------------------------------------------------------------------
# Gaussian bounds


def fold_indices(n, folds):
    """``(train, test)`` index pairs; ``folds <= 1`` means fit and evaluate on all rows."""
    if folds <= 1:
        idx = np.arange(n)
        return [(idx, idx)]
    if n < 2 * folds:
        raise ValueError(f"{n} samples are too few for {folds}-fold cross-fitting")
    parts = np.array_split(np.arange(n), folds)
    return [(np.concatenate(parts[:i] + parts[i + 1:]), test) for i, test in enumerate(parts)]


def _stabilized(cov, what):
    lower = _regularized_cholesky(cov, what)
    return lower @ lower.T


def upper_terms(js, folds=DEFAULT_FOLDS):
    """Per-sample ``log π(y|u,p) − log N(y; m̃_y, C̃_y)``; the fit excludes the sample's own fold."""
    Y = js.samples_y
    log_marginal = np.empty(js.size)
    for train, test in fold_indices(js.size, folds):
        m = empirical_moments(Y[train])
        fit = Gaussian(m.mean_u, _stabilized(m.cov_u, "cov_y"))
        log_marginal[test] = gaussian_log_density(fit, Y[test])
    return js.loglik - log_marginal


def eig_upper_gaussian(js, return_se=False, folds=DEFAULT_FOLDS):
    """Average of ``log π(y|u,p) − log N(y; m̃_y, C̃_y)`` over the joint samples."""
    t = upper_terms(js, folds)
    return (float(t.mean()), batch_standard_error(t)) if return_se else float(t.mean())


def _conditional_log_density(m, U, Y):
    gain, cov = conditional_gain(m)
    means = m.mean_u + (Y - m.mean_y) @ gain.T
    lower = _regularized_cholesky(cov, "conditional covariance")
    white = sla.solve_triangular(lower, (U - means).T, lower=True)
    log_det = 2.0 * np.sum(np.log(np.diag(lower)))
    return -0.5 * np.sum(white**2, axis=0) - 0.5 * (U.shape[1] * LOG_2PI + log_det), means


def gaussian_conditional_terms(js, folds=DEFAULT_FOLDS):
    """``log π̃(u_j | y_j)`` and the conditional means, fitted without the sample's fold."""
    U, Y = js.samples_u, js.samples_y
    logq = np.empty(js.size)
    means = np.empty_like(U)
    for train, test in fold_indices(js.size, folds):
        m = empirical_moments(U[train], Y[train])
        logq[test], means[test] = _conditional_log_density(m, U[test], Y[test])
    return logq, means


def lower_terms_gaussian(js, folds=DEFAULT_FOLDS):
    _require_prior(js)
    return gaussian_conditional_terms(js, folds)[0] - js.log_prior_seq


def eig_lower_gaussian(js, return_se=False, folds=DEFAULT_FOLDS):
    """Average of ``log π̃(u|y,p) − log π_seq(u)`` under the joint Gaussian fit."""
    t = lower_terms_gaussian(js, folds)
    return (float(t.mean()), batch_standard_error(t)) if return_se else float(t.mean())


# --------------------------------------------------------------------------
# parametrized Laplace lower bound


class _Stacked:
    """Whitened residual map ``R(u) = [W(G(u,p) − y); W_0(u − m_0); W_ℓ(G_ℓ(u) − y_ℓ)]``."""

    def __init__(self, js, target):
        self.parts = [(js.model, js.design, _whitener(js.noise.covariance), None)]
        for obs in target.observations:
            k = obs.model.obs_dim
            self.parts.append((obs.model, obs.design, _whitener(target.noise_for(k)), obs.y))
        self.prior_mean = target.prior.mean
        self.prior_white = _whitener(target.prior.covariance)

    def raw(self, U):
        return [model.evaluate_batch(U, p) for model, p, _, _ in self.parts]

    def residual(self, U, Y):
        blocks = []
        for (model, p, w, y_fixed), g in zip(self.parts, self.raw(U)):
            blocks.append((g - (Y if y_fixed is None else y_fixed)) @ w.T)
        blocks.insert(1, (U - self.prior_mean) @ self.prior_white.T)
        return np.concatenate(blocks, axis=1)

    def jacobian(self, U, rel_step):
        n, d = U.shape
        steps = rel_step * np.maximum(1.0, np.abs(U))
        cols = []
        for i in range(d):
            e = np.zeros(d)
            e[i] = 1.0
            h = steps[:, i:i + 1]
            plus, minus = self.raw(U + h * e), self.raw(U - h * e)
            cols.append([(a - b) / (2.0 * h) for a, b in zip(plus, minus)])
        blocks = []
        for c, (_, _, w, _) in enumerate(self.parts):
            jac = np.stack([cols[i][c] for i in range(d)], axis=2)  # (n, k, d)
            blocks.append(np.einsum("ab,nbd->nad", w, jac))
        blocks.insert(1, np.broadcast_to(self.prior_white, (n, d, d)))
        return np.concatenate(blocks, axis=1)


def _whitener(cov):
    lower = np.linalg.cholesky(np.atleast_2d(cov))
    return sla.solve_triangular(lower, np.eye(lower.shape[0]), lower=True)


def laplace_maps(js, target, init=None, rel_step=1e-6, max_iter=100, tol=1e-8, damping=1e-3):
    """Batched Levenberg–Marquardt for the per-sample MAP points.

    Returns ``(maps, hessians, converged, cost)`` where ``hessians`` are the
    Gauss–Newton Hessians ``J_Rᵀ J_R`` at the returned points.
    """
    Y = js.samples_y
    n, d = js.samples_u.shape
    stack = _Stacked(js, target)
    U = np.array(js.samples_u if init is None else init, dtype=float)
    R = stack.residual(U, Y)
    cost = 0.5 * np.sum(R**2, axis=1)
    lam = np.full(n, damping)
    nu = np.full(n, 2.0)
    done = np.zeros(n, dtype=bool)
    eye = np.eye(d)
    for _ in range(max_iter):
        act = np.flatnonzero(~done)
        if act.size == 0:
            break
        Ja = stack.jacobian(U[act], rel_step)
        grad = np.einsum("nkd,nk->nd", Ja, R[act])
        H = np.einsum("nkd,nke->nde", Ja, Ja)
        # large-residual problems converge only linearly under Gauss–Newton,
        # so stationarity of the gradient also counts as convergence
        scale = np.linalg.norm(Ja, axis=(1, 2)) * np.linalg.norm(R[act], axis=1)
        stationary = np.linalg.norm(grad, axis=1) <= tol * np.maximum(1.0, scale)
        try:
            step = -np.linalg.solve(H + lam[act, None, None] * eye, grad[..., None])[..., 0]
        except np.linalg.LinAlgError:
            break
        trial = U[act] + step
        ok = np.all(np.isfinite(trial), axis=1)
        trial[~ok] = U[act][~ok]
        R_new = stack.residual(trial, Y[act])
        cost_new = 0.5 * np.sum(R_new**2, axis=1)
        # gain ratio of actual to predicted decrease (Nielsen's damping update)
        predicted = 0.5 * np.einsum("nd,nd->n", step, lam[act, None] * step - grad)
        gain = (cost[act] - cost_new) / np.maximum(predicted, np.finfo(float).tiny)
        accept = ok & (cost_new <= cost[act]) & (gain > 0)
        small = np.linalg.norm(step, axis=1) < tol * np.maximum(1.0, np.linalg.norm(U[act], axis=1))
        idx = act[accept]
        U[idx], R[idx], cost[idx] = trial[accept], R_new[accept], cost_new[accept]
        lam[idx] *= np.maximum(1.0 / 3.0, 1.0 - (2.0 * gain[accept] - 1.0) ** 3)
        nu[idx] = 2.0
        rej = act[~accept]
        lam[rej] *= nu[rej]
        nu[rej] *= 2.0
        done[act[(small & ok) | stationary]] = True
    Jf = stack.jacobian(U, rel_step)
    return U, np.einsum("nkd,nke->nde", Jf, Jf), done, cost


def lower_terms_laplace(js, target, folds=DEFAULT_FOLDS, **kwargs):
    """Per-sample Laplace terms and the number of Gaussian-conditional fallbacks."""
    _require_prior(js)
    logq, init = gaussian_conditional_terms(js, folds)
    maps, hess, converged, _ = laplace_maps(js, target, init=init, **kwargs)
    n, d = maps.shape
    terms = np.empty(n)
    good = converged.copy()
    chol = np.zeros_like(hess)
    try:
        chol[good] = np.linalg.cholesky(hess[good])
    except np.linalg.LinAlgError:
        for i in np.flatnonzero(good):
            try:
                chol[i] = np.linalg.cholesky(hess[i])
            except np.linalg.LinAlgError:
                good[i] = False
    diff = js.samples_u - maps
    # N(u; u*, H^{-1}) with H = L L^T: quadratic form ||L^T (u - u*)||^2
    quad = np.sum(np.einsum("nji,nj->ni", chol, diff) ** 2, axis=1)
    half_logdet = np.sum(np.log(np.abs(np.diagonal(chol, axis1=1, axis2=2)) + (~good)[:, None]), axis=1)
    terms[good] = (half_logdet - 0.5 * quad - 0.5 * d * LOG_2PI)[good]
    fallback = int(np.count_nonzero(~good))
    if fallback:
        log.info("Laplace fallback to Gaussian conditional for %d of %d samples", fallback, n)
        terms[~good] = logq[~good]
    return terms - js.log_prior_seq, fallback


def eig_lower_laplace(js, target, return_se=False, **kwargs):
    t, fallback = lower_terms_laplace(js, target, **kwargs)
    if return_se:
        return float(t.mean()), batch_standard_error(t), fallback
    return float(t.mean())


def estimate_bounds(js, target=None, delta=0.1, laplace=True, folds=DEFAULT_FOLDS):
    """Gaussian bounds, refined by the Laplace lower bound when the gap exceeds ``delta``.

    The larger of the two lower-bound estimates is reported as ``lower``.
    Without a ``target`` only the upper bound is computed and ``lower`` is NaN.
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    ub, se_ub = eig_upper_gaussian(js, return_se=True, folds=folds)
    out = EIGBounds(float("nan"), ub, "none", js.size, se_upper=se_ub,
                    log_normalizer=js.log_normalizer, design=js.design)
    if target is None:
        return out
    lb, se_lb = eig_lower_gaussian(js, return_se=True, folds=folds)
    out.lower, out.se_lower, out.lower_method = lb, se_lb, "gaussian"
    out.lb_gauss, out.se_lb_gauss = lb, se_lb
    if laplace and ub - lb > delta:
        lbl, se_lbl, fallback = eig_lower_laplace(js, target, return_se=True, folds=folds)
        out.lb_laplace, out.se_lb_laplace, out.laplace_fallback_count = lbl, se_lbl, fallback
        if lbl > lb:
            out.lower, out.se_lower, out.lower_method = lbl, se_lbl, "laplace"
    if out.gap > delta:
        warnings.warn(
            f"EIG bound gap {out.gap:.3g} exceeds delta={delta:g} at design {js.design!r}; "
            "a richer joint approximation would be needed to close it",
            RuntimeWarning,
            stacklevel=2,
        )
    return out


# --------------------------------------------------------------------------
# reference estimators


def eig_exact_linear(A, prior, noise_cov):
    """``½ log det(I_k + Γ⁻¹ A Σ_0 Aᵀ)`` for ``y = A u + η``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    gamma = np.atleast_2d(np.asarray(noise_cov, dtype=float))
    if gamma.shape == (1, 1) and A.shape[0] > 1:
        gamma = gamma[0, 0] * np.eye(A.shape[0])
    try:
        np.linalg.cholesky(gamma)
    except np.linalg.LinAlgError:
        raise NumericalDegeneracyError("noise covariance is not positive definite") from None
    m = np.eye(A.shape[0]) + np.linalg.solve(gamma, A @ prior.covariance @ A.T)
    sign, logdet = np.linalg.slogdet(m)
    return 0.5 * logdet


def _draw(prior, count, rng, offset=0):
    if isinstance(prior, Gaussian):
        return sample_gaussian(prior, count, rng)
    U = np.atleast_2d(np.asarray(prior, dtype=float))
    if U.shape[0] < offset + count:
        raise ValueError("not enough prior samples for the requested sizes")
    return U[offset:offset + count]


def eig_nested_mc(prior_samples, model, p, noise, n_outer, n_inner, rng, return_se=False, chunk=512):
    """Double-loop Monte Carlo EIG with a shared set of fresh inner samples.

    ``prior_samples`` is either a :class:`Gaussian` prior (fresh draws) or an
    array holding at least ``n_outer + n_inner`` rows (outer rows first).
    """
    if n_outer < 1 or n_inner < 1:
        raise ValueError("n_outer and n_inner must be >= 1")
    outer = _draw(prior_samples, n_outer, rng)
    inner = _draw(prior_samples, n_inner, rng, offset=n_outer)
    g_out = model.evaluate_batch(outer, p)
    nz = noise_block(noise, g_out.shape[1])
    eta = sample_gaussian(nz, n_outer, rng)
    y = g_out + eta
    w = _whitener(nz.covariance)
    a, b = y @ w.T, model.evaluate_batch(inner, p) @ w.T
    const = -0.5 * (nz.dim * LOG_2PI + nz.log_det())
    loglik = np.atleast_1d(gaussian_log_density(nz, eta))
    b2 = np.sum(b**2, axis=1)
    terms = np.empty(n_outer)
    for s in range(0, n_outer, chunk):
        aa = a[s:s + chunk]
        sq = np.sum(aa**2, axis=1)[:, None] + b2[None, :] - 2.0 * aa @ b.T
        log_ev = logsumexp(-0.5 * np.maximum(sq, 0.0), axis=1) - math.log(n_inner) + const
        terms[s:s + chunk] = loglik[s:s + chunk] - log_ev
    est = float(terms.mean())
    return (est, batch_standard_error(terms)) if return_se else est


def estimate_log_normalizer(particles, target, rng, count=10_000):
    """Importance estimate of ``log Z_(n)`` for the unnormalized sequential prior.

    The proposal is the Gaussian fit (``1/(J−1)``) of the posterior ensemble;
    the weights are ``π_0(u) exp(−Σ_ℓ Φ_ℓ(u)) / q(u)``.
    """
    if len(target) == 0:
        return 0.0
    m = empirical_moments(particles)
    q = Gaussian(m.mean_u, _stabilized(m.cov_u, "posterior ensemble covariance"))
    U = sample_gaussian(q, count, rng)
    logw = target.log_density_unnormalized(U) - gaussian_log_density(q, U)
    return float(logsumexp(logw) - math.log(count))
