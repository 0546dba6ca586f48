"""Affine-invariant interacting Langevin dynamics (ALDI) for the sequential posterior.

The gradient-free sampler replaces ``C_u ∇Φ`` by cross-covariances between
particles and their forward images, which is exact for linear models. The
noise uses the non-symmetric square root ``C_u^{1/2} = J^{-1/2} (u_j - ū)_j``
driven by ``J``-dimensional standard normals, which keeps every update in the
affine span of the ensemble and makes the scheme pathwise affine-equivariant.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla

from .errors import DivergedSamplerError
from .gaussian_core import Gaussian, gaussian_log_density, sample_gaussian

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Observation:
    y: np.ndarray
    design: object
    model: object


class SequentialTarget:
    """Prior times the likelihoods of all observations collected so far.

    ``log_normalizer`` holds an estimate of ``log Z_(n)`` (zero for the prior
    alone); see :func:`seqboed.eig.estimate_log_normalizer`.
    """

    def __init__(self, prior, noise, observations=(), log_normalizer=0.0):
        self.prior = prior
        self.noise = noise
        self.observations = tuple(observations)
        self.log_normalizer = float(log_normalizer)
        for obs in self.observations:
            if np.asarray(obs.y).size != obs.model.obs_dim:
                raise ValueError("observation length does not match model.obs_dim")
        self._prior_precision = prior.precision()

    @property
    def dim(self):
        return self.prior.dim

    def __len__(self):
        return len(self.observations)

    def extend(self, y, design, model):
        obs = Observation(np.atleast_1d(np.asarray(y, dtype=float)), design, model)
        return SequentialTarget(self.prior, self.noise, self.observations + (obs,))

    def with_log_normalizer(self, value):
        return SequentialTarget(self.prior, self.noise, self.observations, value)

    def noise_for(self, k):
        """Noise covariance for an observation block of length ``k``."""
        if k == self.noise.dim:
            return self.noise.covariance
        if self.noise.dim == 1:
            return self.noise.covariance[0, 0] * np.eye(k)
        reps, rem = divmod(k, self.noise.dim)
        if rem:
            raise ValueError(f"noise of dim {self.noise.dim} cannot cover observation of length {k}")
        return sla.block_diag(*([self.noise.covariance] * reps))

    def noise_precision(self, k):
        return np.linalg.inv(self.noise_for(k))

    def forward_images(self, U):
        return [obs.model.evaluate_batch(U, obs.design) for obs in self.observations]

    def misfit(self, U, images=None):
        """Sum of potentials ``Σ_ℓ ½‖y_ℓ − G_ℓ(u)‖²_Γ`` for each row of ``U``."""
        U = np.atleast_2d(U)
        images = self.forward_images(U) if images is None else images
        total = np.zeros(U.shape[0])
        for obs, g in zip(self.observations, images):
            r = obs.y - g
            total += 0.5 * np.einsum("ij,jk,ik->i", r, self.noise_precision(r.shape[1]), r)
        return total

    def log_density_unnormalized(self, U, images=None):
        return gaussian_log_density(self.prior, np.atleast_2d(U)) - self.misfit(U, images)

    def log_density(self, U, images=None):
        return self.log_density_unnormalized(U, images) - self.log_normalizer


@dataclass
class ALDIDiagnostics:
    rows: list = field(default_factory=list)
    stationary: bool = True
    retries: int = 0


@dataclass
class ParticleEnsemble:
    particles: np.ndarray
    step_count: int = 0
    diagnostics: ALDIDiagnostics | None = None

    def __post_init__(self):
        self.particles = np.atleast_2d(np.asarray(self.particles, dtype=float))

    @property
    def size(self):
        return self.particles.shape[0]

    @property
    def dim(self):
        return self.particles.shape[1]

    def mean(self):
        return self.particles.mean(axis=0)

    def covariance(self, ddof=1):
        return np.atleast_2d(np.cov(self.particles, rowvar=False, ddof=ddof))


def check_ensemble_size(J, d):
    if J < d + 2:
        raise ValueError(f"gradient-free ALDI needs J >= d + 2 particles (J={J}, d={d})")


def nonsymmetric_sqrt(U, normalization="J"):
    """``(d, J)`` matrix ``S`` with ``S S^T`` equal to the ensemble covariance."""
    U = np.atleast_2d(U)
    J = U.shape[0]
    denom = J if normalization == "J" else J - 1
    return (U - U.mean(axis=0)).T / math.sqrt(denom)


def _ensemble_stats(U, normalization):
    J = U.shape[0]
    dev = U - U.mean(axis=0)
    denom = J if normalization == "J" else J - 1
    return dev, dev.T @ dev / denom, denom


def aldi_drift(U, target, normalization="J", images=None):
    """Gradient-free ALDI drift for every particle, without the noise term."""
    U = np.atleast_2d(U)
    J, d = U.shape
    dev, cov_u, denom = _ensemble_stats(U, normalization)
    drift = (d + 1) / J * dev
    drift -= (U - target.prior.mean) @ target._prior_precision @ cov_u
    images = target.forward_images(U) if images is None else images
    for obs, g in zip(target.observations, images):
        cross = dev.T @ (g - g.mean(axis=0)) / denom  # (d, k)
        drift += (obs.y - g) @ target.noise_precision(g.shape[1]) @ cross.T
    return drift


def potential_gradient(U, target, rel_step=1e-5):
    """∇ of ``Σ_ℓ Φ_ℓ(u) + ½‖u − m_0‖²_{Σ_0}`` by central differences of each ``G_ℓ``."""
    U = np.atleast_2d(U)
    grad = (U - target.prior.mean) @ target._prior_precision
    for obs in target.observations:
        g = obs.model.evaluate_batch(U, obs.design)
        jac = obs.model.jacobian_batch(U, obs.design, rel_step=rel_step)  # (J, k, d)
        weighted = (obs.y - g) @ target.noise_precision(g.shape[1])  # (J, k)
        grad -= np.einsum("jk,jkd->jd", weighted, jac)
    return grad


def aldi_drift_gradient(U, target, normalization="J", rel_step=1e-5):
    U = np.atleast_2d(U)
    J, d = U.shape
    dev, cov_u, _ = _ensemble_stats(U, normalization)
    return (d + 1) / J * dev - potential_gradient(U, target, rel_step) @ cov_u


def _em_step(U, drift, dt, rng, normalization, noise="projected"):
    J = U.shape[0]
    root = nonsymmetric_sqrt(U, normalization)  # (d, J)
    if noise == "full":
        xi = rng.standard_normal((J, J))
    elif noise == "projected":
        # Only the component of ξ in the column space of the deviations
        # reaches the particles; Q^T ξ is exactly standard normal there.
        q, _ = np.linalg.qr(root.T)
        xi = rng.standard_normal((J, q.shape[1])) @ q.T
    else:
        raise ValueError(f"unknown noise mode {noise!r}")
    return U + dt * drift + math.sqrt(2.0 * dt) * (xi @ root.T)


def _warn_if_collapsed(U, step):
    if np.ptp(U, axis=0).max() == 0.0:
        warnings.warn(f"ALDI ensemble collapsed to a single point at step {step}", RuntimeWarning, stacklevel=3)


def aldi_step(ens, target, dt, rng, normalization="J", noise="projected"):
    """One Euler–Maruyama step of gradient-free ALDI.

    ``noise="full"`` draws a ``J``-vector ``ξ`` per particle; ``"projected"``
    (default) draws only its projection onto the span of the ensemble
    deviations, which yields the same update in law at ``O(J d)`` cost.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    U = ens.particles
    check_ensemble_size(*U.shape)
    _warn_if_collapsed(U, ens.step_count)
    new = _em_step(U, aldi_drift(U, target, normalization), dt, rng, normalization, noise)
    if not np.all(np.isfinite(new)):
        raise DivergedSamplerError("non-finite particle after ALDI step", step=ens.step_count + 1)
    return ParticleEnsemble(new, ens.step_count + 1, ens.diagnostics)


def aldi_step_gradient(ens, target, dt, rng, normalization="J", noise="projected", rel_step=1e-5):
    """One Euler–Maruyama step of gradient-based ALDI with finite-difference gradients."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    U = ens.particles
    _warn_if_collapsed(U, ens.step_count)
    new = _em_step(U, aldi_drift_gradient(U, target, normalization, rel_step), dt, rng, normalization, noise)
    if not np.all(np.isfinite(new)):
        raise DivergedSamplerError("non-finite particle after ALDI step", step=ens.step_count + 1)
    return ParticleEnsemble(new, ens.step_count + 1, ens.diagnostics)


def _diag_row(ens, t):
    U = ens.particles
    return {
        "step": ens.step_count,
        "t": t,
        "mean": U.mean(axis=0).copy(),
        "cov_trace": float(np.trace(np.atleast_2d(np.cov(U, rowvar=False, ddof=0)))),
    }


def aldi_run(init, target, t_end, dt, rng, normalization="J", snapshot_every=10,
             gradient=False, max_halvings=4, noise="projected"):
    """Iterate ALDI for ``ceil(t_end / dt)`` steps and return the final ensemble.

    A step that produces non-finite particles is retried from the same state
    with the step size halved (two half steps), up to ``max_halvings`` times.
    The returned ensemble carries :class:`ALDIDiagnostics` with snapshot rows
    and a stationarity flag (ensemble-mean drift over the last 20% of the run
    within one standard error).
    """
    if not t_end >= dt:
        raise ValueError("t_end must be >= dt")
    n_steps = max(1, math.ceil(t_end / dt - 1e-9))
    stepper = aldi_step_gradient if gradient else aldi_step
    diag = ALDIDiagnostics()
    ens = ParticleEnsemble(init.particles.copy(), 0, diag)
    diag.rows.append(_diag_row(ens, 0.0))
    mark = None
    for i in range(n_steps):
        for halving in range(max_halvings + 1):
            sub_dt = dt / 2**halving
            try:
                trial = ens
                for _ in range(2**halving):
                    trial = stepper(replace(trial, step_count=ens.step_count), target, sub_dt, rng, normalization, noise)
                break
            except DivergedSamplerError:
                if halving == max_halvings:
                    raise DivergedSamplerError("ALDI diverged after step halving", step=i + 1) from None
                diag.retries += 1
                log.warning("ALDI step %d diverged, retrying with dt=%g", i + 1, dt / 2 ** (halving + 1))
        ens = ParticleEnsemble(trial.particles, i + 1, diag)
        if (i + 1) % snapshot_every == 0 or i + 1 == n_steps:
            diag.rows.append(_diag_row(ens, (i + 1) * dt))
        if mark is None and i + 1 >= math.ceil(0.8 * n_steps):
            mark = ens.mean()
    if mark is not None:
        U = ens.particles
        se = np.sqrt(np.var(U, axis=0) / U.shape[0])
        diag.stationary = bool(np.all(np.abs(ens.mean() - mark) <= np.maximum(se, 1e-300)))
        if not diag.stationary:
            log.info("ALDI ensemble mean still drifting over the last 20%% of the run")
    return ens


def prior_ensemble(prior, count, rng):
    return ParticleEnsemble(sample_gaussian(prior, count, rng), 0)


def conjugate_posterior(prior, matrices, observations, noise_cov):
    """Exact Gaussian posterior for linear observations ``y_ℓ = A_ℓ u + η``."""
    precision = prior.precision()
    info = precision @ prior.mean
    for a, y in zip(matrices, observations):
        a = np.atleast_2d(a)
        g_inv = np.linalg.inv(np.atleast_2d(noise_cov) if np.ndim(noise_cov) else np.array([[noise_cov]]))
        precision = precision + a.T @ g_inv @ a
        info = info + a.T @ g_inv @ np.atleast_1d(y)
    cov = np.linalg.inv(precision)
    return Gaussian(cov @ info, cov)
