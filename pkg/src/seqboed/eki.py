"""Regularized ensemble Kalman inversion over the design space.

Each design particle follows

    dp_i/dt = (1 − ρ)[−C_{p,F} F(p_i) − C_p α C_p⁻¹ p_i] + ρ[−C_{p,F} F̄ − C_p α C_p⁻¹ p̄]

with the loss ``F(p) = sqrt(2 (c − EIG(p)))``, so that ``½F²`` is the shifted
negative EIG. Empirical covariances over the design ensemble use ``1/J``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import RK45

from .errors import IntegratorError, LossTransformDomainError

log = logging.getLogger(__name__)


@dataclass
class DesignEnsemble:
    designs: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        d = np.asarray(self.designs, dtype=float)
        self.designs = d[:, None] if d.ndim == 1 else d
        if self.designs.shape[0] < 2:
            raise ValueError("a design ensemble needs at least 2 members")
        if not np.all(np.isfinite(self.designs)):
            raise ValueError("designs must be finite")

    @property
    def size(self):
        return self.designs.shape[0]

    @property
    def dim(self):
        return self.designs.shape[1]

    def mean(self):
        return self.designs.mean(axis=0)


@dataclass
class EKIConfig:
    alpha: float = 1e-2
    c_p: object = 1.0
    rho: float | None = None  # constant ρ; None selects the schedule below
    rho_scale: float = 0.01
    rho_gamma: float = 0.2
    rho_horizon: float = 1e5
    rho_max: float = 0.99
    c_shift: float = 3.0
    t_end: float = 1e3
    rtol: float = 1e-6
    atol: float = 1e-9
    max_steps: int = 100_000

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not math.isfinite(self.c_shift):
            raise ValueError("c_shift must be finite")
        if not 0.0 <= self.rho_max < 1.0:
            raise ValueError("rho_max must lie in [0, 1)")
        if self.rho is not None and not 0.0 <= self.rho < 1.0:
            raise ValueError("constant rho must lie in [0, 1)")
        if not self.t_end > 0:
            raise ValueError("t_end must be positive")

    def precision(self, dim):
        c = np.asarray(self.c_p, dtype=float)
        c = c * np.eye(dim) if c.ndim == 0 else np.atleast_2d(c)
        if c.shape != (dim, dim):
            raise ValueError(f"c_p has shape {c.shape}, expected {(dim, dim)}")
        return np.linalg.inv(c)


def inflation(t, cfg):
    """``ρ(t)``: the constant ``cfg.rho`` or ``a (1 − (t/T + 1)^{−γ})``, clipped to ``rho_max``."""
    if cfg.rho is not None:
        rho = cfg.rho
    else:
        rho = cfg.rho_scale * (1.0 - (t / cfg.rho_horizon + 1.0) ** (-cfg.rho_gamma))
    return float(min(max(rho, 0.0), cfg.rho_max))


def loss_transform(eig_value, c_shift):
    """``F = sqrt(2 (c − EIG))``; raises when the radicand is not positive."""
    radicand = 2.0 * (c_shift - eig_value)
    if not radicand > 0:
        raise LossTransformDomainError(
            f"EIG estimate {eig_value:.6g} reached c_shift={c_shift:.6g}; raise c_shift above the maximal EIG"
        )
    return math.sqrt(radicand)


def ensemble_spread(designs):
    """``V_e = (1/J) Σ ½‖p_i − p̄‖²``."""
    dev = designs - designs.mean(axis=0)
    return 0.5 * float(np.sum(dev**2)) / designs.shape[0]


def eki_rhs(ens, losses, cfg, rho=None):
    """Drift of the regularized EKI system for every design particle."""
    P = ens.designs
    J, dim = P.shape
    losses = np.asarray(losses, dtype=float).reshape(J, -1)
    if not np.all(np.isfinite(losses)):
        raise ValueError("losses must be finite")
    rho = inflation(ens.time, cfg) if rho is None else rho
    dp = P - P.mean(axis=0)
    df = losses - losses.mean(axis=0)
    cov_p = dp.T @ dp / J
    cov_pf = dp.T @ df / J  # (dim, k)
    reg = cfg.alpha * cfg.precision(dim)
    particle = -losses @ cov_pf.T - P @ reg.T @ cov_p.T
    mean_field = -losses.mean(axis=0) @ cov_pf.T - P.mean(axis=0) @ reg.T @ cov_p.T
    return (1.0 - rho) * particle + rho * mean_field


def _as_value(out):
    return float(out[0] if isinstance(out, tuple) else out)


class _LossCache:
    """Memoized ``F(EIG(p))``; the RK45 FSAL stage hits it at accepted points."""

    def __init__(self, eig_fn, c_shift, size=64):
        self.eig_fn = eig_fn
        self.c_shift = c_shift
        self.size = size
        self._store = {}
        self.evaluations = 0

    def __call__(self, p):
        key = np.ascontiguousarray(p, dtype=float).tobytes()
        hit = self._store.get(key)
        if hit is None:
            value = _as_value(self.eig_fn(np.array(p, dtype=float) if p.size > 1 else float(p[0])))
            hit = (value, loss_transform(value, self.c_shift))
            self.evaluations += 1
            if len(self._store) >= self.size:
                self._store.pop(next(iter(self._store)))
            self._store[key] = hit
        return hit

    def losses(self, P):
        return np.array([self(row)[1] for row in P])

    def eigs(self, P):
        return np.array([self(row)[0] for row in P])


@dataclass
class EKITrace:
    t: list
    designs: list
    losses: list
    spread: list
    rho: list
    evaluations: int = 0

    def tail_slope(self, t_min):
        """Least-squares slope of ``log V_e`` against ``log t`` for ``t ≥ t_min``."""
        t = np.asarray(self.t)
        v = np.asarray(self.spread)
        mask = (t >= t_min) & (v > 0)
        if mask.sum() < 2:
            return float("nan")
        return float(np.polyfit(np.log(t[mask]), np.log(v[mask]), 1)[0])

    def rows(self):
        for t, p, f, v, r in zip(self.t, self.designs, self.losses, self.spread, self.rho):
            yield t, p.ravel(), f, v, r


def eki_optimize(init, eig_fn, cfg, rng=None):
    """Integrate the EKI system to ``cfg.t_end`` with an adaptive Dormand–Prince pair.

    ``eig_fn(p)`` returns the EIG estimate (or a tuple whose first entry is
    it) and must be deterministic in ``p``; the caller fixes its random
    numbers for the whole run. ``rng`` is accepted for interface symmetry and
    not consumed.
    """
    J, dim = init.designs.shape
    cache = _LossCache(eig_fn, cfg.c_shift)

    def rhs(t, y):
        P = y.reshape(J, dim)
        ens = DesignEnsemble(P, t)
        return eki_rhs(ens, cache.losses(P), cfg).ravel()

    trace = EKITrace([], [], [], [], [])

    def record(t, y):
        P = y.reshape(J, dim).copy()
        trace.t.append(float(t))
        trace.designs.append(P)
        trace.losses.append(cache.losses(P))
        trace.spread.append(ensemble_spread(P))
        trace.rho.append(inflation(t, cfg))

    y0 = init.designs.ravel().astype(float)
    record(init.time, y0)
    solver = RK45(rhs, init.time, y0, init.time + cfg.t_end, rtol=cfg.rtol, atol=cfg.atol)
    steps = 0
    while solver.status == "running":
        msg = solver.step()
        if solver.status == "failed":
            raise IntegratorError(f"EKI integration failed at t={solver.t:.6g}: {msg}")
        record(solver.t, solver.y)
        steps += 1
        if steps >= cfg.max_steps:
            raise IntegratorError(f"EKI integration exceeded {cfg.max_steps} steps at t={solver.t:.6g}")
    trace.evaluations = cache.evaluations
    log.debug("EKI finished after %d steps, %d EIG evaluations", steps, cache.evaluations)
    return DesignEnsemble(solver.y.reshape(J, dim).copy(), solver.t), trace


def uniform_design_ensemble(count, low, high, rng, dim=1):
    return DesignEnsemble(rng.uniform(low, high, size=(count, dim)))
