"""Parameterized forward maps ``G(u, p)``.

Every model exposes ``param_dim``, ``design_dim``, ``obs_dim`` and
``evaluate(u, p)``; ``evaluate_batch(U, p)`` maps a ``(J, d)`` particle
matrix to a ``(J, k)`` output matrix. Models are deterministic; noise is
added by callers.
"""

from __future__ import annotations

import hashlib
import logging
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lapack

from .errors import ForwardModelError

log = logging.getLogger(__name__)


def _design_scalar(p):
    p = np.asarray(p, dtype=float)
    if p.size != 1:
        raise ValueError(f"expected a scalar design, got shape {p.shape}")
    return float(p.reshape(()))


def _check_finite(out):
    bad = ~np.all(np.isfinite(out), axis=1)
    if np.any(bad):
        raise ForwardModelError("forward model returned non-finite output", index=int(np.argmax(bad)))
    return out


class ForwardModel:
    """Base class; subclasses implement ``_batch``."""

    param_dim = 1
    design_dim = 1
    obs_dim = 1

    def _batch(self, U, p):
        raise NotImplementedError

    def evaluate_batch(self, U, p):
        U = np.asarray(U, dtype=float)
        if U.ndim == 1:
            U = U.reshape(-1, self.param_dim)
        if U.shape[1] != self.param_dim:
            raise ValueError(f"particles have dimension {U.shape[1]}, model expects {self.param_dim}")
        out = np.asarray(self._batch(U, p), dtype=float).reshape(U.shape[0], self.obs_dim)
        return _check_finite(out)

    def evaluate(self, u, p):
        u = np.atleast_1d(np.asarray(u, dtype=float)).reshape(1, self.param_dim)
        return self.evaluate_batch(u, p)[0]

    def jacobian_batch(self, U, p, rel_step=1e-6):
        """Central finite-difference Jacobians, shape ``(J, k, d)``."""
        U = np.asarray(U, dtype=float)
        J, d = U.shape
        steps = rel_step * np.maximum(1.0, np.abs(U))
        jac = np.empty((J, self.obs_dim, d))
        for i in range(d):
            e = np.zeros(d)
            e[i] = 1.0
            hi = steps[:, i:i + 1]
            plus = self.evaluate_batch(U + hi * e, p)
            minus = self.evaluate_batch(U - hi * e, p)
            jac[:, :, i] = (plus - minus) / (2.0 * hi)
        return jac


@dataclass(frozen=True)
class LinearModelConfig:
    c: float = 2.0
    d_shift: float = 3.0

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError("c must be positive")


@dataclass(frozen=True)
class NearLinearModelConfig:
    c: float = 2.0
    d_shift: float = 3.0
    tau: float = 1.0

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError("c must be positive")


def design_operator(c, d_shift, p):
    """A(p) = -c (p - 1)^2 + d_shift."""
    return -c * (p - 1.0) ** 2 + d_shift


def linear_eval(cfg, u, p):
    return design_operator(cfg.c, cfg.d_shift, p) * u


def near_linear_eval(cfg, u, p):
    return design_operator(cfg.c, cfg.d_shift, p) * u + cfg.tau * u * u


class LinearModel(ForwardModel):
    """Scalar linear model ``G(u, p) = A(p) u``."""

    def __init__(self, cfg=None):
        self.cfg = cfg or LinearModelConfig()

    def matrix(self, p):
        return np.array([[design_operator(self.cfg.c, self.cfg.d_shift, _design_scalar(p))]])

    def _batch(self, U, p):
        return linear_eval(self.cfg, U, _design_scalar(p))


class NearLinearModel(ForwardModel):
    """Scalar model ``G(u, p) = A(p) u + tau u^2``."""

    def __init__(self, cfg=None):
        self.cfg = cfg or NearLinearModelConfig()

    def _batch(self, U, p):
        return near_linear_eval(self.cfg, U, _design_scalar(p))


class MatrixLinearModel(ForwardModel):
    """General linear model ``G(u, p) = A(p) u + b(p)``.

    ``matrix`` is a fixed ``(k, d)`` array or a callable of the design;
    ``offset`` likewise (default zero).
    """

    def __init__(self, matrix, offset=None, design_dim=1):
        self._matrix = matrix
        self._offset = offset
        a = self.matrix(np.zeros(design_dim) if design_dim > 1 else 0.0)
        self.obs_dim, self.param_dim = a.shape
        self.design_dim = design_dim

    def matrix(self, p):
        a = self._matrix(p) if callable(self._matrix) else self._matrix
        return np.atleast_2d(np.asarray(a, dtype=float))

    def offset(self, p):
        if self._offset is None:
            return np.zeros(self.obs_dim)
        b = self._offset(p) if callable(self._offset) else self._offset
        return np.atleast_1d(np.asarray(b, dtype=float))

    def _batch(self, U, p):
        return U @ self.matrix(p).T + self.offset(p)


# --------------------------------------------------------------------------
# 1D heat equation, P1 finite elements, implicit midpoint in time


@dataclass(frozen=True)
class HeatModelConfig:
    """Heat-equation experiment settings.

    ``n_x`` counts grid nodes including both Dirichlet boundary nodes, so
    ``n_x = 2**m + 1`` puts every dyadic observation point on a node.
    ``sigma`` is the variance of the Gaussian source profile centred at 0.5.
    """

    n_x: int = 33
    dt: float = 0.005
    n_steps: int = 15
    obs_steps: tuple = (5, 10, 15)
    d: int = 8
    n_obs_level: int = 2
    diffusion_c: float = 0.5
    alpha: float = 10.0
    sigma: float = 0.1
    source_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "obs_steps", tuple(int(s) for s in self.obs_steps))
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.n_x < 3:
            raise ValueError("n_x must be at least 3")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if not all(1 <= s <= self.n_steps for s in self.obs_steps):
            raise ValueError("obs_steps must lie in 1..n_steps")
        if self.d < 1 or self.n_obs_level < 1:
            raise ValueError("d and n_obs_level must be >= 1")
        if not self.obs_dim < self.n_x:
            raise ValueError("observation count must be below n_x")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    @property
    def obs_dim(self):
        return 2 ** self.n_obs_level - 1

    @property
    def n_interior(self):
        return self.n_x - 2


_GAUSS_2PT = np.array([-1.0, 1.0]) / np.sqrt(3.0)


@dataclass
class P1Mesh:
    """Uniform P1 mesh on [0, 1] with 2-point Gauss quadrature per element."""

    n_x: int
    nodes: np.ndarray = field(init=False)
    h: float = field(init=False)
    xq: np.ndarray = field(init=False)
    load_matrix: np.ndarray = field(init=False)

    def __post_init__(self):
        self.nodes = np.linspace(0.0, 1.0, self.n_x)
        self.h = 1.0 / (self.n_x - 1)
        left = self.nodes[:-1]
        # (n_el, 2) quadrature points, flattened element-major
        self.xq = (left[:, None] + 0.5 * self.h * (1.0 + _GAUSS_2PT[None, :])).ravel()
        n_el, n = self.n_x - 1, self.n_x - 2
        # F_i = sum_q w_q f(x_q) phi_i(x_q), interior nodes only
        lam = 0.5 * (1.0 + _GAUSS_2PT)
        load = np.zeros((n, 2 * n_el))
        w = 0.5 * self.h
        for i in range(n):
            node = i + 1
            # element node-1 (phi rises) and element node (phi falls)
            load[i, 2 * (node - 1):2 * node] = w * lam
            load[i, 2 * node:2 * node + 2] = w * (1.0 - lam)
        self.load_matrix = load

    @property
    def n_interior(self):
        return self.n_x - 2

    def element_stiffness(self, kappa_q):
        """Per-element stiffness coefficients from κ at quadrature points."""
        kq = kappa_q.reshape(kappa_q.shape[0], self.n_x - 1, 2)
        return kq.sum(axis=2) / (2.0 * self.h)


def fem_heat_solve(mesh, kappa_q, source_q, dt, n_steps):
    """Implicit-midpoint P1 solve of ``y_t - (κ y_x)_x = f`` on (0, 1).

    Homogeneous Dirichlet boundaries and zero initial condition.

    Parameters
    ----------
    mesh : P1Mesh
    kappa_q : (B, n_q) array
        Diffusivity at quadrature points, one row per batch member.
    source_q : array or callable
        ``f`` at quadrature points, either fixed (``(n_q,)`` or ``(B, n_q)``)
        or a callable ``t -> array`` evaluated at half steps.
    dt : float
    n_steps : int

    Returns
    -------
    (B, n_steps, n_interior) array of nodal values after each step.
    """
    kappa_q = np.atleast_2d(np.asarray(kappa_q, dtype=float))
    batch, n, h = kappa_q.shape[0], mesh.n_interior, mesh.h
    ke = mesh.element_stiffness(kappa_q)  # (B, n_el)
    k_diag = ke[:, :-1] + ke[:, 1:]
    k_off = -ke[:, 1:-1]
    m_diag, m_off = 2.0 * h / 3.0, h / 6.0

    lhs_diag = (m_diag + 0.5 * dt * k_diag).ravel()
    rhs_diag = m_diag - 0.5 * dt * k_diag
    lhs_off = np.zeros((batch, n))
    lhs_off[:, :-1] = m_off + 0.5 * dt * k_off
    rhs_off = m_off - 0.5 * dt * k_off
    off = lhs_off.ravel()[:-1]
    dl, d, du, du2, ipiv, info = lapack.dgttrf(off.copy(), lhs_diag.copy(), off.copy())
    if info != 0:
        raise ForwardModelError(f"singular heat system (dgttrf info={info})")

    if callable(source_q):
        def load(t):
            return np.broadcast_to(np.asarray(source_q(t), dtype=float) @ mesh.load_matrix.T, (batch, n))
    else:
        fixed = np.broadcast_to(np.asarray(source_q, dtype=float) @ mesh.load_matrix.T, (batch, n))

        def load(t):
            return fixed

    y = np.zeros((batch, n))
    out = np.empty((batch, n_steps, n))
    for step in range(n_steps):
        rhs = rhs_diag * y
        rhs[:, :-1] += rhs_off * y[:, 1:]
        rhs[:, 1:] += rhs_off * y[:, :-1]
        rhs += dt * load((step + 0.5) * dt)
        sol, info = lapack.dgttrs(dl, d, du, du2, ipiv, rhs.ravel())
        if info != 0:
            raise ForwardModelError(f"heat solve failed (dgttrs info={info})")
        y = sol.reshape(batch, n)
        out[:, step] = y
    return out


def observation_points(n_obs_level):
    m = 2 ** n_obs_level
    return np.arange(1, m) / m


def _interp_interior(mesh, values, points):
    """Evaluate P1 functions (zero boundary values) at ``points``."""
    full = np.zeros(values.shape[:-1] + (mesh.n_x,))
    full[..., 1:-1] = values
    idx = np.clip(np.floor(points / mesh.h).astype(int), 0, mesh.n_x - 2)
    w = points / mesh.h - idx
    return (1.0 - w) * full[..., idx] + w * full[..., idx + 1]


class HeatModel:
    """Heat-equation solver plus observation operators for one configuration.

    The source depends on the design only through the amplitude
    ``exp(-alpha (p - 1)^2)`` and the PDE is linear in the source, so
    unit-amplitude trajectories are cached per particle matrix and scaled.
    """

    def __init__(self, cfg=None, cache_size=4):
        self.cfg = cfg or HeatModelConfig()
        self.mesh = P1Mesh(self.cfg.n_x)
        ell = np.arange(1, self.cfg.d + 1)
        self._basis_q = (
            self.cfg.diffusion_c / ell[None, :] ** 2 * np.cos(np.pi * ell[None, :] * self.mesh.xq[:, None])
        )
        s = self.cfg.sigma
        self._profile_q = np.exp(-0.5 * (self.mesh.xq - 0.5) ** 2 / s) / np.sqrt(2.0 * np.pi * s)
        self.points = observation_points(self.cfg.n_obs_level)
        self._cache = OrderedDict()
        self._cache_size = cache_size

    @property
    def param_dim(self):
        return self.cfg.d

    def amplitude(self, p):
        return self.cfg.source_scale * np.exp(-self.cfg.alpha * (_design_scalar(p) - 1.0) ** 2)

    def kappa_q(self, U):
        return np.exp(np.atleast_2d(U) @ self._basis_q.T)

    def _unit_trajectories(self, U):
        U = np.ascontiguousarray(np.atleast_2d(np.asarray(U, dtype=float)))
        key = hashlib.sha1(U.tobytes()).hexdigest() + str(U.shape)
        hit = self._cache.get(key)
        if hit is not None:
            self._cache.move_to_end(key)
            return hit
        if not np.all(np.isfinite(U)):
            raise ForwardModelError("non-finite parameter", index=int(np.argmax(~np.all(np.isfinite(U), axis=1))))
        kq = self.kappa_q(U)
        if not np.all(np.isfinite(kq)):
            raise ForwardModelError("diffusivity overflow", index=int(np.argmax(~np.all(np.isfinite(kq), axis=1))))
        traj = fem_heat_solve(self.mesh, kq, self._profile_q, self.cfg.dt, self.cfg.n_steps)
        traj.setflags(write=False)
        self._cache[key] = traj
        if len(self._cache) > self._cache_size:
            self._cache.popitem(last=False)
        return traj

    def solve(self, U, p):
        """Trajectories ``(J, n_steps, n_interior)``; a single ``u`` gives ``(n_steps, n_interior)``."""
        single = np.asarray(U).ndim == 1
        traj = self.amplitude(p) * self._unit_trajectories(U)
        return traj[0] if single else traj

    def observe(self, trajectory, step):
        return heat_observe(self.cfg, trajectory, step, mesh=self.mesh)

    def observed_at(self, step):
        return HeatObservation(self, step)

    def stacked(self):
        return HeatObservation(self, self.cfg.obs_steps)


class HeatObservation(ForwardModel):
    """``G_n = O_{t_n} ∘ solver``: pointwise observations at one or more steps."""

    design_dim = 1

    def __init__(self, heat, steps):
        self.heat = heat
        self.steps = (int(steps),) if np.ndim(steps) == 0 else tuple(int(s) for s in steps)
        for s in self.steps:
            if not 1 <= s <= heat.cfg.n_steps:
                raise ValueError(f"observation step {s} outside 1..{heat.cfg.n_steps}")
        self.param_dim = heat.cfg.d
        self.obs_dim = heat.cfg.obs_dim * len(self.steps)

    def _batch(self, U, p):
        traj = self.heat.solve(U, p)
        return np.concatenate([self.heat.observe(traj, s) for s in self.steps], axis=-1)


def heat_solve(cfg, u, p):
    return HeatModel(cfg).solve(np.asarray(u, dtype=float), p)


def heat_observe(cfg, trajectory, step, mesh=None):
    """Solution at time step ``step`` (1-based) at the dyadic points ``j / 2**n_obs_level``."""
    trajectory = np.asarray(trajectory, dtype=float)
    n_steps = trajectory.shape[-2]
    if not 1 <= step <= n_steps:
        raise IndexError(f"step {step} outside trajectory range 1..{n_steps}")
    mesh = mesh or P1Mesh(cfg.n_x)
    return _interp_interior(mesh, trajectory[..., step - 1, :], observation_points(cfg.n_obs_level))


def heat_noise_scale(cfg, model=None):
    """``0.1 * ||G(0.5 * 1_d, p=1)||_2`` with observations stacked over ``obs_steps``."""
    model = model or HeatModel(cfg)
    g = model.stacked().evaluate(0.5 * np.ones(cfg.d), 1.0)
    scale = 0.1 * float(np.linalg.norm(g))
    log.info("heat noise scale c = %.6e (from G(0.5*1_d, p=1))", scale)
    return scale
