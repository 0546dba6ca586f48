"""Sequential design loop: EKI design search, synthetic observation, ALDI update.

The ground truth ``u†`` lives only in :class:`SequentialState`; estimators
and the optimizer see :meth:`SequentialState.public_view`, which omits it.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .aldi import ParticleEnsemble, SequentialTarget, aldi_run, check_ensemble_size, conjugate_posterior
from .eig import EIGBounds, estimate_bounds, estimate_log_normalizer, noise_block, simulate_joint
from .eki import DesignEnsemble, EKIConfig, eki_optimize, uniform_design_ensemble
from .errors import SeqboedError, StageError
from .gaussian_core import Gaussian, sample_gaussian, substream

log = logging.getLogger(__name__)


@dataclass
class StepRecord:
    design: np.ndarray
    y: np.ndarray
    bounds: EIGBounds
    candidates: list
    eki_trace: object = None
    posterior_mean: np.ndarray | None = None
    posterior_cov: np.ndarray | None = None
    aldi_diagnostics: object = None


@dataclass(frozen=True)
class PublicState:
    """Everything an estimator may read: posterior particles, target, history."""

    step: int
    particles: np.ndarray
    target: SequentialTarget
    history: tuple


@dataclass
class SequentialState:
    step: int
    posterior_ensemble: ParticleEnsemble
    target: SequentialTarget
    history: list = field(default_factory=list)
    _truth: np.ndarray | None = field(default=None, repr=False)

    def public_view(self):
        return PublicState(self.step, self.posterior_ensemble.particles.copy(), self.target, tuple(self.history))


@dataclass
class SequentialSetup:
    """Resolved settings of a sequential run (built from the experiment config)."""

    prior: Gaussian
    noise: Gaussian
    models: list  # forward model for steps 1..N
    n_particles: int
    seed: int
    n_eki: int = 3
    design_box: tuple = (0.0, 2.0)
    eki: EKIConfig = field(default_factory=EKIConfig)
    aldi_dt: float = 0.01
    aldi_t_end: float = 10.0
    aldi_noise: str = "projected"
    delta: float = 0.1
    laplace: bool = True
    c_shift: float | str = 3.0  # a number, or "auto" for 1.5 x the initial maximum
    selection: str = "argmax"
    warm_start: bool = False
    truth: np.ndarray | None = None
    truth_seed: int | None = None
    normalizer_samples: int = 10_000

    @property
    def n_steps(self):
        return len(self.models)


def draw_truth(setup):
    if setup.truth is not None:
        u = np.atleast_1d(np.asarray(setup.truth, dtype=float))
        if u.size != setup.prior.dim:
            raise ValueError("ground truth has the wrong dimension")
        return u
    seed = setup.seed if setup.truth_seed is None else setup.truth_seed
    return sample_gaussian(setup.prior, 1, substream(seed, "truth"))[0]


def initial_state(setup):
    check_ensemble_size(setup.n_particles, setup.prior.dim)
    particles = sample_gaussian(setup.prior, setup.n_particles, substream(setup.seed, "prior-ensemble"))
    target = SequentialTarget(setup.prior, setup.noise)
    return SequentialState(0, ParticleEnsemble(particles), target, [], draw_truth(setup))


def make_eig_fn(view, model, noise, seed, step, with_lower=False, delta=0.1, laplace=True):
    """EIG estimator on the current posterior particles with common random numbers.

    Every call at the same ``(seed, step)`` reuses the same noise draws, so
    the estimate is a deterministic function of the design.
    """

    def eig_fn(p):
        js = simulate_joint(view.particles, model, p, noise, substream(seed, "crn", step),
                            target=view.target if with_lower else None)
        if with_lower:
            b = estimate_bounds(js, view.target, delta=delta, laplace=laplace)
        else:
            b = estimate_bounds(js, None, delta=delta, laplace=False)
        return b.upper, b

    return eig_fn


def select_design(state, model_n, candidates_final, eig_fn, rule="argmax"):
    """Design with the largest EIG estimate (ties: lowest index) or the ensemble mean.

    Returns ``(design, candidate_bounds)``.
    """
    designs = candidates_final.designs
    if designs.shape[0] == 0:
        raise ValueError("no candidate designs")
    results = [eig_fn(_scalar_or_vector(p)) for p in designs]
    values = np.array([r[0] for r in results])
    if rule == "mean":
        return candidates_final.mean(), [r[1] for r in results]
    if rule != "argmax":
        raise ValueError(f"unknown selection rule {rule!r}")
    return designs[int(np.argmax(values))].copy(), [r[1] for r in results]


def _scalar_or_vector(p):
    p = np.asarray(p, dtype=float)
    return float(p.ravel()[0]) if p.size == 1 else p


def observe(state, model_n, p, noise, rng):
    """Synthetic data ``y† = G_n(u†, p†) + η`` from the stored ground truth."""
    p = np.asarray(p, dtype=float)
    if not np.all(np.isfinite(p)):
        raise ValueError("design must be finite")
    g = model_n.evaluate(state._truth, _scalar_or_vector(p))
    nz = noise_block(noise, g.size)
    return g + sample_gaussian(nz, 1, rng)[0]


def _stage(step, name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (SeqboedError, ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
        raise StageError(step, name, exc) from exc


def _resolve_c_shift(setup, eig_fn, designs):
    if setup.c_shift != "auto":
        return float(setup.c_shift)
    top = max(eig_fn(_scalar_or_vector(p))[0] for p in designs)
    return max(1.5 * top, top + 1.0) if top > 0 else top + 1.0


def run_step(state, setup, timings=None):
    """Advance ``state`` by one design/observe/update cycle (in place)."""
    n = state.step + 1
    model = setup.models[n - 1]
    view = state.public_view()
    t0 = time.perf_counter()
    search_fn = make_eig_fn(view, model, setup.noise, setup.seed, n)
    if setup.warm_start and state.history:
        prev = state.history[-1].eki_trace.designs[-1]
        init = DesignEnsemble(prev)
    else:
        init = uniform_design_ensemble(setup.n_eki, *setup.design_box, substream(setup.seed, "eki-init", n))
    c_shift = _stage(n, "eig", _resolve_c_shift, setup, search_fn, init.designs)
    cfg = EKIConfig(**{**setup.eki.__dict__, "c_shift": c_shift})
    final, trace = _stage(n, "eki", eki_optimize, init, search_fn, cfg)

    bound_fn = make_eig_fn(view, model, setup.noise, setup.seed, n, with_lower=True,
                           delta=setup.delta, laplace=setup.laplace)
    design, cands = _stage(n, "select", select_design, state, model, final, bound_fn, setup.selection)
    y = _stage(n, "observe", observe, state, model, design, setup.noise, substream(setup.seed, "observe", n))
    chosen = bound_fn(_scalar_or_vector(design))[1]

    target = state.target.extend(y, _scalar_or_vector(design), model)
    ens = _stage(n, "aldi", aldi_run, state.posterior_ensemble, target, setup.aldi_t_end, setup.aldi_dt,
                 substream(setup.seed, "aldi", n), noise=setup.aldi_noise)
    logz = _stage(n, "normalizer", estimate_log_normalizer, ens.particles, target,
                  substream(setup.seed, "normalizer", n), setup.normalizer_samples)
    state.target = target.with_log_normalizer(logz)
    state.posterior_ensemble = ens
    state.history.append(StepRecord(np.atleast_1d(design), np.atleast_1d(y), chosen, cands, trace,
                                    ens.mean(), ens.covariance(), ens.diagnostics))
    state.step = n
    if timings is not None:
        timings.append(time.perf_counter() - t0)
    log.info("step %d: design %s, UB %.4f, LB %.4f", n, np.round(design, 6), chosen.upper, chosen.lower)
    return state


def run_sequential(setup, timings=None):
    """Run all ``setup.n_steps`` steps from a fresh prior ensemble."""
    state = initial_state(setup)
    for _ in range(setup.n_steps):
        run_step(state, setup, timings)
    return state


def filter_moments(prior, matrices, observations, noise_cov):
    """Exact Gaussian posteriors after each linear observation (conjugate recursion)."""
    out = []
    current = prior
    for a, y in zip(matrices, observations):
        current = conjugate_posterior(current, [a], [y], noise_cov)
        out.append(current)
    return out
