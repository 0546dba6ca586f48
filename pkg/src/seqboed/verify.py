"""Oracle checks: closed-form EIG, conjugate posteriors, manufactured FEM solutions, NMC.

Each ``check_*`` function runs one acceptance criterion at a chosen scale
and returns a :class:`CheckResult`; the acceptance tests call them at full
scale, ``seqboed verify`` at the scale of the given config.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .aldi import ParticleEnsemble, SequentialTarget, aldi_run, aldi_step, conjugate_posterior, prior_ensemble
from .eig import (
    eig_exact_linear,
    eig_lower_gaussian,
    eig_lower_laplace,
    eig_nested_mc,
    eig_upper_gaussian,
    simulate_joint,
)
from .eki import EKIConfig, eki_optimize, uniform_design_ensemble
from .errors import SeqboedError
from .experiments import kl_table
from .forward_models import (
    HeatModel,
    HeatModelConfig,
    LinearModel,
    MatrixLinearModel,
    NearLinearModel,
    NearLinearModelConfig,
    P1Mesh,
    fem_heat_solve,
    heat_noise_scale,
)
from .gaussian_core import Gaussian, sample_gaussian, substream
from .sequential import SequentialSetup, filter_moments, run_sequential

LINEAR_PRIOR = Gaussian(2.0, 2.0)
LINEAR_NOISE = Gaussian(0.0, 1.0)
P_GRID = (0.0, 0.5, 1.0, 1.5, 2.0)


@dataclass
class CheckResult:
    criterion: int
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0
    data: dict = field(default_factory=dict, repr=False)

    def line(self, status=None, timing=False):
        # timings are off by default so reports are reproducible
        status = status or ("PASS" if self.passed else "FAIL")
        out = f"[{status}] criterion {self.criterion}: {self.name}: {self.detail}"
        return out + f" ({self.seconds:.1f} s)" if timing else out


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        return res

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def bound_row(label, js, target, laplace=True):
    """Gaussian UB/LB (and Laplace LB) on one joint sample set, as a dict."""
    ub, se_ub = eig_upper_gaussian(js, return_se=True)
    lb, se_lb = eig_lower_gaussian(js, return_se=True)
    row = {"label": label, "ub": ub, "se_ub": se_ub, "lb_gauss": lb, "se_lb_gauss": se_lb,
           "lb_laplace": float("nan"), "se_lb_laplace": float("nan"), "fallback": 0}
    if laplace:
        row["lb_laplace"], row["se_lb_laplace"], row["fallback"] = eig_lower_laplace(js, target, return_se=True)
    return row


def linear_rows(J, seed, designs=P_GRID, prior=LINEAR_PRIOR, noise=LINEAR_NOISE, model=None, laplace=True):
    model = model or LinearModel()
    target = SequentialTarget(prior, noise)
    rows = []
    for p in designs:
        rng = substream(seed, "linear", p)
        js = simulate_joint(sample_gaussian(prior, J, rng), model, p, noise, rng, target=target)
        row = bound_row(f"linear p={p:g}", js, target, laplace)
        row["exact"] = eig_exact_linear(model.matrix(p), prior, noise.covariance)
        rows.append(row)
    return rows


def near_linear_rows(J, seed, taus=(1.5, 1.0, 0.5), designs=P_GRID, prior=LINEAR_PRIOR, noise=LINEAR_NOISE,
                     laplace=True):
    target = SequentialTarget(prior, noise)
    rows = []
    for tau in taus:
        model = NearLinearModel(NearLinearModelConfig(tau=tau))
        for p in designs:
            rng = substream(seed, "near-linear", tau, p)
            js = simulate_joint(sample_gaussian(prior, J, rng), model, p, noise, rng, target=target)
            row = bound_row(f"near-linear tau={tau:g} p={p:g}", js, target, laplace)
            row["tau"], row["p"] = tau, p
            rows.append(row)
    return rows


def _lower(row):
    """Best lower bound of a row and its SE."""
    if np.isfinite(row["lb_laplace"]) and row["lb_laplace"] > row["lb_gauss"]:
        return row["lb_laplace"], row["se_lb_laplace"]
    return row["lb_gauss"], row["se_lb_gauss"]


# --------------------------------------------------------------------------
# criteria


@_timed
def check_linear_tightness(J=100_000, seed=0, designs=(0.0, 1.0, 2.0), tol=0.05):
    rows = linear_rows(J, seed, designs, laplace=False)
    worst = max(max(abs(r["ub"] - r["exact"]), abs(r["lb_gauss"] - r["exact"])) for r in rows)
    parts = ", ".join(f"p={p:g}: UB {r['ub']:.4f} LB {r['lb_gauss']:.4f} exact {r['exact']:.4f}"
                      for p, r in zip(designs, rows))
    return CheckResult(1, "linear EIG tightness", worst <= tol, f"max |bound - exact| {worst:.4f} <= {tol}; {parts}",
                       data={"rows": rows})


@_timed
def check_kl_rate(J_grid=(100, 1_000, 10_000, 100_000), replicates=10, seed=0, band=(-1.3, -0.6)):
    _, _, _, _, slopes = kl_table(LINEAR_PRIOR, LINEAR_NOISE, LinearModel(), 1.0, J_grid, replicates, seed)
    ok = all(band[0] <= s <= band[1] for s in slopes.values())
    detail = ", ".join(f"{k} {v:.3f}" for k, v in slopes.items())
    return CheckResult(2, "KL convergence slope", ok, f"slopes in [{band[0]}, {band[1]}]: {detail}",
                       data={"slopes": slopes})


@_timed
def check_aldi_conjugate(J=1000, seeds=range(5), t_end=10.0, dt=0.01, y=3.0, p=1.0, need=4):
    model = LinearModel()
    target = SequentialTarget(LINEAR_PRIOR, LINEAR_NOISE).extend([y], p, model)
    exact = conjugate_posterior(LINEAR_PRIOR, [model.matrix(p)], [[y]], LINEAR_NOISE.covariance)
    m_ex, v_ex = float(exact.mean[0]), float(exact.covariance[0, 0])
    passes, parts = 0, []
    for s in seeds:
        rng = substream(s, "aldi-conjugate")
        ens = aldi_run(prior_ensemble(LINEAR_PRIOR, J, rng), target, t_end, dt, rng)
        m, v = float(ens.mean()[0]), float(ens.covariance()[0, 0])
        ok = abs(m - m_ex) <= 0.05 * abs(m_ex) and abs(v - v_ex) <= 0.10 * v_ex
        passes += ok
        parts.append(f"{m:.4f}/{v:.4f}")
    seeds = list(seeds)
    return CheckResult(3, "ALDI conjugate moments", passes >= min(need, len(seeds)),
                       f"{passes}/{len(seeds)} seeds within 5%/10% of {m_ex:.4f}/{v_ex:.5f}; mean/var {', '.join(parts)}")


def _affine_pair(seed, d=2, k=3):
    rng = substream(seed, "affine-setup")
    a = rng.standard_normal((k, d))
    prior = Gaussian(rng.standard_normal(d), np.eye(d) + 0.5 * np.diag(rng.random(d)))
    noise = Gaussian(np.zeros(k), 0.5 * np.eye(k))
    m = rng.standard_normal((d, d)) + 2.0 * np.eye(d)
    b = rng.standard_normal(d)
    m_inv = np.linalg.inv(m)
    y = rng.standard_normal(k)
    base = SequentialTarget(prior, noise).extend(y, 0.0, MatrixLinearModel(a))
    moved_prior = Gaussian(m @ prior.mean + b, m @ prior.covariance @ m.T)
    moved = SequentialTarget(moved_prior, noise).extend(y, 0.0, MatrixLinearModel(a @ m_inv, -a @ m_inv @ b))
    return base, moved, prior, m, b


@_timed
def check_aldi_equivariance(steps=1000, J=20, dt=0.01, seed=0, tol=1e-8):
    """Run ALDI on a target and on its affine image with shared noise draws."""
    base, moved, prior, m, b = _affine_pair(seed)
    U = sample_gaussian(prior, J, substream(seed, "affine-init"))
    ens_u, ens_v = ParticleEnsemble(U), ParticleEnsemble(U @ m.T + b)
    rng_u, rng_v = substream(seed, "affine-noise"), substream(seed, "affine-noise")
    worst = 0.0
    for _ in range(steps):
        ens_u = aldi_step(ens_u, base, dt, rng_u, noise="full")
        ens_v = aldi_step(ens_v, moved, dt, rng_v, noise="full")
        diff = ens_u.particles @ m.T + b - ens_v.particles
        worst = max(worst, float(np.max(np.abs(diff))))
    return CheckResult(4, "ALDI affine equivariance", worst <= tol,
                       f"max trajectory discrepancy {worst:.2e} over {steps} steps (tol {tol:g})")


def linear_eki_run(t_end=1e3, seed=0, J_eig=10_000, J=3, box=(0.0, 2.0)):
    model = LinearModel()
    U = sample_gaussian(LINEAR_PRIOR, J_eig, substream(seed, "eki-prior"))

    def eig_fn(p):
        return eig_upper_gaussian(simulate_joint(U, model, p, LINEAR_NOISE, substream(seed, "crn", 0)))

    init = uniform_design_ensemble(J, *box, substream(seed, "eki-init", 0))
    return eki_optimize(init, eig_fn, EKIConfig(t_end=t_end))


@_timed
def check_eki_recovery(t_end=1e3, seed=0, J_eig=10_000, tol=0.05, max_slope=-0.5, t_tail=10.0):
    final, trace = linear_eki_run(t_end, seed, J_eig)
    grid = np.arange(0.0, 2.0 + 5e-4, 1e-3)
    vals = [eig_exact_linear(LinearModel().matrix(p), LINEAR_PRIOR, 1.0) for p in grid]
    p_star = float(grid[int(np.argmax(vals))])
    err = abs(float(final.mean()[0]) - p_star)
    slope = trace.tail_slope(t_tail)
    ok = err <= tol and slope <= max_slope
    return CheckResult(5, "EKI optimum recovery", ok,
                       f"T={t_end:g}: |mean - {p_star:g}| = {err:.4f} (tol {tol}), V_e tail slope {slope:.3f} "
                       f"(<= {max_slope}), final designs {np.round(final.designs.ravel(), 4).tolist()}",
                       data={"trace": trace, "final": final})


@_timed
def check_ordering(rows, slack=3.0):
    """UB ≥ LB − slack·combined SE on every row (rows from the sweeps and heat candidates)."""
    bad = []
    for r in rows:
        lb, se_lb = _lower(r)
        if r["ub"] < lb - slack * math.hypot(se_lb, r["se_ub"]):
            bad.append(r["label"])
    return CheckResult(6, "bound ordering", not bad,
                       f"{len(bad)} violations over {len(rows)} designs" + (f": {bad}" if bad else ""))


@_timed
def check_laplace_improvement(J=10_000, seed=0, tau=1.0, designs=P_GRID, need=3):
    rows = near_linear_rows(J, seed, (tau,), designs)
    never_worse = all(r["lb_laplace"] >= r["lb_gauss"] - 3.0 * r["se_lb_laplace"] for r in rows)
    better = sum(r["lb_laplace"] > r["lb_gauss"] for r in rows)
    parts = ", ".join(f"p={r['p']:g}: {r['lb_laplace']:.4f} vs {r['lb_gauss']:.4f}" for r in rows)
    return CheckResult(7, "Laplace improvement", never_worse and better >= need,
                       f"strictly better at {better}/{len(rows)} (need {need}), none worse by 3 SE: {never_worse}; {parts}")


@_timed
def check_near_linear_continuity(J=100_000, seed=0, taus=(1.5, 1.0, 0.5, 0.1), p=1.0):
    exact = eig_exact_linear(LinearModel().matrix(p), LINEAR_PRIOR, 1.0)
    gaps, ses = [], []
    for tau in taus:
        rng = substream(seed, "continuity", tau)
        model = NearLinearModel(NearLinearModelConfig(tau=tau))
        js = simulate_joint(sample_gaussian(LINEAR_PRIOR, J, rng), model, p, LINEAR_NOISE, rng)
        ub, se = eig_upper_gaussian(js, return_se=True)
        gaps.append(abs(ub - exact))
        ses.append(se)
    ok = all(gaps[i + 1] <= gaps[i] + 3.0 * math.hypot(ses[i], ses[i + 1]) for i in range(len(taus) - 1))
    detail = ", ".join(f"tau={t:g}: {g:.4f}" for t, g in zip(taus, gaps))
    return CheckResult(8, "near-linear continuity", ok, f"|UB - EIG_linear| at p={p:g}: {detail}")


def manufactured_error(n_x, dt=1e-4, t_end=0.1):
    """L² error at ``t_end`` for ``y = sin(πx) sin(πt/2)`` with ``κ = 1 + x/2``.

    The source ``f = y_t − (κ y_x)_x`` is evaluated at quadrature points;
    the error integral uses 5-point Gauss per element.
    """
    mesh = P1Mesh(n_x)
    kq = 1.0 + 0.5 * mesh.xq
    pi = math.pi

    def exact(x, t):
        return np.sin(pi * x) * math.sin(0.5 * pi * t)

    def source(t):
        x = mesh.xq
        st, ct = math.sin(0.5 * pi * t), math.cos(0.5 * pi * t)
        y_t = np.sin(pi * x) * 0.5 * pi * ct
        # -(κ y_x)_x with κ' = 1/2
        flux = -(0.5 * pi * np.cos(pi * x) - (1.0 + 0.5 * x) * pi**2 * np.sin(pi * x)) * st
        return y_t + flux

    n_steps = int(round(t_end / dt))
    sol = fem_heat_solve(mesh, kq[None, :], source, dt, n_steps)[0, -1]
    full = np.concatenate([[0.0], sol, [0.0]])
    g, w = np.polynomial.legendre.leggauss(5)
    left = mesh.nodes[:-1]
    lam = 0.5 * (1.0 + g)
    x = left[:, None] + mesh.h * lam[None, :]
    uh = full[:-1, None] * (1.0 - lam) + full[1:, None] * lam
    err2 = np.sum((uh - exact(x, n_steps * dt)) ** 2 * (0.5 * mesh.h * w))
    return math.sqrt(err2)


def _l2_on_fine(coarse_vals, coarse_nx, fine_nx):
    """Interpolate interior P1 values from a nested coarse grid onto the fine nodes."""
    xc = np.linspace(0.0, 1.0, coarse_nx)
    xf = np.linspace(0.0, 1.0, fine_nx)
    full = np.concatenate([np.zeros(coarse_vals.shape[:-1] + (1,)), coarse_vals,
                           np.zeros(coarse_vals.shape[:-1] + (1,))], axis=-1)
    return np.stack([np.interp(xf, xc, row) for row in full.reshape(-1, coarse_nx)]).reshape(
        coarse_vals.shape[:-1] + (fine_nx,))


@_timed
def check_fem(grids=(9, 17, 33, 65), slope_band=(1.7, 2.3), rel_tol=0.01):
    errs = [manufactured_error(n) for n in grids]
    h = [1.0 / (n - 1) for n in grids]
    slope = float(np.polyfit(np.log(h), np.log(errs), 1)[0])
    cfg = HeatModelConfig()
    u = 2.0 * np.ones(cfg.d)
    coarse = HeatModel(cfg).solve(u, 1.0)
    fine_cfg = HeatModelConfig(n_x=257, dt=cfg.dt / 8, n_steps=cfg.n_steps * 8, obs_steps=(8,))
    fine = HeatModel(fine_cfg).solve(u, 1.0)[7::8]
    full_fine = np.concatenate([np.zeros((fine.shape[0], 1)), fine, np.zeros((fine.shape[0], 1))], axis=1)
    diff = _l2_on_fine(coarse, cfg.n_x, 257) - full_fine
    rel = float(np.linalg.norm(diff) / np.linalg.norm(full_fine))
    ok = slope_band[0] <= slope <= slope_band[1] and rel <= rel_tol
    return CheckResult(9, "FEM validation", ok,
                       f"manufactured L2 slope {slope:.3f} (errors {', '.join(f'{e:.2e}' for e in errs)}), "
                       f"relative L2 vs n_x=257 dt/8 reference {rel:.2e} (tol {rel_tol:g})")


def heat_setup(J=1000, seed=0, t_end_eki=1e2, steps=3):
    cfg = HeatModelConfig()
    heat = HeatModel(cfg)
    noise = Gaussian(0.0, heat_noise_scale(cfg, heat))
    prior = Gaussian(2.0 * np.ones(cfg.d), 0.5 * np.eye(cfg.d))
    models = [heat.observed_at(s) for s in cfg.obs_steps[:steps]]
    return SequentialSetup(prior, noise, models, J, seed=seed, eki=EKIConfig(t_end=t_end_eki), c_shift="auto")


def candidate_rows(state):
    rows = []
    for n, rec in enumerate(state.history, start=1):
        for i, b in enumerate(rec.candidates):
            rows.append({"label": f"heat n={n} member={i + 1}", "ub": b.upper, "se_ub": b.se_upper,
                         "lb_gauss": b.lb_gauss, "se_lb_gauss": b.se_lb_gauss, "lb_laplace": b.lb_laplace,
                         "se_lb_laplace": b.se_lb_laplace, "fallback": b.laplace_fallback_count})
    return rows


@_timed
def check_sequential_heat(state, wall_time, limit=1800.0):
    rows = candidate_rows(state)
    bad = check_ordering(rows)
    ok = len(state.history) == 3 and wall_time < limit and bad.passed
    return CheckResult(10, "heat sequential run", ok,
                       f"{len(state.history)} steps in {wall_time:.0f} s (< {limit:.0f}); ordering: {bad.detail}")


@_timed
def check_sequential_linear(J=1000, seed=0, steps=3, t_end_eki=1e2):
    model = LinearModel()
    setup = SequentialSetup(LINEAR_PRIOR, LINEAR_NOISE, [model] * steps, J, seed=seed,
                            eki=EKIConfig(t_end=t_end_eki))
    state = run_sequential(setup)
    mats = [model.matrix(rec.design[0]) for rec in state.history]
    ref = filter_moments(LINEAR_PRIOR, mats, [rec.y for rec in state.history], LINEAR_NOISE.covariance)
    ok, parts = True, []
    for rec, g in zip(state.history, ref):
        m, v = float(rec.posterior_mean[0]), float(rec.posterior_cov[0, 0])
        m_ex, v_ex = float(g.mean[0]), float(g.covariance[0, 0])
        ok &= abs(m - m_ex) <= 0.05 * abs(m_ex) and abs(v - v_ex) <= 0.10 * v_ex
        parts.append(f"{m:.4f}/{v:.5f} vs {m_ex:.4f}/{v_ex:.5f}")
    return CheckResult(10, "linear sequential vs exact filter", ok, "; ".join(parts))


@_timed
def check_nmc(n=10_000, J=100_000, seed=0, p=1.0):
    model = LinearModel()
    nmc, se_nmc = eig_nested_mc(LINEAR_PRIOR, model, p, LINEAR_NOISE, n, n, substream(seed, "nmc"), return_se=True)
    rng = substream(seed, "nmc-ub")
    js = simulate_joint(sample_gaussian(LINEAR_PRIOR, J, rng), model, p, LINEAR_NOISE, rng)
    ub, se_ub = eig_upper_gaussian(js, return_se=True)
    se = math.hypot(se_nmc, se_ub)
    return CheckResult(11, "NMC cross-check", abs(nmc - ub) <= 3.0 * se,
                       f"NMC {nmc:.4f} +/- {se_nmc:.4f}, UB {ub:.4f} +/- {se_ub:.4f}, |diff| {abs(nmc - ub):.4f} "
                       f"<= 3 SE {3 * se:.4f}")


# --------------------------------------------------------------------------
# config-driven suite


SMALL_J = 1000


def _guarded(criterion, name, thunk):
    """Run one check; an exception becomes a failed result instead of aborting the suite."""
    t0 = time.perf_counter()
    try:
        return thunk()
    except (SeqboedError, ArithmeticError, ValueError) as exc:
        return CheckResult(criterion, name, False, f"error: {type(exc).__name__}: {exc}",
                           time.perf_counter() - t0)


def verify_suite(cfg, include_heat=False):
    """Run every check at the scale of a resolved config; returns ``(results, small)``.

    ``small`` is true when the sample sizes are too small for the stated
    tolerances; failures are then expected and reported as warnings.
    """
    seed = int(cfg["seeds"]["master"])
    J = int(cfg.get("eig", {}).get("J", 10_000))
    J_aldi = int(cfg.get("sampler", {}).get("J", 1000))
    t_eki = float(cfg.get("eki", {}).get("t_end", 1e3))
    small = J < SMALL_J or J_aldi < SMALL_J
    grid = [j for j in (100, 1_000, 10_000, 100_000) if j <= J]
    if len(grid) < 2:
        grid = [max(2, J // 10), J]
    heat = {}

    def ordering():
        rows = linear_rows(J, seed, laplace=False) + near_linear_rows(J, seed)
        if "state" in heat:
            rows += candidate_rows(heat["state"])
        return check_ordering(rows)

    def heat_run():
        t0 = time.perf_counter()
        heat["state"] = run_sequential(heat_setup(J_aldi, seed))
        heat["time"] = time.perf_counter() - t0

    checks = [
        (1, "linear EIG tightness", lambda: check_linear_tightness(J, seed)),
        (2, "KL convergence slope", lambda: check_kl_rate(grid, seed=seed)),
        (3, "ALDI conjugate moments", lambda: check_aldi_conjugate(J_aldi)),
        (4, "ALDI affine equivariance", lambda: check_aldi_equivariance(seed=seed)),
        (5, "EKI optimum recovery", lambda: check_eki_recovery(t_eki, seed, J_eig=J)),
        (6, "bound ordering", ordering),
        (7, "Laplace improvement", lambda: check_laplace_improvement(J, seed)),
        (8, "near-linear continuity", lambda: check_near_linear_continuity(J, seed)),
        (9, "FEM validation", check_fem),
        (10, "linear sequential vs exact filter", lambda: check_sequential_linear(J_aldi, seed)),
        (11, "NMC cross-check", lambda: check_nmc(min(J, 10_000), J, seed)),
    ]
    if include_heat:
        try:
            heat_run()
        except (SeqboedError, ArithmeticError, ValueError) as exc:
            heat["error"] = exc
        checks.insert(9, (10, "heat sequential run", lambda: (
            check_sequential_heat(heat["state"], heat["time"]) if "state" in heat else _raise(heat["error"]))))
    return [_guarded(c, n, f) for c, n, f in checks], small


def _raise(exc):
    raise exc


def report(results, small, J=None):
    """Report lines and the exit status (0 ok or small-sample warnings, 1 failures)."""
    lines = []
    for r in results:
        if r.passed:
            lines.append(r.line())
        elif small:
            lines.append(r.line("WARN") + f" [expected at small sample size J={J}]")
        else:
            lines.append(r.line())
    failed = sum(not r.passed for r in results)
    if failed == 0:
        lines.append(f"verify: all {len(results)} checks passed")
        return lines, 0
    if small:
        lines.append(f"verify: WARN, {failed} of {len(results)} checks outside tolerance at small sample size")
        return lines, 0
    lines.append(f"verify: FAIL, {failed} of {len(results)} checks failed")
    return lines, 1
