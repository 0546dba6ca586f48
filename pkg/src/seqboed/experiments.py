"""Experiment runners behind the CLI; each writes versioned CSV artifacts."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import platform
import time

import numpy as np
import scipy

from . import __version__
from .aldi import SequentialTarget, conjugate_posterior
from .eig import (
    eig_exact_linear,
    eig_lower_gaussian,
    eig_lower_laplace,
    eig_upper_gaussian,
    simulate_joint,
)
from .eki import EKIConfig, eki_optimize, uniform_design_ensemble
from .errors import ValidationError
from .forward_models import (
    HeatModel,
    HeatModelConfig,
    LinearModel,
    LinearModelConfig,
    NearLinearModel,
    NearLinearModelConfig,
    heat_noise_scale,
)
from .gaussian_core import Gaussian, condition_gaussian, empirical_moments, kl_gaussian, sample_gaussian, substream
from .sequential import SequentialSetup, run_sequential

SCHEMA = "seqboed-csv-v1"


# --------------------------------------------------------------------------
# output


def fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path, kind, header, rows):
    """CSV with a ``# seqboed-csv-v1 <kind>`` first line; returns the row count."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    count = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# {SCHEMA} {kind}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])
            count += 1
    return count


def read_csv(path):
    """Schema kind plus rows as dicts of floats (non-numeric cells kept as text)."""
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().strip()
        if not first.startswith(f"# {SCHEMA} "):
            raise ValueError(f"{path}: missing schema line")
        rows = []
        for rec in csv.DictReader(fh):
            out = {}
            for k, v in rec.items():
                try:
                    out[k] = float(v)
                except ValueError:
                    out[k] = v
            rows.append(out)
    return first.split()[-1], rows


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


class Artifacts:
    def __init__(self, out_dir):
        self.out_dir = out_dir
        self.files = []

    def csv(self, name, kind, header, rows):
        path = os.path.join(self.out_dir, name)
        n = write_csv(path, kind, header, rows)
        self.files.append({"file": name, "kind": kind, "rows": n, "sha256": _sha256(path)})
        return path

    def manifest(self, cfg, summary, wall_time, extra=None):
        data = {
            "schema": SCHEMA,
            "experiment": cfg["experiment"]["kind"],
            "config": cfg,
            "seeds": cfg["seeds"],
            "versions": {
                "seqboed": __version__,
                "python": platform.python_version(),
                "numpy": np.__version__,
                "scipy": scipy.__version__,
            },
            "wall_time_s": wall_time,
            "artifacts": self.files,
            "summary": summary,
        }
        if extra:
            data.update(extra)
        path = os.path.join(self.out_dir, "manifest.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(data, fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")
        return path


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


# --------------------------------------------------------------------------
# builders


def build_model(model_cfg, tau=None):
    kind = model_cfg["kind"]
    if kind == "linear":
        return LinearModel(LinearModelConfig(model_cfg.get("c", 2.0), model_cfg.get("d_shift", 3.0)))
    if kind == "near_linear":
        t = model_cfg.get("tau", 1.0) if tau is None else tau
        return NearLinearModel(NearLinearModelConfig(model_cfg.get("c", 2.0), model_cfg.get("d_shift", 3.0), t))
    fields = {k: v for k, v in model_cfg.items() if k != "kind"}
    if "obs_steps" in fields:
        fields["obs_steps"] = tuple(fields["obs_steps"])
    try:
        return HeatModel(HeatModelConfig(**fields))
    except TypeError as exc:
        raise ValidationError("model", str(exc)) from None
    except ValueError as exc:
        raise ValidationError("model", str(exc)) from None


def param_dim(model):
    return model.cfg.d if isinstance(model, HeatModel) else 1


def build_prior(prior_cfg, d):
    mean = np.asarray(prior_cfg["mean"], dtype=float)
    mean = np.full(d, float(mean)) if mean.ndim == 0 else mean.ravel()
    cov = np.asarray(prior_cfg["covariance"], dtype=float)
    if cov.ndim == 0:
        cov = float(cov) * np.eye(d)
    elif cov.ndim == 1:
        cov = np.diag(cov)
    if mean.size != d or cov.shape != (d, d):
        raise ValidationError("prior", f"expected dimension {d}, got mean {mean.size} and covariance {cov.shape}")
    try:
        g = Gaussian(mean, cov)
        g.chol
    except (ValueError, ArithmeticError) as exc:
        raise ValidationError("prior.covariance", str(exc)) from None
    return g


def build_noise(noise_cfg, model):
    value = noise_cfg["covariance"]
    if value == "heat_default":
        if not isinstance(model, HeatModel):
            raise ValidationError("noise.covariance", "'heat_default' needs the heat model")
        return Gaussian(0.0, heat_noise_scale(model.cfg, model))
    cov = np.asarray(value, dtype=float)
    if cov.ndim == 0:
        return Gaussian(0.0, float(cov))
    return Gaussian(np.zeros(cov.shape[0]), cov)


def _observation_model(model, step_index=0):
    if isinstance(model, HeatModel):
        return model.observed_at(model.cfg.obs_steps[step_index])
    return model


def eki_config(cfg, c_shift=None):
    e = cfg["eki"]
    return EKIConfig(
        alpha=float(e["alpha"]), c_p=e["c_p"], rho=e["rho"], rho_scale=float(e["rho_scale"]),
        rho_gamma=float(e["rho_gamma"]), rho_horizon=float(e["rho_horizon"]), rho_max=float(e["rho_max"]),
        c_shift=float(e["c_shift"] if c_shift is None else c_shift), t_end=float(e["t_end"]),
        rtol=float(e["rtol"]), atol=float(e["atol"]),
    )


# --------------------------------------------------------------------------
# experiments


def kl_table(prior, noise, model, p, J_grid, replicates, seed, percentiles=(10, 50, 90)):
    """KL(truth ‖ empirical Gaussian fit) for the y-marginal and percentile posteriors.

    Returns ``(names, rows, grid, mean_table, slopes)`` where each row is
    ``(J, replicate, kl_marginal, kl_posterior_q...)`` and ``slopes`` are the
    log-log slopes of the replicate means against ``J``.
    """
    a = model.matrix(p)
    truth_y = Gaussian(a @ prior.mean, a @ prior.covariance @ a.T + noise.covariance)
    qs = [float(q) for q in percentiles]
    rows, means = [], {}
    for J in [int(j) for j in J_grid]:
        for r in range(int(replicates)):
            rng = substream(seed, "kl", J, r)
            js = simulate_joint(sample_gaussian(prior, J, rng), model, p, noise, rng)
            m = empirical_moments(js.samples_u, js.samples_y)
            kls = [kl_gaussian(truth_y, m.marginal_y())]
            # conditioning values are percentiles of the simulated y sample
            for yq in np.percentile(js.samples_y[:, 0], qs):
                exact = conjugate_posterior(prior, [a], [[yq]], noise.covariance)
                kls.append(kl_gaussian(exact, condition_gaussian(m, [yq])))
            rows.append([J, r, *kls])
            means.setdefault(J, []).append(kls)
    names = ["kl_marginal"] + [f"kl_posterior_p{q:g}" for q in qs]
    grid = sorted(means)
    avg = np.array([np.mean(means[j], axis=0) for j in grid])
    slopes = {}
    for i, n in enumerate(names):
        slopes[n] = float(np.polyfit(np.log(grid), np.log(avg[:, i]), 1)[0]) if len(grid) > 1 else float("nan")
    return names, rows, grid, avg, slopes


def run_kl_convergence(cfg, art):
    model = build_model(cfg["model"])
    if not isinstance(model, LinearModel):
        raise ValidationError("model.kind", "kl_convergence needs the linear model (exact truth)")
    prior = build_prior(cfg["prior"], 1)
    noise = build_noise(cfg["noise"], model)
    k = cfg["kl"]
    names, rows, grid, avg, slopes = kl_table(prior, noise, model, float(k["p"]), k["J_grid"], k["replicates"],
                                              cfg["seeds"]["master"], k["percentiles"])
    art.csv("kl_convergence.csv", "kl_convergence", ["J", "replicate", *names], rows)
    art.csv("kl_convergence_mean.csv", "kl_convergence_mean", ["J", *names], [[j, *a] for j, a in zip(grid, avg)])
    return {"slopes": slopes}


def sweep_rows(cfg, taus=None):
    """Rows ``(tau, p, J, lb_gauss, lb_laplace, ub, se_lb, se_lb_laplace, se_ub, fallback, exact)``."""
    seed = cfg["seeds"]["master"]
    base = build_model(cfg["model"])
    d = param_dim(base)
    prior = build_prior(cfg["prior"], d)
    noise = build_noise(cfg["noise"], base)
    target = SequentialTarget(prior, noise)
    J = int(cfg["eig"]["J"])
    folds = int(cfg["eig"]["folds"])
    if taus is None:
        taus = cfg["eig"].get("taus") if cfg["model"]["kind"] == "near_linear" else None
        taus = taus or [cfg["model"].get("tau", 0.0) if cfg["model"]["kind"] == "near_linear" else 0.0]
    rows = []
    for tau in taus:
        model = _observation_model(build_model(cfg["model"], tau=tau))
        for p in [float(x) for x in cfg["eig"]["p_grid"]]:
            rng = substream(seed, "sweep", tau, p)
            js = simulate_joint(sample_gaussian(prior, J, rng), model, p, noise, rng, target=target)
            ub, se_ub = eig_upper_gaussian(js, return_se=True, folds=folds)
            lb, se_lb = eig_lower_gaussian(js, return_se=True, folds=folds)
            lbl, se_lbl, fb = (float("nan"), float("nan"), 0)
            if cfg["eig"]["laplace"]:
                lbl, se_lbl, fb = eig_lower_laplace(js, target, return_se=True, folds=folds)
            exact = float("nan")
            if isinstance(model, LinearModel):
                exact = eig_exact_linear(model.matrix(p), prior, noise.covariance)
            rows.append([float(tau), p, J, lb, lbl, ub, se_lb, se_lbl, se_ub, fb, exact])
    return rows


SWEEP_HEADER = ["tau", "p", "J", "lb_gauss", "lb_laplace", "ub", "se_lb", "se_lb_laplace", "se_ub",
                "laplace_fallback_count", "eig_exact"]


def run_eig_sweep(cfg, art):
    rows = sweep_rows(cfg)
    art.csv("eig_sweep.csv", "eig_sweep", SWEEP_HEADER, rows)
    violations = 0
    for r in rows:
        # best lower bound of the row with its standard error
        lb, se = (r[4], r[7]) if math.isfinite(r[4]) and r[4] > r[3] else (r[3], r[6])
        violations += r[5] < lb - 3.0 * math.hypot(se, r[8])
    return {"points": len(rows), "ordering_violations": violations}


def eki_rows(trace):
    J = trace.designs[0].shape[0]
    dim = trace.designs[0].shape[1]
    header = ["t"] + [f"p{i + 1}" if dim == 1 else f"p{i + 1}_{k + 1}" for i in range(J) for k in range(dim)]
    header += [f"loss{i + 1}" for i in range(J)] + ["V_e", "rho_t"]
    rows = [[t, *p, *f, v, r] for t, p, f, v, r in trace.rows()]
    return header, rows


def run_eki_optimize(cfg, art):
    seed = cfg["seeds"]["master"]
    model = _observation_model(build_model(cfg["model"]))
    d = model.param_dim
    prior = build_prior(cfg["prior"], d)
    noise = build_noise(cfg["noise"], model)
    U = sample_gaussian(prior, int(cfg["eig"]["J"]), substream(seed, "eki-prior"))
    folds = int(cfg["eig"]["folds"])

    def eig_fn(p):
        js = simulate_joint(U, model, p, noise, substream(seed, "crn", 0))
        return eig_upper_gaussian(js, folds=folds)

    init = uniform_design_ensemble(int(cfg["eki"]["J"]), *cfg["eki"]["box"], substream(seed, "eki-init", 0))
    final, trace = eki_optimize(init, eig_fn, eki_config(cfg))
    header, rows = eki_rows(trace)
    art.csv("eki_trace.csv", "eki_trace", header, rows)
    summary = {
        "initial_designs": init.designs.ravel().tolist(),
        "final_designs": final.designs.ravel().tolist(),
        "final_mean": final.mean().tolist(),
        "V_e_tail_slope": trace.tail_slope(10.0),
        "eig_evaluations": trace.evaluations,
    }
    if isinstance(model, LinearModel):
        lo, hi = cfg["eki"]["box"]
        grid = np.arange(lo, hi + 5e-4, 1e-3)
        vals = [eig_exact_linear(model.matrix(p), prior, noise.covariance) for p in grid]
        summary["grid_optimum"] = float(grid[int(np.argmax(vals))])
    return summary


def sequential_setup(cfg):
    base = build_model(cfg["model"])
    steps = int(cfg["sequential"]["steps"])
    if isinstance(base, HeatModel):
        if steps > len(base.cfg.obs_steps):
            raise ValidationError("sequential.steps", f"heat model observes only {len(base.cfg.obs_steps)} times")
        models = [base.observed_at(s) for s in base.cfg.obs_steps[:steps]]
    else:
        models = [base] * steps
    d = param_dim(base)
    prior = build_prior(cfg["prior"], d)
    noise = build_noise(cfg["noise"], base)
    s = cfg["sampler"]
    e = cfg["eki"]
    truth = cfg["sequential"].get("truth")
    return SequentialSetup(
        prior=prior, noise=noise, models=models, n_particles=int(s["J"]), seed=int(cfg["seeds"]["master"]),
        n_eki=int(e["J"]), design_box=tuple(e["box"]), eki=eki_config(cfg, c_shift=0.0),
        aldi_dt=float(s["dt"]), aldi_t_end=float(s["t_end"]), aldi_noise=s["noise"],
        delta=float(cfg["eig"]["delta"]), laplace=bool(cfg["eig"]["laplace"]), c_shift=e["c_shift"],
        selection=e["selection"], warm_start=bool(e["warm_start"]),
        truth=None if truth is None else np.asarray(truth, dtype=float),
        truth_seed=cfg["seeds"].get("ground_truth"),
        normalizer_samples=int(cfg["sequential"]["normalizer_samples"]),
    )


def sequential_tables(state):
    """(header, rows) for the step, candidate, EKI-trace and ALDI-diagnostic tables."""
    d = state.posterior_ensemble.dim
    k = state.history[0].y.size if state.history else 0
    step_header = (["n", "p"] + [f"y{i + 1}" for i in range(k)]
                   + ["lb", "ub", "lb_laplace", "lb_unnormalized", "se_lb", "se_ub", "log_normalizer"]
                   + [f"post_mean{i + 1}" for i in range(d)] + ["post_cov_trace"])
    steps, cands, ekis, eki_header = [], [], [], None
    for n, rec in enumerate(state.history, start=1):
        b = rec.bounds
        steps.append([n, *rec.design, *rec.y, b.lower, b.upper, b.lb_laplace, b.lower_unnormalized,
                      b.se_lower, b.se_upper, b.log_normalizer, *rec.posterior_mean,
                      float(np.trace(rec.posterior_cov))])
        for i, c in enumerate(rec.candidates):
            cands.append([n, i + 1, *np.atleast_1d(c.design), c.lb_gauss, c.lb_laplace, c.upper,
                          c.se_lower, c.se_upper, int(c.ordered()), c.laplace_fallback_count])
        header, rows = eki_rows(rec.eki_trace)
        eki_header = ["n"] + header
        ekis.extend([n, *r] for r in rows)
    aldi_header = ["n", "aldi_step", "t"] + [f"mean{i + 1}" for i in range(d)] + ["cov_trace", "stationary"]
    aldi = []
    for n, rec in enumerate(state.history, start=1):
        diag = rec.aldi_diagnostics
        if diag is None:
            continue
        for row in diag.rows:
            aldi.append([n, row["step"], row["t"], *row["mean"], row["cov_trace"], int(diag.stationary)])
    cand_header = ["n", "member", "p", "lb_gauss", "lb_laplace", "ub", "se_lb", "se_ub", "ordered",
                   "laplace_fallback_count"]
    return (step_header, steps), (cand_header, cands), (eki_header, ekis), (aldi_header, aldi)


def run_sequential_experiment(cfg, art):
    setup = sequential_setup(cfg)
    timings = []
    state = run_sequential(setup, timings)
    (sh, sr), (ch, cr), (eh, er), (ah, ar) = sequential_tables(state)
    art.csv("sequential_steps.csv", "sequential", sh, sr)
    art.csv("sequential_candidates.csv", "sequential_candidates", ch, cr)
    if er:
        art.csv("sequential_eki_trace.csv", "eki_trace", eh, er)
    art.csv("aldi_diagnostics.csv", "aldi_diagnostics", ah, ar)
    summary = {
        "designs": [rec.design.tolist() for rec in state.history],
        "ordering_violations": sum(1 for row in cr if not row[-2]),
        "ground_truth": state._truth.tolist(),
    }
    return summary, {"step_wall_times_s": timings}


def run_linear_family(cfg, art):
    """Model-specific bundle: bound sweep plus EKI optimization on the same model."""
    summary = {"eig_sweep": run_eig_sweep(cfg, art), "eki": run_eki_optimize(cfg, art)}
    return summary


RUNNERS = {
    "kl_convergence": run_kl_convergence,
    "eig_sweep": run_eig_sweep,
    "eki_optimize": run_eki_optimize,
    "linear": run_linear_family,
    "near_linear": run_linear_family,
}


def run_experiment(cfg, out_dir):
    """Run the configured experiment, write CSVs and ``manifest.json``; returns the summary."""
    kind = cfg["experiment"]["kind"]
    art = Artifacts(out_dir)
    t0 = time.perf_counter()
    extra = None
    if kind in ("sequential", "heat"):
        summary, extra = run_sequential_experiment(cfg, art)
    else:
        summary = RUNNERS[kind](cfg, art)
    art.manifest(cfg, summary, time.perf_counter() - t0, extra)
    return summary
