"""Experiment configuration: YAML files with dot-path overrides and validation."""

from __future__ import annotations

import copy
import re

import numpy as np
import yaml

from .errors import ConfigError, ValidationError

KINDS = ("linear", "near_linear", "heat", "kl_convergence", "eig_sweep", "eki_optimize", "sequential")
MODEL_KINDS = ("linear", "near_linear", "heat")

# blocks each experiment kind reads; "seeds" is always required
REQUIRED = {
    "linear": ("model", "prior", "noise", "eig", "eki"),
    "near_linear": ("model", "prior", "noise", "eig", "eki"),
    "heat": ("model", "prior", "noise", "sampler", "eig", "eki", "sequential"),
    "kl_convergence": ("model", "prior", "noise", "kl"),
    "eig_sweep": ("model", "prior", "noise", "eig"),
    "eki_optimize": ("model", "prior", "noise", "eig", "eki"),
    "sequential": ("model", "prior", "noise", "sampler", "eig", "eki", "sequential"),
}

DEFAULTS = {
    "sampler": {"dt": 0.01, "t_end": 10.0, "noise": "projected"},
    "eig": {"delta": 0.1, "laplace": True, "folds": 10, "p_grid": [0.0, 0.5, 1.0, 1.5, 2.0]},
    "eki": {
        "J": 3, "alpha": 1e-2, "c_p": 1.0, "rho": None, "rho_scale": 0.01, "rho_gamma": 0.2,
        "rho_horizon": 1e5, "rho_max": 0.99, "c_shift": 3.0, "t_end": 1e3, "rtol": 1e-6,
        "atol": 1e-9, "box": [0.0, 2.0], "selection": "argmax", "warm_start": False,
    },
    "kl": {"replicates": 10, "p": 1.0, "percentiles": [10, 50, 90]},
    "sequential": {"steps": 3, "normalizer_samples": 10000},
    "output": {"dir": "out"},
}


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads ``1e3``-style floats (YAML 1.1 needs a dot)."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:[0-9][0-9_]*(?:\.[0-9_]*)?|\.[0-9_]+)(?:[eE][-+]?[0-9]+)?$|^[-+]?\.(?:inf|Inf|INF)$"
               r"|^\.(?:nan|NaN|NAN)$"),
    list("-+0123456789."),
)


def _load(stream):
    return yaml.load(stream, Loader=_Loader)  # noqa: S506 (SafeLoader subclass)


def parse_value(text):
    """Override values are parsed as YAML scalars/lists (``1e3``, ``[0, 2]``, ``null``)."""
    try:
        return _load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value {text!r}: {exc}") from None


def apply_override(cfg, assignment):
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    path, text = assignment.split("=", 1)
    keys = path.strip().split(".")
    node = cfg
    for key in keys[:-1]:
        child = node.get(key)
        if child is None:
            child = node[key] = {}
        if not isinstance(child, dict):
            raise ConfigError(f"override path {path!r} passes through a non-block value")
        node = child
    node[keys[-1]] = parse_value(text)
    return cfg


def load_config(path, overrides=()):
    try:
        with open(path, encoding="utf-8") as fh:
            raw = _load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    cfg = copy.deepcopy(raw)
    for item in overrides:
        apply_override(cfg, item)
    return cfg


def _merge_defaults(cfg):
    out = copy.deepcopy(cfg)
    for block, values in DEFAULTS.items():
        if block in out:
            if not isinstance(out[block], dict):
                raise ValidationError(block, "must be a mapping")
            out[block] = {**values, **out[block]}
    out.setdefault("output", dict(DEFAULTS["output"]))
    return out


def _positive_int(cfg, path, minimum=1):
    value = _get(cfg, path)
    if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
        raise ValidationError(path, f"must be an integer, got {value!r}")
    if value < minimum:
        raise ValidationError(path, f"must be >= {minimum}, got {value}")
    return int(value)


def _positive(cfg, path):
    value = _get(cfg, path)
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not value > 0:
        raise ValidationError(path, f"must be a positive number, got {value!r}")
    return float(value)


def _get(cfg, path):
    node = cfg
    for key in path.split("."):
        if not isinstance(node, dict) or key not in node:
            raise ValidationError(path, "missing")
        node = node[key]
    return node


def validate(cfg):
    """Fill defaults and check every field the chosen experiment reads.

    Returns the resolved configuration (a new dict).
    """
    if "experiment" not in cfg or not isinstance(cfg["experiment"], dict):
        raise ValidationError("experiment", "missing block")
    kind = cfg["experiment"].get("kind")
    if kind not in KINDS:
        raise ValidationError("experiment.kind", f"must be one of {', '.join(KINDS)}")
    for block in REQUIRED[kind] + ("seeds",):
        if block not in cfg:
            raise ValidationError(block, f"block required for experiment kind {kind!r}")
    out = _merge_defaults(cfg)
    seeds = out["seeds"]
    if not isinstance(seeds, dict) or "master" not in seeds:
        raise ValidationError("seeds.master", "a master seed is required")
    _positive_int(out, "seeds.master", minimum=0)

    model = out["model"]
    if model.get("kind") not in MODEL_KINDS:
        raise ValidationError("model.kind", f"must be one of {', '.join(MODEL_KINDS)}")
    if kind == "heat" and model["kind"] != "heat":
        raise ValidationError("model.kind", "experiment kind 'heat' needs the heat model")
    if kind in ("linear", "near_linear") and model["kind"] != kind:
        raise ValidationError("model.kind", f"experiment kind {kind!r} needs model kind {kind!r}")
    if "c" in model:
        _positive(out, "model.c")

    prior = out["prior"]
    for key in ("mean", "covariance"):
        if key not in prior:
            raise ValidationError(f"prior.{key}", "missing")
    noise = out["noise"]
    if "covariance" not in noise:
        raise ValidationError("noise.covariance", "missing (a number, a matrix, or 'heat_default')")
    if noise["covariance"] != "heat_default":
        cov = np.asarray(noise["covariance"], dtype=float)
        if cov.ndim == 0 and not cov > 0:
            raise ValidationError("noise.covariance", "must be positive")

    if "sampler" in REQUIRED[kind]:
        _positive_int(out, "sampler.J", minimum=2)
        _positive(out, "sampler.dt")
        _positive(out, "sampler.t_end")
        if out["sampler"]["noise"] not in ("projected", "full"):
            raise ValidationError("sampler.noise", "must be 'projected' or 'full'")
    if "eig" in REQUIRED[kind]:
        if "sampler" not in REQUIRED[kind]:
            # sequential kinds estimate EIG on the sampler.J posterior particles
            _positive_int(out, "eig.J", minimum=2)
        _positive(out, "eig.delta")
        _positive_int(out, "eig.folds", minimum=1)
    if "eki" in REQUIRED[kind]:
        _positive_int(out, "eki.J", minimum=2)
        _positive(out, "eki.alpha")
        _positive(out, "eki.t_end")
        box = out["eki"]["box"]
        if not (isinstance(box, list) and len(box) == 2 and box[0] < box[1]):
            raise ValidationError("eki.box", "must be [low, high] with low < high")
        if out["eki"]["selection"] not in ("argmax", "mean"):
            raise ValidationError("eki.selection", "must be 'argmax' or 'mean'")
        c_shift = out["eki"]["c_shift"]
        if c_shift != "auto" and not isinstance(c_shift, (int, float)):
            raise ValidationError("eki.c_shift", "must be a number or 'auto'")
    if "kl" in REQUIRED[kind]:
        grid = out["kl"].get("J_grid")
        if not grid or any(int(j) < 2 for j in grid):
            raise ValidationError("kl.J_grid", "must list sample sizes >= 2")
        _positive_int(out, "kl.replicates")
    if "sequential" in REQUIRED[kind]:
        _positive_int(out, "sequential.steps")
    return out
