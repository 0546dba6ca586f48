"""Gradient-free sequential Bayesian experimental design.

Submodules are imported lazily so the CLI can set thread limits before
numpy loads.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = ("aldi", "config", "eig", "eki", "errors", "experiments", "forward_models", "gaussian_core",
               "sequential", "verify")


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
