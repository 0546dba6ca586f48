"""``seqboed run|verify`` command-line front end.

Exit codes: 0 success, 1 verify failures at full scale, 2 config parse
error, 3 validation error, 4 runtime numerical error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

EXIT_OK, EXIT_VERIFY, EXIT_PARSE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3, 4

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


def build_parser():
    parser = argparse.ArgumentParser(prog="seqboed", description="Gradient-free sequential BOED experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (("run", "run an experiment and write CSV artifacts"),
                        ("verify", "run the oracle checks at the config's scale")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("config", help="YAML experiment config")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry by dot path, e.g. eig.J=1000 (repeatable)")
        p.add_argument("--seed", type=int, help="override seeds.master")
        p.add_argument("--out-dir", help="override output.dir")
        p.add_argument("--threads", type=int, help="BLAS/OpenMP thread count")
        if name == "verify":
            p.add_argument("--heat", action="store_true", help="include the 3-step heat sequential run")
    return parser


def _limit_threads(n):
    # must run before numpy is imported
    for var in _THREAD_VARS:
        os.environ[var] = str(n)


def _resolve(args):
    from .config import load_config, validate

    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seeds.master={args.seed}")
    if args.out_dir is not None:
        overrides.append(f"output.dir={args.out_dir}")
    return validate(load_config(args.config, overrides))


def _run(cfg):
    from .experiments import run_experiment

    out_dir = cfg["output"]["dir"]
    summary = run_experiment(cfg, out_dir)
    print(f"seqboed: {cfg['experiment']['kind']} finished, artifacts in {out_dir}")
    for key, value in summary.items():
        print(f"  {key}: {value}")
    return EXIT_OK


def _verify(cfg, heat):
    from .verify import report, verify_suite

    results, small = verify_suite(cfg, include_heat=heat)
    lines, code = report(results, small, J=cfg.get("eig", {}).get("J"))
    for line in lines:
        print(line)
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            print("seqboed: --threads must be >= 1", file=sys.stderr)
            return EXIT_VALIDATION
        _limit_threads(args.threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    from .errors import ConfigError, SeqboedError, ValidationError

    try:
        cfg = _resolve(args)
    except ConfigError as exc:
        print(f"seqboed: config error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except ValidationError as exc:
        print(f"seqboed: invalid config: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        if args.command == "run":
            return _run(cfg)
        return _verify(cfg, args.heat)
    except ValidationError as exc:
        print(f"seqboed: invalid config: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (SeqboedError, ArithmeticError) as exc:
        print(f"seqboed: numerical error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        # numpy.linalg.LinAlgError is a ValueError subclass too
        print(f"seqboed: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
