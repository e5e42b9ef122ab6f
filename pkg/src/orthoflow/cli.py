"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 I/O error.  Every subcommand echoes its effective configuration to
``<out>/config.toml`` before computing anything.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import config as cfgmod
from .errors import (
    CheckpointError,
    ConfigError,
    IntegrationError,
    NonFiniteGradientError,
    OrthoflowError,
    SingularMatrixError,
)

log = logging.getLogger("orthoflow")

EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 2, 3, 4

TRAIN_COMMANDS = {"train-pca": "pca", "train-koopman": "koopman", "train-ntk": "ntk", "train-diag": "diag"}
COMMANDS = tuple(TRAIN_COMMANDS) + ("verify-universality", "ablate-integrators", "rollout", "eval", "selftest")
HELP = {
    "train-pca": "functional PCA on the 1-D discontinuous synthetic data",
    "train-koopman": "fit the Koopman operator of the Taylor-Green flow",
    "train-ntk": "eigenfunctions of a two-moons classifier's tangent kernel",
    "train-diag": "diagonalise an operator with a known spectrum",
    "verify-universality": "reach random SO(n) targets with rank-2 flows",
    "ablate-integrators": "norm traces of Cayley and Euler steps",
    "rollout": "iterate a trained Koopman map and compare RK compositions",
    "eval": "write the report for a checkpoint",
    "selftest": "fast invariant checks",
}

UNIVERSALITY_DEFAULTS = dict(n=4, steps=200, targets=1, D=2048, doublings=1, bump_p=2.0, bump_q=2.0, seed=0)
ROLLOUT_DEFAULTS = dict(checkpoint="", steps=20, side=64, seed=0, plots=True)
EVAL_DEFAULTS = dict(checkpoint="", seed=0, plots=True)


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog="orthoflow", description="Learned orthogonal flows on function spaces.")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_Parser)
    sub.required = True
    for name in COMMANDS:
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", metavar="PATH", help="TOML file; sections are organisational")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override (repeatable)")
        p.add_argument("--out", metavar="DIR", help=f"output directory (default: orthoflow-out/{name})")
        p.add_argument("--seed", type=int, metavar="U64", help="master seed")
        p.add_argument("--quiet", action="store_true", help="only warnings and errors")
    return parser


def defaults_for(command):
    from .experiments import ablation, default_config

    if command in TRAIN_COMMANDS:
        values = default_config(TRAIN_COMMANDS[command]).as_dict()
        values.pop("objective")
        values.update(resume="", report=True, plots=True)
        return values
    return {
        "verify-universality": UNIVERSALITY_DEFAULTS,
        "ablate-integrators": dict(ablation.ABLATION_DEFAULTS, plots=True),
        "rollout": ROLLOUT_DEFAULTS,
        "eval": EVAL_DEFAULTS,
        "selftest": dict(seed=0),
    }[command]


def effective_config(args):
    defaults = defaults_for(args.command)
    file_values = cfgmod.load_file(args.config) if args.config else {}
    overrides = cfgmod.parse_overrides(args.set)
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        overrides["seed"] = args.seed
    return cfgmod.resolve(defaults, file_values, overrides)


def run(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"orthoflow: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        cfg = effective_config(args)
        out = args.out or os.path.join("orthoflow-out", args.command)
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "config.toml"), "w", encoding="utf-8") as fh:
            fh.write(cfgmod.dumps(cfg, section=args.command))
        HANDLERS[args.command](cfg, out, args.quiet)
    except ConfigError as exc:
        print(f"orthoflow: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IntegrationError, SingularMatrixError, NonFiniteGradientError, FloatingPointError) as exc:
        print(f"orthoflow: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, OSError) as exc:
        print(f"orthoflow: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OrthoflowError as exc:
        print(f"orthoflow: failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


# -- handlers -------------------------------------------------------------------------------


def _train(objective):
    def handler(cfg, out, quiet):
        from .experiments import default_config
        from .training import Checkpoint, train

        cfg = dict(cfg)
        resume_path, report, plots = cfg.pop("resume"), cfg.pop("report"), cfg.pop("plots")
        dim, channels = cfg.pop("dim"), cfg.pop("channels")
        config = default_config(objective, dim=dim, channels=channels, **cfg)
        resume = Checkpoint.load(resume_path) if resume_path else None
        result = train(config, out_dir=out, resume=resume, quiet=quiet)
        if report:
            write_report(result.task, out, plots)

    return handler


def write_report(task, out, plots=True):
    from .experiments import diagonalization, koopman, ntk, pca1d

    objective = task.config.objective
    if objective == "pca":
        pca1d.write_pca_report(pca1d.pca_report(task), out, plots)
    elif objective == "diag":
        diagonalization.write_diag_report(diagonalization.diag_report(task), out)
    elif objective == "ntk":
        ntk.write_ntk_report(ntk.ntk_report(task), out)
    elif objective == "koopman":
        koopman.write_rollout(koopman.koopman_rollout(task), out, plots)


def _universality(cfg, out, quiet):
    from .experiments.common import write_csv
    from .function_space import Domain, uniform_grid
    from .training import stream_rng
    from .universality import convergence_order, random_special_orthogonal, verify_universality

    if cfg["n"] < 2:
        raise ConfigError("n must be at least 2")
    points = uniform_grid(Domain(1), cfg["D"])
    rows = []
    for target in range(cfg["targets"]):
        Q = random_special_orthogonal(cfg["n"], stream_rng(cfg["seed"], "task", target))
        errors, steps = [], []
        for level in range(cfg["doublings"] + 1):
            s = cfg["steps"] * 2**level
            rep = verify_universality(Q, s, points, bump_shape=(cfg["bump_p"], cfg["bump_q"]))
            rows.append((target, rep.n, rep.segments, s, rep.frobenius_error, rep.norm_drift))
            errors.append(rep.frobenius_error)
            steps.append(s)
        if len(errors) > 1 and min(errors) > 0:
            log.info("target %d: empirical order %.3f", target, convergence_order(errors, steps))
    write_csv(
        os.path.join(out, "universality.csv"), ["target", "n", "segments", "steps", "frobenius-error", "drift"], rows
    )


def _ablation(cfg, out, quiet):
    from .experiments import ablation

    cfg = dict(cfg)
    plots = cfg.pop("plots")
    report = ablation.ablate_integrators(**cfg)
    ablation.write_ablation(report, out, plots)


def _load_task(path):
    from .training import Checkpoint, restore

    if not path:
        raise ConfigError("a checkpoint path is required (--set checkpoint=PATH)")
    return restore(Checkpoint.load(path))


def _rollout(cfg, out, quiet):
    from .experiments import koopman
    from .function_space import Domain, uniform_grid

    task = _load_task(cfg["checkpoint"])
    if task.config.objective != "koopman":
        raise ConfigError(f"rollout needs a Koopman checkpoint, got {task.config.objective!r}")
    report = koopman.koopman_rollout(task, cfg["steps"], uniform_grid(Domain(2), cfg["side"]), seed=cfg["seed"])
    koopman.write_rollout(report, out, cfg["plots"])


def _eval(cfg, out, quiet):
    write_report(_load_task(cfg["checkpoint"]), out, cfg["plots"])


def _selftest(cfg, out, quiet):
    from .selftest import run_selftest

    failures = run_selftest(seed=cfg["seed"], out=out, echo=not quiet)
    if failures:
        raise FloatingPointError(f"{failures} self-test check(s) failed")


HANDLERS = {name: _train(obj) for name, obj in TRAIN_COMMANDS.items()}
HANDLERS.update(
    {
        "verify-universality": _universality,
        "ablate-integrators": _ablation,
        "rollout": _rollout,
        "eval": _eval,
        "selftest": _selftest,
    }
)


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
