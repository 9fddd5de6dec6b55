"""Command line entry point: ``temporl <subcommand> [flags]``.

Outputs go under ``--out`` (or ``$TEMPORL_OUT``, or ``./temporl_out``).
Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness
from .agent import ConfigError
from .flowprior import ConditioningSpec, load_prior
from .netlib import ParamFileError, SpecMismatchError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

log = logging.getLogger("temporl")


class UsageError(Exception):
    """Raised instead of argparse's own ``SystemExit`` so the caller controls the exit code."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", help="output directory (default: $TEMPORL_OUT or ./temporl_out)")
    p.add_argument("--config", help="flat 'key = value' config file")
    p.add_argument("--preset", default="paper", choices=sorted(harness.PRESETS), help="base settings")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="temporl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("collect", help="roll out the scripted expert into a dataset CSV")
    _common(p)
    p.add_argument("--layout", dest="dataset_layout")
    p.add_argument("--n-traj", type=int)
    p.add_argument("--len", dest="traj_len", type=int)
    p.add_argument("--noise", dest="expert_noise", type=float)
    p.add_argument("--seed", dest="data_seed", type=int)
    p.add_argument("--output", help="dataset file name (default: dataset.csv)")

    p = sub.add_parser("train-prior", help="fit a flow prior to a dataset")
    _common(p)
    p.add_argument("--dataset")
    p.add_argument("--cond", help="none | last-actions:K | state | state-last-action")
    p.add_argument("--epochs", dest="prior_epochs", type=int)
    p.add_argument("--batch-size", dest="prior_batch_size", type=int)
    p.add_argument("--lr", dest="prior_lr", type=float)
    p.add_argument("--hidden", dest="prior_hidden", type=int)
    p.add_argument("--seed", dest="prior_seed", type=int)
    p.add_argument("--name", default="prior", help="checkpoint stem (default: prior)")

    for name in ("train-agent", "train"):
        p = sub.add_parser(name, help="train agents (one run per seed)")
        _common(p)
        p.add_argument("--mode", choices=["sac", "sac_bc", "temporl"])
        p.add_argument("--layout")
        p.add_argument("--prior")
        p.add_argument("--cond")
        p.add_argument("--dataset")
        p.add_argument("--seeds", help="e.g. 0..4 or 0,3,7")
        p.add_argument("--epochs", type=int)
        p.add_argument("--steps-per-epoch", type=int)
        p.add_argument("--workers", type=int)

    p = sub.add_parser("eval", help="evaluate an agent checkpoint with mean actions")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layout")
    p.add_argument("--episodes", dest="eval_episodes", type=int)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("explore-eval", help="coverage and radius of gyration of open-loop samplers")
    _common(p)
    p.add_argument("--layout")
    p.add_argument("--prior")
    p.add_argument("--cond")
    p.add_argument("--policy", default="both", choices=["uniform", "prior", "both"])
    p.add_argument("--seeds")
    p.add_argument("--n-traj", dest="explore_traj", type=int)
    p.add_argument("--len", dest="explore_len", type=int)

    p = sub.add_parser("psd", help="action power spectra of dataset, prior and uniform sequences")
    _common(p)
    p.add_argument("--dataset")
    p.add_argument("--prior")
    p.add_argument("--cond")
    p.add_argument("--layout")
    p.add_argument("--n-seq", dest="psd_sequences", type=int)
    p.add_argument("--len", dest="psd_len", type=int)
    p.add_argument("--seeds")

    p = sub.add_parser("metrics", help="aggregate run records into a metrics CSV")
    _common(p)
    p.add_argument("--runs", help="directory of run_*.json files (default: output directory)")
    return parser


_NOT_CONFIG = {"command", "out", "config", "preset", "set", "verbose", "output", "name", "checkpoint", "seed",
               "policy", "runs"}


def resolve_config(args: argparse.Namespace) -> harness.ExperimentConfig:
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    for key, value in vars(args).items():
        if key in _NOT_CONFIG or value is None:
            continue
        overrides[key] = value
    file_values = harness.read_config_file(args.config) if args.config else {}
    return harness.build_config(args.preset, file_values, overrides)


def _require(path: str, what: str) -> Path:
    if not path:
        raise ConfigError(f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _prior(config: harness.ExperimentConfig):
    return load_prior(_require(config.prior, "--prior"), ConditioningSpec.parse(config.cond))


def dispatch(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    out = harness.output_root(args.out or config.out_dir or None)
    cmd = args.command
    if cmd == "collect":
        path = harness.run_collect(config, out / (args.output or "dataset.csv"))
        print(path)
    elif cmd == "train-prior":
        dataset = _require(config.dataset or str(out / "dataset.csv"), "--dataset")
        ckpt, curve = harness.run_train_prior(config, dataset, out, args.name)
        print(ckpt)
        print(curve)
    elif cmd in ("train-agent", "train"):
        records = harness.run_train_agents(config, out)
        for rec in records:
            print(f"seed {rec['seed']}: final success {rec['final']['success_rate']:.2f} "
                  f"after {rec['env_steps']} steps")
    elif cmd == "eval":
        prior = _prior(config) if config.prior else None
        success, ret = harness.run_eval(_require(args.checkpoint, "--checkpoint"), config.layout,
                                        config.eval_episodes, args.seed, prior)
        path = harness.write_csv(out / "eval.csv", harness.METRIC_HEADER,
                                 [("success_rate", config.layout, success, 0.0),
                                  ("mean_return", config.layout, ret, 0.0)])
        print(f"success_rate {success:.3f} mean_return {ret:.3f}")
        print(path)
    elif cmd == "explore-eval":
        kinds = ["uniform", "prior"] if args.policy == "both" else [args.policy]
        prior = _prior(config) if "prior" in kinds else None
        path = out / f"explore_{config.layout}.csv"
        harness.run_explore_eval(config, kinds, path, prior)
        print(path)
    elif cmd == "psd":
        prior = _prior(config) if config.prior else None
        dataset = str(_require(config.dataset, "--dataset")) if config.dataset else None
        path = out / "psd.csv"
        harness.run_psd(config, path, prior, dataset)
        print(path)
    elif cmd == "metrics":
        run_dir = Path(args.runs) if args.runs else out
        path = out / "metrics.csv"
        harness.summarize_runs(run_dir, path)
        print(path)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return dispatch(args)
    except (ConfigError, UsageError, SpecMismatchError) as exc:
        print(f"temporl: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ParamFileError, FileNotFoundError) as exc:
        print(f"temporl: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every other failure maps to the runtime exit code
        log.debug("runtime failure", exc_info=True)
        print(f"temporl: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
