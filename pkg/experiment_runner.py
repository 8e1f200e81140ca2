import argparse
import os
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Type

from pydantic import ValidationError
from python_threadsafe_logger import sqlite_business_logger

from agents.base_agent import Agent, RunContext
from agents.eval_agent import EvalAgent
from agents.infer_agent import InferAgent
from agents.simulate_agent import SimulateAgent
from agents.snr_agent import SNRAgent
from agents.theory_agent import TheoryAgent
from agents.train_agent import TrainAgent
from configuration import ExperimentConfig, RunConfig, config_hash, load_experiment_config, render_experiment_config
from errors import ConfigurationError, IWAdversarialError
from logger import logger

OUTPUT_ROOT_ENV = "IWADV_OUTPUT_ROOT"

EXIT_OK = 0
EXIT_DOMAIN_ERROR = 1
EXIT_USAGE_ERROR = 2

AGENTS: Dict[str, Type[Agent]] = {
    "simulate": SimulateAgent,
    "train": TrainAgent,
    "infer": InferAgent,
    "eval": EvalAgent,
    "verify-theory": TheoryAgent,
    "snr": SNRAgent,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="sectioned key = value configuration file")
    common.add_argument("--output-dir", help=f"run directory (default: ${OUTPUT_ROOT_ENV}/<subcommand>/<config hash>)")
    common.add_argument("--seed", type=int, help="seed for training, simulation and the checks")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="configuration override; repeatable, wins over the file")
    common.add_argument("--progress", action="store_true", help="show progress bars")

    parser = argparse.ArgumentParser(prog="iwadv", description="Importance-weighted adversarial inference toolkit.")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    simulate = sub.add_parser("simulate", parents=[common], help="synthetic fluorescence traces with ground truth")
    simulate.add_argument("--frames", type=int)
    simulate.add_argument("--sigma", type=float)
    simulate.add_argument("--neurons", type=int)

    train = sub.add_parser("train", parents=[common], help="fit a model with one objective family")
    train.add_argument("--objective", help="vae, iwae, avb, iw-avb, aae, iw-aae, vimco-fact or vimco-corr")
    train.add_argument("--k", type=int)
    train.add_argument("--steps", type=int)
    train.add_argument("--trace", action="append", default=[], help="trace file; repeatable")
    train.add_argument("--checkpoint", help="resume from this checkpoint")

    infer = sub.add_parser("infer", parents=[common], help="spike probabilities for trace files")
    infer.add_argument("--checkpoint", required=True)
    infer.add_argument("--trace", action="append", default=[], required=True)

    evaluate = sub.add_parser("eval", parents=[common], help="log-likelihood, FID, correlation and timing metrics")
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--trace", action="append", default=[])
    evaluate.add_argument("--timing", action="store_true", help="time parallel against sequential posterior sampling on a long trace")

    sub.add_parser("verify-theory", parents=[common], help="exact checks on enumerable models")
    sub.add_parser("snr", parents=[common], help="gradient signal-to-noise ratio against k")
    return parser


def collect_overrides(args: argparse.Namespace) -> List[str]:
    """Convenience flags become dotted overrides; explicit ``--set`` entries come last and win."""
    flags = {
        "frames": "simulation.frames",
        "sigma": "biophys.sigma",
        "neurons": "simulation.neurons",
        "objective": "objective.family",
        "k": "objective.k",
        "steps": "training.max_steps",
    }
    overrides = []
    for flag, key in flags.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f"{key}={value}")
    if args.seed is not None:
        overrides += [f"training.seed={args.seed}", f"simulation.seed={args.seed}"]
    if args.progress:
        overrides.append("training.progress=true")
    return overrides + list(args.overrides)


class ExperimentRunner:
    """Resolves the configuration, prepares the run directory and hands over to the subcommand's agent."""

    def __init__(self, run_config: RunConfig, config: ExperimentConfig, options: Optional[dict] = None):
        self.run_config = run_config
        self.config = config
        self.options = options or {}
        self.config_hash = config_hash(config)
        self.output_dir = Path(run_config.output_dir)

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> "ExperimentRunner":
        overrides = collect_overrides(args)
        config = load_experiment_config(args.config, overrides)
        output_dir = args.output_dir
        if output_dir is None:
            root = os.environ.get(OUTPUT_ROOT_ENV, "runs")
            output_dir = str(Path(root) / args.subcommand / config_hash(config))
        try:
            run_config = RunConfig(subcommand=args.subcommand, config_path=args.config, output_dir=output_dir,
                                   seed=args.seed, overrides=overrides)
        except ValidationError as e:
            raise ConfigurationError(f"invalid run settings: {e.errors()[0]['msg']}", key="run") from None
        options = {name: getattr(args, name, None) for name in ("trace", "checkpoint", "timing")}
        return cls(run_config, config, options)

    def write_resolved_config(self) -> Path:
        self.output_dir.mkdir(parents=True, exist_ok=True)
        path = self.output_dir / "config.ini"
        path.write_text(render_experiment_config(self.config), encoding="utf-8")
        return path

    def run(self) -> int:
        subcommand = self.run_config.subcommand
        logger.info(f"Running '{subcommand}' in {self.output_dir} (config {self.config_hash})")
        sqlite_business_logger.log(self.__class__.__name__, f"Starting {subcommand} with config {self.config_hash}")
        self.write_resolved_config()
        context = RunContext(self.config, self.run_config, self.output_dir, self.config_hash, self.options)
        status = AGENTS[subcommand](context).execute()
        sqlite_business_logger.log(self.__class__.__name__, f"Finished {subcommand} with status {status}")
        return status


def run(argv: Sequence[str]) -> int:
    """Command-line entry point; returns the process exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv))
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE_ERROR

    try:
        return ExperimentRunner.from_args(args).run()
    except (ConfigurationError, FileNotFoundError) as e:
        logger.critical(f"{args.subcommand}: {e}", exc_info=True)
        return EXIT_USAGE_ERROR
    except (IWAdversarialError, OSError) as e:
        logger.critical(f"{args.subcommand} failed: {e}", exc_info=True)
        return EXIT_DOMAIN_ERROR
