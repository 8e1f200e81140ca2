from pathlib import Path
from typing import List, Optional

from python_threadsafe_logger import sqlite_business_logger

from configuration import ExperimentConfig, RunConfig
from events import FrozenBaseModel, MetricComputed
from logger import logger
from reports import emit_report

# --- ANSI color codes for the terminal ---
RESET = "\033[0m"
BLACK_ON_YELLOW = "\033[30;43m"
WHITE_ON_BLUE = "\033[97;44m"
BLACK_ON_GREEN = "\033[30;42m"
WHITE_ON_RED = "\033[97;41m"
BOLD_WHITE = "\033[1;97m"


class RunContext:
    """Everything an agent needs about the current invocation."""

    def __init__(self, config: ExperimentConfig, run: RunConfig, output_dir: Path, config_hash: str,
                 options: Optional[dict] = None):
        self.config = config
        self.run = run
        self.output_dir = Path(output_dir)
        self.config_hash = config_hash
        self.options = options or {}

    @property
    def seed(self) -> int:
        return self.run.seed if self.run.seed is not None else self.config.training.seed

    def option(self, name: str, default=None):
        value = self.options.get(name)
        return default if value is None else value


class Agent:
    """Executes one subcommand inside a prepared run directory."""

    def __init__(self, context: RunContext):
        self.context = context
        self.metrics: List[MetricComputed] = []

    def execute(self) -> int:
        """Runs the subcommand; returns the exit status."""
        raise NotImplementedError

    def record_metric(self, name: str, value: float, se: Optional[float] = None) -> MetricComputed:
        metric = MetricComputed(name=name, value=float(value), se=None if se is None else float(se),
                                config_hash=self.context.config_hash)
        self.metrics.append(metric)
        self.publish(metric)
        logger.info(f"{BLACK_ON_YELLOW}{self.__class__.__name__}{RESET} {name} = {BOLD_WHITE}{value:.6g}{RESET}"
                    + (f" ± {se:.3g}" if se is not None else ""))
        return metric

    def publish(self, event: FrozenBaseModel) -> None:
        """Appends a record to the session business log under this agent's name."""
        sqlite_business_logger.log(self.__class__.__name__, f"{type(event).__name__} {event.model_dump_json()}")

    def write_metrics(self) -> Optional[Path]:
        if not self.metrics:
            return None
        return self.artifact_written(emit_report(self.metrics, self.context.output_dir / "metrics.txt"))

    def artifact_written(self, path: Path) -> Path:
        sqlite_business_logger.log(self.__class__.__name__, f"Wrote {path}")
        logger.info(f"{self.__class__.__name__} wrote {path}")
        return path
