from typing import Optional

from pydantic import BaseModel, Field, NonNegativeInt


# --- Base Model for Immutability ---
# Helper class to avoid repeating the configuration for each record
class FrozenBaseModel(BaseModel):
    """A base model that is immutable, similar to a frozen dataclass."""
    model_config = {'frozen': True}


class TrainingStepCompleted(FrozenBaseModel):
    """One line of the training log."""
    # noinspection PyTypeHints
    step: NonNegativeInt = Field(description="Generator/inference updates completed so far.")
    generator: float = Field(description="Objective maximized by the generator at this step.")
    inference: float = Field(description="Objective maximized by the inference network at this step.")
    discriminator: Optional[float] = Field(default=None, description="Last discriminator objective of the step, if any.")
    bound: float = Field(description="Training bound reported for the family (IWAE, ELBO or adversarial estimate).")
    wall_ms: float = Field(description="Wall-clock milliseconds spent on the step.")


class MetricComputed(FrozenBaseModel):
    """A single metric line of a report."""
    name: str = Field(description="Metric name, e.g. 'iwae_loglik' or 'spike_correlation'.")
    value: float = Field(description="Point estimate.")
    se: Optional[float] = Field(default=None, description="Standard error, when the metric has one.")
    config_hash: str = Field(description="First 12 hex characters of the SHA-256 of the resolved configuration.")


class InferenceTimed(FrozenBaseModel):
    """Wall-clock measurement of one posterior-sampling pass."""
    mode: str = Field(description="'parallel' or 'sequential'.")
    # noinspection PyTypeHints
    frames: NonNegativeInt = Field(description="Trace length in frames.")
    seconds: float = Field(description="Elapsed wall-clock seconds.")
    # noinspection PyTypeHints
    evaluations: NonNegativeInt = Field(description="Network evaluations performed.")
    hardware_note: str = Field(default="", description="Free-text description of the machine.")


class TheorySuiteChecked(FrozenBaseModel):
    """Outcome of one exact-enumeration verification suite."""
    suite: str = Field(description="Suite name.")
    # noinspection PyTypeHints
    instances: NonNegativeInt = Field(description="Models checked.")
    max_residual: float = Field(description="Largest identity residual, or smallest chain margin for inequality suites.")
    # noinspection PyTypeHints
    violations: NonNegativeInt = Field(description="Instances failing the check.")
    passed: bool = Field(description="True when no instance failed.")
