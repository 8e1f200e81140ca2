import configparser
import hashlib
import json
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from errors import ConfigurationError

ObjectiveFamily = Literal["vae", "iwae", "avb", "iw-avb", "aae", "iw-aae", "vimco-fact", "vimco-corr"]
DiscriminatorMode = Literal["joint", "latent-only", "none"]

_MODE_BY_FAMILY = {
    "vae": "none",
    "iwae": "none",
    "vimco-fact": "none",
    "vimco-corr": "none",
    "avb": "joint",
    "iw-avb": "joint",
    "aae": "latent-only",
    "iw-aae": "latent-only",
}


class StrictModel(BaseModel):
    """Unknown keys are rejected everywhere in the configuration tree."""
    model_config = ConfigDict(extra="forbid")


class ArchitectureConfig(StrictModel):
    conv_widths: List[int] = Field(default_factory=lambda: [31, 21, 21, 11], description="Filter width of each encoder conv layer.")
    conv_filters: List[int] = Field(default_factory=lambda: [20, 20, 20, 20], description="Filters per encoder conv layer.")
    hidden_widths: List[int] = Field(default_factory=lambda: [64, 64], description="Hidden widths of dense encoders/decoders.")
    latent_dim: int = Field(2, gt=0, description="Dimension of a continuous latent z.")
    noise_dim: int = Field(2, gt=0, description="Width of the noise vector injected into dense implicit encoders.")
    noise_channels: int = Field(1, gt=0, description="Noise channels concatenated to conv layers receiving noise.")
    noise_layers: List[int] = Field(default_factory=lambda: [0, 1], description="Layers that receive the noise input.")
    activation: Literal["relu", "tanh"] = "relu"
    discriminator_hidden: List[int] = Field(default_factory=lambda: [64, 64])
    discriminator_widths: List[int] = Field(default_factory=lambda: [11, 11])
    discriminator_filters: List[int] = Field(default_factory=lambda: [8, 8])
    discriminator_activation: Literal["relu", "tanh"] = "tanh"
    ar_window: int = Field(10, gt=0, description="Past spike frames seen by the autoregressive encoder.")
    ar_hidden: int = Field(16, gt=0)

    @field_validator("conv_widths", "conv_filters", "hidden_widths", "discriminator_hidden",
                     "discriminator_widths", "discriminator_filters")
    @classmethod
    def _positive_sizes(cls, value: List[int]) -> List[int]:
        if any(v <= 0 for v in value):
            raise ValueError("all sizes must be positive")
        return value

    @field_validator("noise_layers")
    @classmethod
    def _non_negative_layers(cls, value: List[int]) -> List[int]:
        if any(v < 0 for v in value):
            raise ValueError("layer indices must be non-negative")
        return value

    @model_validator(mode="after")
    def _matching_conv_lists(self) -> "ArchitectureConfig":
        if len(self.conv_widths) != len(self.conv_filters):
            raise ValueError("conv_widths and conv_filters must have the same length")
        if len(self.discriminator_widths) != len(self.discriminator_filters):
            raise ValueError("discriminator_widths and discriminator_filters must have the same length")
        return self


class ObjectiveSpec(StrictModel):
    family: ObjectiveFamily = "iw-avb"
    k: int = Field(8, ge=1, description="Importance samples per datum.")
    discriminator_mode: Optional[DiscriminatorMode] = None
    single_sample_inference: bool = Field(False, description="Inference-network gradient from the first sample only.")
    discriminator_samples: Literal["k", "1"] = Field("k", description="Posterior samples per datum fed to the discriminator.")
    phi_through_iw: bool = Field(False, description="Let the importance-weighted loss also reach the inference network.")
    analytic_kl: bool = Field(False, description="Closed-form KL in the ELBO (Gaussian head, standard normal prior).")

    @model_validator(mode="after")
    def _mode_matches_family(self) -> "ObjectiveSpec":
        expected = _MODE_BY_FAMILY[self.family]
        if self.discriminator_mode is None:
            object.__setattr__(self, "discriminator_mode", expected)
        elif self.discriminator_mode != expected:
            raise ValueError(f"family {self.family} requires discriminator mode '{expected}', got '{self.discriminator_mode}'")
        return self

    @property
    def uses_discriminator(self) -> bool:
        return self.discriminator_mode != "none"

    @property
    def importance_weighted(self) -> bool:
        return self.family in ("iwae", "iw-avb", "iw-aae")


class BiophysParams(StrictModel):
    tau: float = Field(0.7, gt=0.0, description="Calcium decay constant (s).")
    alpha: float = Field(1.0, description="Fluorescence amplitude per spike (a.u.).")
    beta: float = Field(0.0, description="Fluorescence baseline (a.u.).")
    sigma: float = Field(0.2, ge=0.0, description="Observation noise std (a.u.).")
    delta: float = Field(1.0 / 60.0, gt=0.0, description="Discretization step (s).")
    rate: float = Field(0.01, ge=0.0, le=1.0, description="Prior spike probability per frame.")

    @model_validator(mode="after")
    def _stable_euler_step(self) -> "BiophysParams":
        if self.delta >= self.tau:
            raise ValueError(f"delta ({self.delta}) must be smaller than tau ({self.tau}) for a stable Euler update")
        return self

    @property
    def frame_rate(self) -> float:
        return 1.0 / self.delta

    @property
    def decay(self) -> float:
        return 1.0 - self.delta / self.tau


class ModelConfig(StrictModel):
    problem: Literal["gaussian", "images", "spikes"] = "spikes"
    data_dim: int = Field(1, gt=0, description="Observation dimension for vector problems.")
    architecture: ArchitectureConfig = Field(default_factory=ArchitectureConfig)
    learn_biophys: bool = Field(False, description="Train (alpha, beta, sigma, tau) instead of freezing them.")
    threshold: Literal["stochastic", "fixed"] = Field("stochastic", description="Hard spike sample against uniform noise or at 0.5.")


class TrainingConfig(StrictModel):
    batch_size: int = Field(16, ge=1)
    lr_generator: float = Field(1e-3, ge=0.0)
    lr_inference: float = Field(1e-3, ge=0.0)
    lr_discriminator: float = Field(1e-3, ge=0.0)
    optimizer: Literal["sgd", "adam"] = "adam"
    betas: List[float] = Field(default_factory=lambda: [0.9, 0.999])
    max_steps: int = Field(2000, ge=0)
    seed: int = 0
    checkpoint_every: int = Field(0, ge=0, description="0 writes only the final checkpoint.")
    n_disc: int = Field(1, ge=0, description="Discriminator updates per generator/inference update.")
    early_stop: bool = False
    plateau_window: int = Field(200, gt=1)
    plateau_tolerance: float = Field(1e-4, gt=0.0)
    window_frames: int = Field(600, gt=0, description="Trace window length used as one spike datum.")
    progress: bool = False


class SimulationConfig(StrictModel):
    frames: int = Field(36000, gt=0)
    neurons: int = Field(1, gt=0)
    samples: int = Field(1000, gt=1, description="Training datapoints drawn for the gaussian and images problems.")
    test_samples: int = Field(200, gt=1, description="Held-out datapoints for evaluation.")
    prototypes: int = Field(4, gt=0, description="Binary prototypes behind the synthetic image patterns.")
    flip_probability: float = Field(0.05, ge=0.0, lt=0.5)
    seed: int = 0


class EvaluationConfig(StrictModel):
    iwae_k: int = Field(64, ge=1)
    ais_intermediate: int = Field(1000, ge=1)
    ais_chains: int = Field(5, ge=1)
    ais_proposal_std: float = Field(0.1, gt=0.0)
    eval_rate: float = Field(25.0, gt=0.0)
    presence_binning: bool = False
    prior_proposal_for_implicit: bool = True
    marginal_draws: int = Field(20, ge=1)
    timing_frames: int = Field(216000, gt=0)


class TheoryConfig(StrictModel):
    n_models: int = Field(100, gt=0)
    x_size: int = Field(4, gt=1)
    z_size: int = Field(3, gt=1)
    k_list: List[int] = Field(default_factory=lambda: [1, 2, 3])
    substitution_k: List[int] = Field(default_factory=lambda: [1, 2, 4])
    ordering_models: int = Field(20, gt=0)
    ordering_k: int = Field(3, ge=1)
    grid_points: int = Field(200, gt=0)
    dirichlet_alpha: float = Field(1.0, gt=0.0)
    tolerance: float = Field(1e-10, gt=0.0)


class SNRConfig(StrictModel):
    k_list: List[int] = Field(default_factory=lambda: [1, 4, 16, 64])
    n_repeats: int = Field(1000, ge=30)
    replicates: int = Field(5, ge=1)
    data_dim: int = Field(2, gt=0)
    perturbation: float = Field(0.01, ge=0.0)


class ExperimentConfig(StrictModel):
    model: ModelConfig = Field(default_factory=ModelConfig)
    objective: ObjectiveSpec = Field(default_factory=ObjectiveSpec)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    biophys: BiophysParams = Field(default_factory=BiophysParams)
    simulation: SimulationConfig = Field(default_factory=SimulationConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)
    theory: TheoryConfig = Field(default_factory=TheoryConfig)
    snr: SNRConfig = Field(default_factory=SNRConfig)


class RunConfig(StrictModel):
    subcommand: Literal["simulate", "train", "infer", "eval", "verify-theory", "snr"]
    config_path: Optional[str] = None
    output_dir: str
    seed: Optional[int] = None
    overrides: List[str] = Field(default_factory=list)


# flat key=value files

def _parse_value(raw: str) -> Any:
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        pass
    if "," in raw:
        return [item.strip() for item in raw.split(",") if item.strip()]
    return raw


def _assign(tree: Dict[str, Any], dotted: str, raw: str) -> None:
    parts = dotted.split(".")
    if len(parts) < 2:
        raise ConfigurationError(f"override '{dotted}' must be written section.key=value", key=dotted)
    node = tree
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigurationError(f"'{dotted}' addresses a value, not a section", key=dotted)
    node[parts[-1]] = _parse_value(raw)


def _validation_key(error: ValidationError) -> str:
    first = error.errors()[0]
    return ".".join(str(part) for part in first["loc"])


def build_experiment_config(tree: Dict[str, Any]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(tree)
    except ValidationError as e:
        key = _validation_key(e)
        reason = e.errors()[0]["msg"]
        raise ConfigurationError(f"invalid configuration key '{key}': {reason}", key=key) from None


def load_experiment_config(path: Optional[str] = None, overrides: Sequence[str] = ()) -> ExperimentConfig:
    """Reads a sectioned key=value file, applies dotted overrides, validates."""
    tree: Dict[str, Any] = {}
    if path is not None:
        if not Path(path).is_file():
            raise FileNotFoundError(f"configuration file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as e:
            raise ConfigurationError(f"malformed configuration file {path}: {e}") from None
        for section in parser.sections():
            for key, raw in parser.items(section):
                _assign(tree, f"{section}.{key}", raw)
    for override in overrides:
        if "=" not in override:
            raise ConfigurationError(f"override '{override}' must be written section.key=value", key=override)
        dotted, raw = override.split("=", 1)
        _assign(tree, dotted.strip(), raw)
    return build_experiment_config(tree)


def _render_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return json.dumps(list(value))
    if value is None:
        return "null"
    if isinstance(value, str):
        return json.dumps(value)
    return repr(value)


def _flatten(prefix: str, data: Dict[str, Any], lines: List[str]) -> None:
    for key, value in data.items():
        if isinstance(value, dict):
            _flatten(f"{prefix}{key}.", value, lines)
        else:
            lines.append(f"{prefix}{key} = {_render_value(value)}")


def render_experiment_config(config: ExperimentConfig) -> str:
    """Canonical sectioned rendering; reloading it yields an equal config."""
    blocks = []
    for section, values in config.model_dump().items():
        lines: List[str] = []
        _flatten("", values, lines)
        blocks.append("\n".join([f"[{section}]"] + lines))
    return "\n\n".join(blocks) + "\n"


def config_hash(config: ExperimentConfig) -> str:
    return hashlib.sha256(render_experiment_config(config).encode("utf-8")).hexdigest()[:12]
