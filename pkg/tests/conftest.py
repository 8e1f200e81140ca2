import numpy as np
# noinspection PyPackageRequirements
import pytest

from configuration import ArchitectureConfig, ExperimentConfig, build_experiment_config
from networks import DenseEncoder, GaussianDecoder, ModelTriple, StandardNormalPrior, build_model_triple
from tensor import RandomSource


@pytest.fixture
def rng():
    """A fresh seeded random stream per test."""
    return RandomSource(1234)


@pytest.fixture
def small_architecture():
    """Architecture small enough for finite differences and short training runs."""
    return ArchitectureConfig(
        conv_widths=[5, 3],
        conv_filters=[4, 3],
        hidden_widths=[8],
        latent_dim=2,
        noise_dim=2,
        noise_layers=[0],
        discriminator_hidden=[8],
        discriminator_widths=[3],
        discriminator_filters=[4],
        ar_window=4,
        ar_hidden=5,
    )


@pytest.fixture
def make_config(small_architecture):
    """Builds an ExperimentConfig from a problem, a family and optional section overrides."""

    def factory(problem: str = "gaussian", family: str = "iwae", k: int = 4, data_dim: int = 2, **sections) -> ExperimentConfig:
        tree = {
            "model": {"problem": problem, "data_dim": data_dim, "architecture": small_architecture.model_dump()},
            "objective": {"family": family, "k": k},
            "training": {"batch_size": 4, "max_steps": 5},
        }
        for section, values in sections.items():
            tree.setdefault(section, {}).update(values)
        return build_experiment_config(tree)

    return factory


@pytest.fixture
def make_model(make_config):
    def factory(problem: str = "gaussian", family: str = "iwae", seed: int = 0, **kwargs):
        config = make_config(problem, family, **kwargs)
        return build_model_triple(config, RandomSource(seed)), config

    return factory


@pytest.fixture
def scalar_gaussian_model():
    """
    p(z)=N(0,1) and p(x|z)=N(z,1), so log p(x) is N(0, 2). The encoder
    q(z|x)=N(slope·x, variance) defaults to the exact posterior N(x/2, 1/2).
    """

    def factory(slope: float = 0.5, variance: float = 0.5, discriminator=None) -> ModelTriple:
        generator = GaussianDecoder(1, 1, RandomSource(0))
        decoder_params = generator.named_parameters()
        decoder_params["out.weight"].values = np.ones((1, 1))
        decoder_params["out.bias"].values = np.zeros(1)
        encoder = DenseEncoder(1, ArchitectureConfig(hidden_widths=[], latent_dim=1), RandomSource(0))
        encoder_params = encoder.named_parameters()
        encoder_params["mean.weight"].values = np.full((1, 1), slope)
        encoder_params["mean.bias"].values = np.zeros(1)
        encoder_params["log_scale.weight"].values = np.zeros((1, 1))
        encoder_params["log_scale.bias"].values = np.full(1, 0.5 * np.log(variance))
        return ModelTriple(generator, encoder, StandardNormalPrior(1), discriminator)

    return factory


@pytest.fixture
def trace_batch(rng):
    """Two short fluorescence-like traces."""
    return 0.2 * rng.gaussian((2, 24)) + np.linspace(0.0, 1.0, 24)


@pytest.fixture(autouse=True)
def quiet_business_logger(mocker):
    """The session log is a process-wide sqlite sink; tests never write to it."""
    mocker.patch("agents.base_agent.sqlite_business_logger")
    mocker.patch("experiment_runner.sqlite_business_logger")
