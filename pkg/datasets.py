"""
Synthetic data for the vector problems: samples of a linear-Gaussian model
(with its closed-form marginal) and noisy binary patterns.
"""
from typing import Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy import stats

from configuration import ExperimentConfig
from errors import ConfigurationError, ShapeMismatchError
from logger import logger
from networks import GaussianDecoder, ModelTriple
from tensor import RandomSource


class LinearGaussianData(BaseModel):
    """x = z W + b + σ ε with z, ε standard normal."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    weight: np.ndarray
    bias: np.ndarray
    noise_std: float
    train: np.ndarray
    test: np.ndarray

    def log_marginal(self, x) -> np.ndarray:
        return linear_gaussian_log_marginal(x, self.weight, self.bias, self.noise_std)


def linear_gaussian_log_marginal(x, weight: np.ndarray, bias: np.ndarray, noise_std: float) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != bias.size:
        raise ShapeMismatchError(f"data of dimension {x.shape[1]} against a model of dimension {bias.size}")
    cov = weight.T @ weight + noise_std ** 2 * np.eye(bias.size)
    return np.atleast_1d(stats.multivariate_normal(mean=bias, cov=cov).logpdf(x))


def linear_gaussian_data(n_train: int, n_test: int, data_dim: int, latent_dim: int, rng: RandomSource,
                         noise_std: float = 1.0) -> LinearGaussianData:
    weight = rng.gaussian((latent_dim, data_dim))
    bias = rng.gaussian(data_dim)

    def draw(n: int) -> np.ndarray:
        return rng.gaussian((n, latent_dim)) @ weight + bias + noise_std * rng.gaussian((n, data_dim))

    return LinearGaussianData(weight=weight, bias=bias, noise_std=noise_std, train=draw(n_train), test=draw(n_test))


def binary_patterns(n: int, data_dim: int, rng: RandomSource, prototypes: int = 4, flip_probability: float = 0.05,
                    templates: np.ndarray = None) -> Tuple[np.ndarray, np.ndarray]:
    """Each datum copies a random prototype and flips every bit with ``flip_probability``."""
    if templates is None:
        templates = rng.bernoulli(np.full((prototypes, data_dim), 0.5))
    labels = rng.integers(templates.shape[0], n)
    flips = rng.bernoulli(np.full((n, data_dim), flip_probability))
    return np.abs(templates[labels] - flips), templates


def plant_linear_gaussian(model: ModelTriple, data: LinearGaussianData, perturbation: float = 0.0,
                          rng: RandomSource = None) -> None:
    """Sets a linear Gaussian decoder to the data-generating parameters, optionally jittered."""
    generator = model.generator
    if not isinstance(generator, GaussianDecoder) or generator.hidden:
        raise ConfigurationError("planting needs a linear Gaussian decoder", key="model.problem")
    weight, bias = data.weight.copy(), data.bias.copy()
    if perturbation > 0.0:
        weight += perturbation * rng.gaussian(weight.shape)
        bias += perturbation * rng.gaussian(bias.shape)
    params = generator.named_parameters()
    params["out.weight"].values = weight
    params["out.bias"].values = bias
    params["log_sigma"].values = np.full(bias.size, np.log(data.noise_std))


def vector_dataset(config: ExperimentConfig):
    """Train/test arrays for the configured vector problem, reproducible from ``simulation.seed``."""
    sim, model = config.simulation, config.model
    rng = RandomSource([sim.seed, 1])
    if model.problem == "gaussian":
        data = linear_gaussian_data(sim.samples, sim.test_samples, model.data_dim, model.architecture.latent_dim, rng)
        logger.info(f"Drew {sim.samples}+{sim.test_samples} linear-Gaussian points of dimension {model.data_dim}")
        return data.train, data.test, data
    if model.problem == "images":
        train, templates = binary_patterns(sim.samples, model.data_dim, rng, sim.prototypes, sim.flip_probability)
        test, _ = binary_patterns(sim.test_samples, model.data_dim, rng, flip_probability=sim.flip_probability,
                                  templates=templates)
        logger.info(f"Drew {sim.samples}+{sim.test_samples} binary patterns of {model.data_dim} pixels")
        return train, test, None
    raise ConfigurationError(f"'{model.problem}' data come from trace files, not the vector generator",
                             key="model.problem")
