"""
Parametric models: inference networks (encoders), generators, priors and
discriminators, plus the checkpoint container used to persist their weights.

Every network is a ``Module`` holding named ``Tensor`` parameters. Forward
passes are plain method calls on batches; latent samples are produced from an
explicit noise array so that a pass is deterministic given (x, ε, weights).
"""
import json
import math
import struct
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
from scipy import special

import tensor as T
from configuration import ArchitectureConfig, BiophysParams, ExperimentConfig
from errors import (CheckpointFormatError, ConfigurationError, ModeMismatchError, NumericDomainError,
                    ShapeMismatchError, TractabilityError)
from logger import logger
from spikesim import gaussian_trace_log_likelihood
from tensor import RandomSource, Tensor

_LOG_2PI = math.log(2.0 * math.pi)
_ACTIVATIONS = {"relu": T.relu, "tanh": T.tanh}


class Module:
    """Container of named parameters and child modules."""

    def __init__(self):
        self._parameters: Dict[str, Tensor] = {}
        self._modules: Dict[str, "Module"] = {}
        self._frozen = False

    def register(self, name: str, values, trainable: bool = True) -> Tensor:
        param = Tensor(values, requires_grad=trainable, name=name)
        self._parameters[name] = param
        return param

    def child(self, name: str, module: "Module") -> "Module":
        self._modules[name] = module
        return module

    def use(self, name: str) -> Tensor:
        """The parameter as seen by a forward pass; detached while frozen."""
        param = self._parameters[name]
        return param.detach() if self._frozen else param

    def named_parameters(self, prefix: str = "") -> Dict[str, Tensor]:
        named = {f"{prefix}{name}": p for name, p in self._parameters.items()}
        for child_name, module in self._modules.items():
            named.update(module.named_parameters(f"{prefix}{child_name}."))
        return named

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())

    def trainable_parameters(self) -> List[Tensor]:
        return [p for p in self.parameters() if p.requires_grad]

    def _walk(self) -> Iterator["Module"]:
        yield self
        for module in self._modules.values():
            yield from module._walk()

    @contextmanager
    def frozen(self):
        """Parameters enter forward passes as constants (stop-gradient on this module)."""
        modules = list(self._walk())
        previous = [m._frozen for m in modules]
        for m in modules:
            m._frozen = True
        try:
            yield self
        finally:
            for m, flag in zip(modules, previous):
                m._frozen = flag

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.values.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters().items():
            if name not in state:
                raise CheckpointFormatError(f"missing parameter '{name}'", field=name)
            values = np.asarray(state[name], dtype=np.float64)
            if values.shape != p.shape:
                raise ShapeMismatchError(f"parameter '{name}': stored shape {values.shape}, expected {p.shape}")
            p.values = values.copy()


# layers

def _fan_in_uniform(rng: RandomSource, shape, fan_in: int) -> np.ndarray:
    scale = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(shape, -scale, scale)


class Dense(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: RandomSource):
        super().__init__()
        self.fan_in, self.fan_out = fan_in, fan_out
        self.register("weight", _fan_in_uniform(rng, (fan_in, fan_out), fan_in))
        self.register("bias", np.zeros(fan_out))

    def __call__(self, h) -> Tensor:
        return T.matmul(h, self.use("weight")) + self.use("bias")


class Conv1d(Module):
    def __init__(self, in_channels: int, out_channels: int, width: int, rng: RandomSource):
        super().__init__()
        self.register("weight", _fan_in_uniform(rng, (out_channels, in_channels, width), in_channels * width))
        self.register("bias", np.zeros(out_channels))

    def __call__(self, x) -> Tensor:
        return T.conv1d(x, self.use("weight"), self.use("bias"))


def bernoulli_log_prob(logits: Tensor, values: np.ndarray) -> Tensor:
    """Σ over the last axis of log Bernoulli(values | σ(logits))."""
    values = np.asarray(values, dtype=np.float64)
    return T.tensor_sum(values * T.log_sigmoid(logits) + (1.0 - values) * T.log_sigmoid(-logits), axis=-1)


def _check_noise(name: str, eps: np.ndarray, expected: Tuple[int, ...]) -> np.ndarray:
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != tuple(expected):
        raise ShapeMismatchError(f"{name}: noise shape {eps.shape} does not match expected {tuple(expected)}")
    return eps


# inference networks

class PosteriorSample:
    """One batch of posterior draws: z (differentiable), per-datum log q when tractable."""

    __slots__ = ("z", "probs", "log_q", "evaluations")

    def __init__(self, z: Tensor, probs: Optional[Tensor] = None, log_q: Optional[Tensor] = None, evaluations: int = 1):
        self.z = z
        self.probs = probs
        self.log_q = log_q
        self.evaluations = evaluations


class InferenceNetwork(Module):
    head: str = "gaussian"
    noise_injection: bool = False

    @property
    def tractable(self) -> bool:
        return self.head != "implicit" and not self.noise_injection

    @property
    def discrete(self) -> bool:
        return self.head == "bernoulli"

    def noise_shape(self, x_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        raise NotImplementedError

    def draw_noise(self, rng: RandomSource, x_shape: Tuple[int, ...]) -> np.ndarray:
        raise NotImplementedError

    def sample(self, x, eps: np.ndarray) -> PosteriorSample:
        raise NotImplementedError

    def log_prob(self, x, z) -> Tensor:
        raise NotImplementedError

    def require_tractable(self, operation: str) -> None:
        if not self.tractable:
            raise TractabilityError(f"{operation} requires tractable q (this encoder is implicit)")


class DenseEncoder(InferenceNetwork):
    """MLP encoder for vector data with a Gaussian or an implicit (noise-injected) head."""

    def __init__(self, input_dim: int, architecture: ArchitectureConfig, rng: RandomSource, head: str = "gaussian"):
        super().__init__()
        if head not in ("gaussian", "implicit"):
            raise ConfigurationError(f"dense encoders support gaussian or implicit heads, got '{head}'", key="head")
        self.head = head
        self.noise_injection = head == "implicit"
        self.input_dim = input_dim
        self.latent_dim = architecture.latent_dim
        self.noise_dim = architecture.noise_dim
        self.activation = _ACTIVATIONS[architecture.activation]
        self.noise_sites = set(architecture.noise_layers) if self.noise_injection else set()

        self.hidden: List[Dense] = []
        fan = input_dim
        for i, width in enumerate(architecture.hidden_widths):
            extra = self.noise_dim if i in self.noise_sites else 0
            self.hidden.append(self.child(f"hidden{i}", Dense(fan + extra, width, rng)))
            fan = width
        out_index = len(self.hidden)
        if self.noise_injection:
            extra = self.noise_dim if out_index in self.noise_sites else 0
            self.output = self.child("output", Dense(fan + extra, self.latent_dim, rng))
        else:
            self.mean = self.child("mean", Dense(fan, self.latent_dim, rng))
            self.log_scale = self.child("log_scale", Dense(fan, self.latent_dim, rng))

    def noise_shape(self, x_shape):
        return (x_shape[0], self.noise_dim if self.noise_injection else self.latent_dim)

    def draw_noise(self, rng, x_shape):
        return rng.gaussian(self.noise_shape(x_shape))

    def _features(self, x, eps: Optional[np.ndarray]) -> Tensor:
        h = T.as_tensor(x)
        for i, layer in enumerate(self.hidden):
            if i in self.noise_sites:
                h = T.concat([h, eps], axis=-1)
            h = self.activation(layer(h))
        if len(self.hidden) in self.noise_sites:
            h = T.concat([h, eps], axis=-1)
        return h

    def gaussian_stats(self, x) -> Tuple[Tensor, Tensor]:
        if self.head != "gaussian":
            raise TractabilityError("gaussian_stats requires a Gaussian head")
        h = self._features(x, None)
        return self.mean(h), self.log_scale(h)

    def sample(self, x, eps) -> PosteriorSample:
        x = T.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeMismatchError(f"DenseEncoder: input shape {x.shape}, expected (N, {self.input_dim})")
        eps = _check_noise("DenseEncoder", eps, self.noise_shape(x.shape))
        if self.noise_injection:
            return PosteriorSample(self.output(self._features(x, eps)))
        mu, log_sigma = self.gaussian_stats(x)
        z = mu + T.exp(log_sigma) * eps
        log_q = T.tensor_sum(-0.5 * eps * eps - log_sigma - 0.5 * _LOG_2PI, axis=-1)
        return PosteriorSample(z, log_q=log_q)

    def log_prob(self, x, z) -> Tensor:
        self.require_tractable("log_prob")
        mu, log_sigma = self.gaussian_stats(x)
        standardized = (z - mu) * T.exp(-log_sigma)
        return T.tensor_sum(-0.5 * T.square(standardized) - log_sigma - 0.5 * _LOG_2PI, axis=-1)


class _ConvStack(Module):
    """Same-length 1-D conv layers with optional noise channels on chosen layers."""

    def __init__(self, in_channels: int, architecture: ArchitectureConfig, rng: RandomSource, noise_sites):
        super().__init__()
        self.activation = _ACTIVATIONS[architecture.activation]
        self.noise_sites = set(noise_sites)
        self.layers: List[Conv1d] = []
        channels = in_channels
        for i, (width, filters) in enumerate(zip(architecture.conv_widths, architecture.conv_filters)):
            extra = architecture.noise_channels if i in self.noise_sites else 0
            self.layers.append(self.child(f"conv{i}", Conv1d(channels + extra, filters, width, rng)))
            channels = filters
        self.out_channels = channels

    def __call__(self, h: Tensor, noise: Optional[np.ndarray] = None) -> Tensor:
        for i, layer in enumerate(self.layers):
            if i in self.noise_sites:
                h = T.concat([h, noise], axis=1)
            h = self.activation(layer(h))
        return h


def _as_trace_batch(name: str, x) -> Tensor:
    x = T.as_tensor(x)
    if x.ndim != 2:
        raise ShapeMismatchError(f"{name}: expected traces of shape (N, frames), got {x.shape}")
    return x


class ConvSpikeEncoder(InferenceNetwork):
    """
    Convolutional spike encoder with per-frame Bernoulli outputs.

    Noise layout ``(N, 1 + noise_channels, T)``: channel 0 holds the uniform
    draws that threshold the spike probabilities, the remaining channels are
    Gaussian noise concatenated to the layers in ``noise_layers`` when noise
    injection is enabled.
    """

    head = "bernoulli"

    def __init__(self, architecture: ArchitectureConfig, rng: RandomSource, noise_injection: bool = False,
                 threshold: str = "stochastic"):
        super().__init__()
        self.noise_injection = noise_injection
        self.threshold = threshold
        self.noise_channels = architecture.noise_channels if noise_injection else 0
        sites = architecture.noise_layers if noise_injection else []
        self.stack = self.child("stack", _ConvStack(1, architecture, rng, sites))
        self.readout = self.child("readout", Conv1d(self.stack.out_channels, 1, 1, rng))

    def noise_shape(self, x_shape):
        return (x_shape[0], 1 + self.noise_channels, x_shape[-1])

    def draw_noise(self, rng, x_shape):
        n, length = x_shape[0], x_shape[-1]
        eps = np.empty(self.noise_shape(x_shape))
        eps[:, 0, :] = rng.uniform((n, length))
        if self.noise_channels:
            eps[:, 1:, :] = rng.gaussian((n, self.noise_channels, length))
        return eps

    def logits(self, x, noise: Optional[np.ndarray] = None) -> Tensor:
        x = _as_trace_batch("ConvSpikeEncoder", x)
        n, length = x.shape
        h = self.stack(T.reshape(x, (n, 1, length)), noise)
        return T.reshape(self.readout(h), (n, length))

    def _hard(self, probs: np.ndarray, uniform: np.ndarray) -> np.ndarray:
        if self.threshold == "fixed":
            return (probs > 0.5).astype(np.float64)
        return (uniform < probs).astype(np.float64)

    def sample(self, x, eps) -> PosteriorSample:
        x = _as_trace_batch("ConvSpikeEncoder", x)
        eps = _check_noise("ConvSpikeEncoder", eps, self.noise_shape(x.shape))
        logits = self.logits(x, eps[:, 1:, :] if self.noise_channels else None)
        probs = T.sigmoid(logits)
        hard = self._hard(probs.values, eps[:, 0, :])
        log_q = bernoulli_log_prob(logits, hard) if self.tractable else None
        return PosteriorSample(T.straight_through(hard, probs), probs=probs, log_q=log_q)

    def log_prob(self, x, z) -> Tensor:
        self.require_tractable("log_prob")
        return bernoulli_log_prob(self.logits(x), T.as_tensor(z).values)


class AutoregressiveSpikeEncoder(InferenceNetwork):
    """
    Spike encoder whose per-frame probability also sees the previous
    ``ar_window`` sampled spikes. Densities of a given spike train take one
    parallel pass; sampling runs frame by frame.
    """

    head = "bernoulli"

    def __init__(self, architecture: ArchitectureConfig, rng: RandomSource, threshold: str = "stochastic"):
        super().__init__()
        self.window = architecture.ar_window
        self.threshold = threshold
        self.stack = self.child("stack", _ConvStack(1, architecture, rng, []))
        self.feature_proj = self.child("feature_proj", Dense(self.stack.out_channels, architecture.ar_hidden, rng))
        self.history_proj = self.child("history_proj", Dense(self.window, architecture.ar_hidden, rng))
        self.readout = self.child("readout", Dense(architecture.ar_hidden, 1, rng))

    def noise_shape(self, x_shape):
        return (x_shape[0], 1, x_shape[-1])

    def draw_noise(self, rng, x_shape):
        return rng.uniform(self.noise_shape(x_shape))

    def history(self, spikes: np.ndarray) -> np.ndarray:
        """(N, T) spikes → (N, T, W) with entry [n, t, j] = s[n, t-1-j], zero before the start."""
        n, length = spikes.shape
        hist = np.zeros((n, length, self.window))
        for j in range(self.window):
            lag = j + 1
            if lag < length:
                hist[:, lag:, j] = spikes[:, :length - lag]
        return hist

    def _projected_features(self, x: Tensor) -> Tensor:
        n, length = x.shape
        feats = self.stack(T.reshape(x, (n, 1, length)))
        return self.feature_proj(T.transpose(feats, (0, 2, 1)))

    def logits(self, x, spikes) -> Tensor:
        x = _as_trace_batch("AutoregressiveSpikeEncoder", x)
        spikes = T.as_tensor(spikes).values
        hidden = T.relu(self._projected_features(x) + self.history_proj(self.history(spikes)))
        return T.reshape(self.readout(hidden), x.shape)

    def sample_sequential(self, x, uniform: np.ndarray) -> Tuple[np.ndarray, int]:
        """Frame-by-frame hard samples; returns (spikes, network evaluations)."""
        x = _as_trace_batch("AutoregressiveSpikeEncoder", x)
        n, length = x.shape
        spikes = np.zeros((n, length))
        evaluations = 0
        with T.no_grad():
            projected = self._projected_features(x).values
            for t in range(length):
                window = np.zeros((n, self.window))
                past = spikes[:, max(0, t - self.window):t][:, ::-1]
                window[:, :past.shape[1]] = past
                hidden = T.relu(projected[:, t, :] + self.history_proj(window))
                prob = special.expit(self.readout(hidden).values[:, 0])
                if self.threshold == "fixed":
                    spikes[:, t] = prob > 0.5
                else:
                    spikes[:, t] = uniform[:, t] < prob
                evaluations += 1
        return spikes, evaluations

    def sample(self, x, eps) -> PosteriorSample:
        x = _as_trace_batch("AutoregressiveSpikeEncoder", x)
        eps = _check_noise("AutoregressiveSpikeEncoder", eps, self.noise_shape(x.shape))
        hard, evaluations = self.sample_sequential(x, eps[:, 0, :])
        logits = self.logits(x, hard)
        probs = T.sigmoid(logits)
        return PosteriorSample(T.straight_through(hard, probs), probs=probs,
                               log_q=bernoulli_log_prob(logits, hard), evaluations=evaluations)

    def log_prob(self, x, z) -> Tensor:
        z = T.as_tensor(z).values
        return bernoulli_log_prob(self.logits(x, z), z)


def sample_posterior(enc: InferenceNetwork, x, eps) -> Tensor:
    return enc.sample(x, eps).z


# generators

class Generator(Module):
    def log_likelihood(self, x, z) -> Tensor:
        """Per-datum log p(x|z), shape (N,)."""
        raise NotImplementedError


class GaussianDecoder(Generator):
    """x | z ~ N(W z + b, diag σ²) with an optional hidden MLP in front."""

    def __init__(self, latent_dim: int, data_dim: int, rng: RandomSource, hidden_widths=(), activation: str = "relu",
                 noise_std: float = 1.0, learn_noise: bool = False):
        super().__init__()
        self.data_dim = data_dim
        self.activation = _ACTIVATIONS[activation]
        self.hidden: List[Dense] = []
        fan = latent_dim
        for i, width in enumerate(hidden_widths):
            self.hidden.append(self.child(f"hidden{i}", Dense(fan, width, rng)))
            fan = width
        self.out = self.child("out", Dense(fan, data_dim, rng))
        self.register("log_sigma", np.full(data_dim, math.log(noise_std)), trainable=learn_noise)

    def mean(self, z) -> Tensor:
        h = T.as_tensor(z)
        for layer in self.hidden:
            h = self.activation(layer(h))
        return self.out(h)

    def log_likelihood(self, x, z) -> Tensor:
        log_sigma = self.use("log_sigma")
        standardized = (T.as_tensor(x) - self.mean(z)) * T.exp(-log_sigma)
        return T.tensor_sum(-0.5 * T.square(standardized) - log_sigma - 0.5 * _LOG_2PI, axis=-1)


class BernoulliDecoder(Generator):
    """Independent Bernoulli pixels from an MLP on z."""

    def __init__(self, latent_dim: int, data_dim: int, architecture: ArchitectureConfig, rng: RandomSource):
        super().__init__()
        self.data_dim = data_dim
        self.activation = _ACTIVATIONS[architecture.activation]
        self.hidden: List[Dense] = []
        fan = latent_dim
        for i, width in enumerate(architecture.hidden_widths):
            self.hidden.append(self.child(f"hidden{i}", Dense(fan, width, rng)))
            fan = width
        self.out = self.child("out", Dense(fan, data_dim, rng))

    def logits(self, z) -> Tensor:
        h = T.as_tensor(z)
        for layer in self.hidden:
            h = self.activation(layer(h))
        return self.out(h)

    def log_likelihood(self, x, z) -> Tensor:
        return bernoulli_log_prob(self.logits(z), T.as_tensor(x).values)


class BiophysicalGenerator(Generator):
    """Calcium trace model; (α, β, log σ, decay logit) frozen or trainable."""

    def __init__(self, params: BiophysParams, learnable: bool = False):
        super().__init__()
        if params.sigma == 0.0:
            raise NumericDomainError("BiophysicalGenerator needs sigma > 0; a zero-noise trace has no density")
        self.delta = params.delta
        self.rate = params.rate
        self.register("alpha", np.array(params.alpha), trainable=learnable)
        self.register("beta", np.array(params.beta), trainable=learnable)
        self.register("log_sigma", np.array(math.log(params.sigma)), trainable=learnable)
        self.register("decay_logit", np.array(special.logit(params.decay)), trainable=learnable)

    def decay(self) -> Tensor:
        return T.sigmoid(self.use("decay_logit"))

    def biophys_params(self) -> BiophysParams:
        gamma = float(special.expit(self._parameters["decay_logit"].values))
        return BiophysParams(tau=self.delta / (1.0 - gamma), alpha=float(self._parameters["alpha"].values),
                             beta=float(self._parameters["beta"].values),
                             sigma=float(np.exp(self._parameters["log_sigma"].values)),
                             delta=self.delta, rate=self.rate)

    def log_likelihood(self, x, z) -> Tensor:
        return gaussian_trace_log_likelihood(x, z, self.use("alpha"), self.use("beta"),
                                             T.exp(self.use("log_sigma")), self.decay())


def decode_log_likelihood(gen: Generator, x, z) -> Tensor:
    """log p(x|z) per datum; non-finite values abort with the offending rows."""
    ll = gen.log_likelihood(x, z)
    bad = np.flatnonzero(~np.isfinite(ll.values))
    if bad.size:
        raise NumericDomainError(f"non-finite log-likelihood for {bad.size} datum(s), first rows {bad[:5].tolist()}")
    return ll


# priors

class StandardNormalPrior:
    def __init__(self, dim: int):
        self.dim = dim

    def latent_shape(self, n: int, x_shape=None) -> Tuple[int, ...]:
        return (n, self.dim)

    def log_prob(self, z) -> Tensor:
        return T.tensor_sum(-0.5 * T.square(z) - 0.5 * _LOG_2PI, axis=-1)

    def sample(self, rng: RandomSource, shape) -> np.ndarray:
        return rng.gaussian(shape)


class BernoulliPrior:
    """Independent Bernoulli(rate) per frame."""

    def __init__(self, rate: float):
        self.rate = rate

    def latent_shape(self, n: int, x_shape=None) -> Tuple[int, ...]:
        return (n, x_shape[-1])

    def log_prob(self, z) -> Tensor:
        if not 0.0 < self.rate < 1.0:
            raise NumericDomainError(f"Bernoulli prior density needs 0 < rate < 1, got {self.rate}")
        log_odds = math.log(self.rate) - math.log1p(-self.rate)
        z = T.as_tensor(z)
        return T.tensor_sum(z * log_odds, axis=-1) + z.shape[-1] * math.log1p(-self.rate)

    def sample(self, rng: RandomSource, shape) -> np.ndarray:
        return rng.bernoulli(self.rate, shape)


# discriminators

class Discriminator(Module):
    """Real-valued logit T(x, z) (joint mode) or T(z) (latent-only mode)."""

    def __init__(self, mode: str):
        super().__init__()
        if mode not in ("joint", "latent-only"):
            raise ModeMismatchError(f"unknown discriminator mode '{mode}'")
        self.mode = mode

    def logit(self, x, z) -> Tensor:
        raise NotImplementedError


class DenseDiscriminator(Discriminator):
    def __init__(self, mode: str, x_dim: int, z_dim: int, architecture: ArchitectureConfig, rng: RandomSource):
        super().__init__(mode)
        self.activation = _ACTIVATIONS[architecture.discriminator_activation]
        fan = z_dim + (x_dim if mode == "joint" else 0)
        self.hidden: List[Dense] = []
        for i, width in enumerate(architecture.discriminator_hidden):
            self.hidden.append(self.child(f"hidden{i}", Dense(fan, width, rng)))
            fan = width
        self.out = self.child("out", Dense(fan, 1, rng))

    def logit(self, x, z) -> Tensor:
        z = T.as_tensor(z)
        h = T.concat([x, z], axis=-1) if self.mode == "joint" else z
        for layer in self.hidden:
            h = self.activation(layer(h))
        return T.reshape(self.out(h), (z.shape[0],))


class ConvDiscriminator(Discriminator):
    """Per-frame conv logits summed over frames; inputs are stacked (trace, spikes) channels."""

    def __init__(self, mode: str, architecture: ArchitectureConfig, rng: RandomSource):
        super().__init__(mode)
        self.activation = _ACTIVATIONS[architecture.discriminator_activation]
        channels = 2 if mode == "joint" else 1
        self.layers: List[Conv1d] = []
        for i, (width, filters) in enumerate(zip(architecture.discriminator_widths, architecture.discriminator_filters)):
            self.layers.append(self.child(f"conv{i}", Conv1d(channels, filters, width, rng)))
            channels = filters
        self.readout = self.child("readout", Conv1d(channels, 1, 1, rng))

    def logit(self, x, z) -> Tensor:
        z = T.as_tensor(z)
        n, length = z.shape
        channels = [T.reshape(z, (n, 1, length))]
        if self.mode == "joint":
            channels.insert(0, T.reshape(x, (n, 1, length)))
        h = T.concat(channels, axis=1) if len(channels) > 1 else channels[0]
        for layer in self.layers:
            h = self.activation(layer(h))
        return T.tensor_sum(T.reshape(self.readout(h), (n, length)), axis=-1)


class AnalyticLogRatio(Discriminator):
    """
    Exact log-ratio in place of a trained discriminator. Joint mode returns
    log q(z|x) − log p(z); latent-only mode returns log q(z) − log p(z) with the
    aggregated posterior taken over a fixed reference batch of data.
    """

    def __init__(self, mode: str, encoder: InferenceNetwork, prior, reference_x=None):
        super().__init__(mode)
        encoder.require_tractable("AnalyticLogRatio")
        if mode == "latent-only" and reference_x is None:
            raise ModeMismatchError("latent-only analytic log-ratio needs reference data for the aggregated posterior")
        self.encoder = self.child("encoder", encoder)
        self.prior = prior
        self.reference_x = None if reference_x is None else np.asarray(reference_x, dtype=np.float64)

    def aggregated_log_density(self, z) -> Tensor:
        z = T.as_tensor(z)
        n, m = z.shape[0], self.reference_x.shape[0]
        z_rep = T.reshape(T.concat([T.reshape(z, (n, 1) + z.shape[1:])] * m, axis=1), (n * m,) + z.shape[1:])
        x_rep = np.tile(self.reference_x, (n,) + (1,) * (self.reference_x.ndim - 1))
        table = T.reshape(self.encoder.log_prob(x_rep, z_rep), (n, m))
        return T.logsumexp(table, axis=1) - math.log(m)

    def logit(self, x, z) -> Tensor:
        if self.mode == "joint":
            return self.encoder.log_prob(x, z) - self.prior.log_prob(z)
        return self.aggregated_log_density(z) - self.prior.log_prob(z)


def discriminate(disc: Discriminator, x, z) -> Tensor:
    """Per-datum logits; the supplied arguments must match the discriminator's mode."""
    if disc.mode == "latent-only" and x is not None:
        raise ModeMismatchError("latent-only discriminator does not accept an x argument")
    if disc.mode == "joint" and x is None:
        raise ModeMismatchError("joint discriminator needs both x and z")
    return disc.logit(x, z)


# model triple

class ModelTriple:
    """Generator, inference network, prior and (for adversarial families) a discriminator."""

    def __init__(self, generator: Generator, encoder: InferenceNetwork, prior, discriminator: Optional[Discriminator] = None,
                 problem: str = "gaussian"):
        self.generator = generator
        self.encoder = encoder
        self.prior = prior
        self.discriminator = discriminator
        self.problem = problem

    def networks(self) -> Dict[str, Module]:
        nets: Dict[str, Module] = {"generator": self.generator, "encoder": self.encoder}
        if self.discriminator is not None:
            nets["discriminator"] = self.discriminator
        return nets

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {}
        for net_name, net in self.networks().items():
            state.update({f"{net_name}.{k}": v for k, v in net.state_dict().items()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for net_name, net in self.networks().items():
            prefix = f"{net_name}."
            net.load_state_dict({k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)})


def build_model_triple(config: ExperimentConfig, rng: RandomSource) -> ModelTriple:
    model, objective = config.model, config.objective
    arch = model.architecture
    family = objective.family
    adversarial = objective.uses_discriminator
    vimco = family.startswith("vimco")

    if model.problem == "spikes":
        generator = BiophysicalGenerator(config.biophys, learnable=model.learn_biophys)
        prior = BernoulliPrior(config.biophys.rate)
        if family == "vimco-corr":
            encoder: InferenceNetwork = AutoregressiveSpikeEncoder(arch, rng, threshold=model.threshold)
        else:
            encoder = ConvSpikeEncoder(arch, rng, noise_injection=adversarial, threshold=model.threshold)
        discriminator = ConvDiscriminator(objective.discriminator_mode, arch, rng) if adversarial else None
    else:
        if vimco:
            raise ConfigurationError(f"{family} needs a discrete latent; use problem=spikes", key="objective.family")
        latent = arch.latent_dim
        if model.problem == "gaussian":
            generator = GaussianDecoder(latent, model.data_dim, rng)
        else:
            generator = BernoulliDecoder(latent, model.data_dim, arch, rng)
        prior = StandardNormalPrior(latent)
        encoder = DenseEncoder(model.data_dim, arch, rng, head="implicit" if adversarial else "gaussian")
        discriminator = (DenseDiscriminator(objective.discriminator_mode, model.data_dim, latent, arch, rng)
                         if adversarial else None)

    logger.info(f"Built {model.problem} model for {family} (k={objective.k}, "
                f"encoder={type(encoder).__name__}, discriminator={type(discriminator).__name__ if discriminator else 'none'})")
    return ModelTriple(generator, encoder, prior, discriminator, problem=model.problem)


# checkpoint container

CHECKPOINT_MAGIC = b"IWCK"
CHECKPOINT_VERSION = 1
_PREAMBLE = struct.Struct("<4sHQ")


def encode_checkpoint(header: Dict, arrays: Dict[str, np.ndarray]) -> bytes:
    """Magic, version, header length, JSON header, then the raw little-endian arrays in header order."""
    entries, blobs = [], []
    for name, array in arrays.items():
        array = np.ascontiguousarray(array)
        data = array.astype(array.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append({"name": name, "dtype": array.dtype.newbyteorder("<").str, "shape": list(array.shape),
                        "nbytes": len(data)})
        blobs.append(data)
    body = json.dumps({**header, "arrays": entries}, sort_keys=True).encode("utf-8")
    return _PREAMBLE.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(body)) + body + b"".join(blobs)


def decode_checkpoint(blob: bytes) -> Tuple[Dict, Dict[str, np.ndarray]]:
    if len(blob) < _PREAMBLE.size:
        raise CheckpointFormatError("file shorter than the checkpoint preamble", field="preamble")
    magic, version, header_len = _PREAMBLE.unpack_from(blob, 0)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}", field="magic")
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})",
                                    field="version")
    offset = _PREAMBLE.size
    if header_len > len(blob) - offset:
        raise CheckpointFormatError(f"header length {header_len} exceeds the {len(blob) - offset} remaining bytes",
                                    field="header_length")
    try:
        header = json.loads(blob[offset:offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"unreadable header: {e}", field="header") from None
    offset += header_len
    if "arrays" not in header:
        raise CheckpointFormatError("header has no array table", field="arrays")

    arrays: Dict[str, np.ndarray] = {}
    for entry in header.pop("arrays"):
        name, nbytes = entry["name"], entry["nbytes"]
        if offset + nbytes > len(blob):
            raise CheckpointFormatError(f"array '{name}' truncated ({len(blob) - offset} of {nbytes} bytes)", field=name)
        arrays[name] = np.frombuffer(blob, dtype=np.dtype(entry["dtype"]), count=int(np.prod(entry["shape"], dtype=int)),
                                     offset=offset).reshape(entry["shape"]).copy()
        offset += nbytes
    if offset != len(blob):
        raise CheckpointFormatError(f"{len(blob) - offset} trailing bytes after the last array", field="trailing")
    return header, arrays


def write_checkpoint(path, header: Dict, arrays: Dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(header, arrays))
    return path


def read_checkpoint(path) -> Tuple[Dict, Dict[str, np.ndarray]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes())
