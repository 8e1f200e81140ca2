"""
Training criteria.

All bounds are returned as batch-averaged scalar Tensors to be *maximized*.
Losses that involve a discriminator evaluate it under ``frozen()`` so no
gradient reaches its parameters; gradients still flow through z.
"""
import math
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy import special

import tensor as T
from configuration import ObjectiveSpec
from errors import ConfigurationError, ModeMismatchError, ShapeMismatchError, UndefinedStatisticError
from logger import logger
from networks import DenseEncoder, ModelTriple, PosteriorSample, StandardNormalPrior, decode_log_likelihood, discriminate
from tensor import RandomSource, Tensor


class _ArrayRecord(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)


class ImportanceWeights(_ArrayRecord):
    log_weights: np.ndarray
    normalized: np.ndarray


class SNREstimate(_ArrayRecord):
    label: str
    k: int
    estimates: np.ndarray
    ratio: np.ndarray
    median: float


def importance_weights(log_weights, axis: int = -1) -> ImportanceWeights:
    log_weights = np.asarray(log_weights, dtype=np.float64)
    return ImportanceWeights(log_weights=log_weights, normalized=special.softmax(log_weights, axis=axis))


class PosteriorDraw:
    """k posterior samples for each of N data points, rows ordered datum-major."""

    __slots__ = ("x", "x_rep", "sample", "n", "k")

    def __init__(self, x: np.ndarray, x_rep: np.ndarray, sample: PosteriorSample, k: int):
        self.x = x
        self.x_rep = x_rep
        self.sample = sample
        self.n = x.shape[0]
        self.k = k

    def per_datum(self, values: Tensor) -> Tensor:
        return T.reshape(values, (self.n, self.k))


def draw_posterior(model: ModelTriple, x, k: int, rng: RandomSource) -> PosteriorDraw:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2 or x.shape[0] == 0:
        raise ShapeMismatchError(f"expected a non-empty batch of data, got shape {x.shape}")
    if k < 1:
        raise ConfigurationError(f"k must be at least 1, got {k}", key="objective.k")
    x_rep = np.repeat(x, k, axis=0)
    eps = model.encoder.draw_noise(rng, x_rep.shape)
    return PosteriorDraw(x, x_rep, model.encoder.sample(x_rep, eps), k)


def _draw(model, x, k, rng, draw: Optional[PosteriorDraw]) -> PosteriorDraw:
    if draw is not None:
        if draw.k != k:
            raise ShapeMismatchError(f"posterior draw has k={draw.k}, loss asked for k={k}")
        return draw
    return draw_posterior(model, x, k, rng)


def _log_mean_exp(per_datum: Tensor) -> Tensor:
    return T.mean(T.logsumexp(per_datum, axis=1) - math.log(per_datum.shape[1]))


def _log_joint_weights(model: ModelTriple, d: PosteriorDraw, z: Tensor, log_q: Tensor) -> Tensor:
    ll = decode_log_likelihood(model.generator, d.x_rep, z)
    return d.per_datum(ll + model.prior.log_prob(z) - log_q)


# tractable bounds

def elbo(model: ModelTriple, x, k: int, rng: RandomSource, draw: Optional[PosteriorDraw] = None,
         analytic_kl: bool = False) -> Tensor:
    model.encoder.require_tractable("ELBO")
    d = _draw(model, x, k, rng, draw)
    if analytic_kl:
        return _elbo_analytic_kl(model, d)
    return T.mean(T.mean(_log_joint_weights(model, d, d.sample.z, d.sample.log_q), axis=1))


def _elbo_analytic_kl(model: ModelTriple, d: PosteriorDraw) -> Tensor:
    if not isinstance(model.encoder, DenseEncoder) or not isinstance(model.prior, StandardNormalPrior):
        raise ConfigurationError("analytic KL needs a Gaussian encoder and a standard normal prior",
                                 key="objective.analytic_kl")
    mu, log_sigma = model.encoder.gaussian_stats(d.x)
    kl = T.tensor_sum(0.5 * (T.square(mu) + T.exp(2.0 * log_sigma) - 1.0) - log_sigma, axis=-1)
    reconstruction = d.per_datum(decode_log_likelihood(model.generator, d.x_rep, d.sample.z))
    return T.mean(T.mean(reconstruction, axis=1) - kl)


def iwae_bound(model: ModelTriple, x, k: int, rng: RandomSource, draw: Optional[PosteriorDraw] = None) -> Tensor:
    model.encoder.require_tractable("IWAE bound")
    d = _draw(model, x, k, rng, draw)
    return _log_mean_exp(_log_joint_weights(model, d, d.sample.z, d.sample.log_q))


# discriminator

def discriminator_loss(disc, q_samples: Tuple, p_samples: Tuple) -> Tensor:
    """
    E_q[log σ(T)] + E_p[log(1 − σ(T))] on batches ``(x, z)``; ``x`` is None in
    latent-only mode.
    """
    (x_q, z_q), (x_p, z_p) = q_samples, p_samples
    if T.as_tensor(z_q).size == 0 or T.as_tensor(z_p).size == 0:
        raise ShapeMismatchError("discriminator loss needs non-empty q and p batches")
    t_q = discriminate(disc, x_q, z_q)
    t_p = discriminate(disc, x_p, z_p)
    return T.mean(T.log_sigmoid(t_q)) + T.mean(T.log_sigmoid(-t_p))


def _require_mode(model: ModelTriple, mode: str, operation: str) -> None:
    if model.discriminator is None or model.discriminator.mode != mode:
        found = "none" if model.discriminator is None else model.discriminator.mode
        raise ModeMismatchError(f"{operation} needs a {mode} discriminator, found {found}")


def discriminator_batches(model: ModelTriple, x, rng: RandomSource, samples_per_datum: int = 1) -> Tuple[Tuple, Tuple]:
    """
    Detached (q, p) batches for a discriminator update. Joint mode pairs each x
    with posterior and prior draws; latent-only mode draws one aggregated-posterior
    z per x (fresh noise) against the same number of prior draws.
    """
    x = np.asarray(x, dtype=np.float64)
    k = samples_per_datum if model.discriminator.mode == "joint" else 1
    with T.no_grad():
        d = draw_posterior(model, x, k, rng)
    z_q = d.sample.z.values
    z_p = model.prior.sample(rng, model.prior.latent_shape(z_q.shape[0], d.x_rep.shape))
    if model.discriminator.mode == "joint":
        return (d.x_rep, z_q), (d.x_rep, z_p)
    return (None, z_q), (None, z_p)


# adversarial families

def _adversarial_terms(model: ModelTriple, d: PosteriorDraw, z: Tensor) -> Tensor:
    ll = decode_log_likelihood(model.generator, d.x_rep, z)
    x_arg = d.x_rep if model.discriminator.mode == "joint" else None
    with model.discriminator.frozen():
        t = discriminate(model.discriminator, x_arg, z)
    return d.per_datum(ll - t)


def iwavb_generator_loss(model: ModelTriple, x, k: int, rng: RandomSource, draw: Optional[PosteriorDraw] = None,
                         phi_through_iw: bool = False) -> Tensor:
    """log (1/k) Σ_i exp(log p(x|z_i) − T(x, z_i)), averaged over the batch."""
    _require_mode(model, "joint", "IW-AVB generator loss")
    d = _draw(model, x, k, rng, draw)
    z = d.sample.z if phi_through_iw else d.sample.z.detach()
    return _log_mean_exp(_adversarial_terms(model, d, z))


def avb_inference_loss(model: ModelTriple, x, k: int, rng: RandomSource, draw: Optional[PosteriorDraw] = None,
                       single_sample: bool = False) -> Tensor:
    """(1/k) Σ_i [log p(x|z_i) − T(x, z_i)] with the generator held fixed."""
    _require_mode(model, "joint", "AVB inference loss")
    return _averaged_adversarial(model, x, k, rng, draw, single_sample)


def iwaae_generator_loss(model: ModelTriple, x, k: int, rng: RandomSource, draw: Optional[PosteriorDraw] = None,
                         phi_through_iw: bool = False) -> Tensor:
    _require_mode(model, "latent-only", "IW-AAE generator loss")
    d = _draw(model, x, k, rng, draw)
    z = d.sample.z if phi_through_iw else d.sample.z.detach()
    return _log_mean_exp(_adversarial_terms(model, d, z))


def aae_inference_loss(model: ModelTriple, x, k: int, rng: RandomSource, draw: Optional[PosteriorDraw] = None,
                       single_sample: bool = False) -> Tensor:
    _require_mode(model, "latent-only", "AAE inference loss")
    return _averaged_adversarial(model, x, k, rng, draw, single_sample)


def _averaged_adversarial(model, x, k, rng, draw, single_sample: bool) -> Tensor:
    d = _draw(model, x, k, rng, draw)
    with model.generator.frozen():
        terms = _adversarial_terms(model, d, d.sample.z)
    if single_sample:
        return T.mean(T.index(terms, (slice(None), 0)))
    return T.mean(T.mean(terms, axis=1))


# VIMCO

class VimcoGradient:
    __slots__ = ("value", "generator", "encoder")

    def __init__(self, value: float, generator: List[np.ndarray], encoder: List[np.ndarray]):
        self.value = value
        self.generator = generator
        self.encoder = encoder


def leave_one_out_baselines(log_w: np.ndarray) -> np.ndarray:
    """
    L̂ − L̂_{−i} per sample, where L̂_{−i} replaces log w_i by the mean of the
    other log-weights. ``log_w`` has shape (N, k) with k ≥ 2.
    """
    n, k = log_w.shape
    others_mean = (log_w.sum(axis=1, keepdims=True) - log_w) / (k - 1)
    full = special.logsumexp(log_w, axis=1, keepdims=True)
    signals = np.empty_like(log_w)
    for i in range(k):
        replaced = log_w.copy()
        replaced[:, i] = others_mean[:, i]
        signals[:, i] = full[:, 0] - special.logsumexp(replaced, axis=1)
    return signals


def vimco_surrogate(model: ModelTriple, x, k: int, rng: RandomSource, draw: Optional[PosteriorDraw] = None) -> Tuple[Tensor, float]:
    """
    Scalar whose θ-gradient is the IWAE gradient and whose φ-gradient is the
    multi-sample score-function estimator with leave-one-out control variates.
    Returns (surrogate, IWAE bound value).
    """
    if k < 2:
        raise ConfigurationError(f"VIMCO needs k >= 2 for its control variates, got {k}", key="objective.k")
    model.encoder.require_tractable("VIMCO")
    d = _draw(model, x, k, rng, draw)
    z = d.sample.z.detach()
    log_q = d.per_datum(d.sample.log_q)
    log_w = _log_joint_weights(model, d, z, d.sample.log_q)
    bound = _log_mean_exp(log_w)
    signals = leave_one_out_baselines(log_w.values)
    score = T.mean(T.tensor_sum(signals * log_q, axis=1))
    return bound + score, bound.item()


def vimco_gradient(model: ModelTriple, x, k: int, rng: RandomSource, draw: Optional[PosteriorDraw] = None) -> VimcoGradient:
    surrogate, value = vimco_surrogate(model, x, k, rng, draw)
    theta = model.generator.trainable_parameters()
    phi = model.encoder.trainable_parameters()
    grads = T.grad(surrogate, theta + phi)
    return VimcoGradient(value, grads[:len(theta)], grads[len(theta):])


# signal-to-noise ratio of gradient estimates

def _snr_ratio(estimates: np.ndarray) -> Tuple[np.ndarray, float]:
    mean = estimates.mean(axis=0)
    std = estimates.std(axis=0, ddof=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(std > 0.0, np.abs(mean) / np.where(std > 0.0, std, 1.0), np.inf)
    finite = ratio[np.isfinite(ratio)]
    return ratio, float(np.median(finite)) if finite.size else math.inf


def estimate_snr(model: ModelTriple, x, k: int, n_repeats: int, label: str, rng: RandomSource) -> SNREstimate:
    """
    |mean/std| per coordinate of the IWAE gradient w.r.t. the generator
    (``label='theta'``) or inference network (``label='phi'``) over independent
    sample sets, summarized by the median over coordinates with finite ratio.
    """
    if n_repeats < 30:
        raise UndefinedStatisticError(f"n_repeats must be at least 30, got {n_repeats}")
    if label not in ("theta", "phi"):
        raise ConfigurationError(f"unknown parameter set '{label}'", key="label")
    params = (model.generator if label == "theta" else model.encoder).trainable_parameters()

    def one_repeat(child: RandomSource) -> np.ndarray:
        loss = iwae_bound(model, x, k, child)
        return np.concatenate([g.reshape(-1) for g in T.grad(loss, params)])

    estimates = np.stack([one_repeat(child) for child in rng.spawn(n_repeats)])
    ratio, median = _snr_ratio(estimates)
    logger.debug(f"SNR[{label}] k={k}: median {median:.4g} over {ratio.size} coordinates")
    return SNREstimate(label=label, k=k, estimates=estimates, ratio=ratio, median=median)


# per-family dispatch used by the trainer

class LossTerms:
    """Scalars to maximize: one for the generator, one for the inference network."""

    __slots__ = ("generator", "inference", "value")

    def __init__(self, generator: Tensor, inference: Tensor, value: float):
        self.generator = generator
        self.inference = inference
        self.value = value


def training_losses(model: ModelTriple, spec: ObjectiveSpec, x, rng: RandomSource) -> LossTerms:
    family, k = spec.family, spec.k
    if family in ("vae", "iwae"):
        loss = (elbo(model, x, k, rng, analytic_kl=spec.analytic_kl) if family == "vae"
                else iwae_bound(model, x, k, rng))
        return LossTerms(loss, loss, loss.item())
    if family.startswith("vimco"):
        surrogate, value = vimco_surrogate(model, x, k, rng)
        return LossTerms(surrogate, surrogate, value)

    d = draw_posterior(model, x, k, rng)
    if family in ("avb", "aae"):
        inference = _averaged_adversarial(model, x, k, rng, d, spec.single_sample_inference)
        generator = T.mean(T.mean(_adversarial_terms(model, d, d.sample.z.detach()), axis=1))
        return LossTerms(generator, inference, generator.item())
    if family == "iw-avb":
        generator = iwavb_generator_loss(model, x, k, rng, d, spec.phi_through_iw)
        inference = avb_inference_loss(model, x, k, rng, d, spec.single_sample_inference)
    else:
        generator = iwaae_generator_loss(model, x, k, rng, d, spec.phi_through_iw)
        inference = aae_inference_loss(model, x, k, rng, d, spec.single_sample_inference)
    return LossTerms(generator, inference, generator.item())


def discriminator_objective(model: ModelTriple, spec: ObjectiveSpec, x, rng: RandomSource) -> Tensor:
    samples = spec.k if spec.discriminator_samples == "k" else 1
    q_batch, p_batch = discriminator_batches(model, x, rng, samples)
    return discriminator_loss(model.discriminator, q_batch, p_batch)
