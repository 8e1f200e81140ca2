"""
Model-quality metrics: importance-sampled and annealed log-likelihood, FID,
spike correlation against ground truth, paired t-tests and inference timing.
"""
import math
import platform
import time
from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy import linalg, special, stats

import tensor as T
from errors import (ConfigurationError, DivergentWeightsError, NumericDomainError, ShapeMismatchError,
                    TractabilityError, UndefinedStatisticError)
from events import InferenceTimed
from logger import logger
from configuration import ArchitectureConfig
from networks import (AutoregressiveSpikeEncoder, ConvSpikeEncoder, InferenceNetwork, ModelTriple,
                      StandardNormalPrior)
from spikesim import downsample_marginals
from tensor import RandomSource


class _ArrayRecord(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)


class LogLikEstimate(_ArrayRecord):
    per_datum: np.ndarray
    mean: float
    se: float
    method: str
    k: Optional[int] = None
    n_intermediate: Optional[int] = None
    n_chains: Optional[int] = None
    proposal: str = "posterior"


class MomentPair(_ArrayRecord):
    mean: np.ndarray
    cov: np.ndarray


def _summary(per_datum: np.ndarray) -> Tuple[float, float]:
    n = per_datum.size
    se = float(per_datum.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return float(per_datum.mean()), se


# likelihood estimators

def _iwae_rows(model: ModelTriple, x: np.ndarray, k: int, rng: RandomSource, prior_proposal: bool) -> np.ndarray:
    n = x.shape[0]
    x_rep = np.repeat(x, k, axis=0)
    if prior_proposal:
        z = model.prior.sample(rng, model.prior.latent_shape(x_rep.shape[0], x_rep.shape))
        log_w = model.generator.log_likelihood(x_rep, z).values
    else:
        sample = model.encoder.sample(x_rep, model.encoder.draw_noise(rng, x_rep.shape))
        z = sample.z
        log_w = (model.generator.log_likelihood(x_rep, z) + model.prior.log_prob(z) - sample.log_q).values
    return special.logsumexp(log_w.reshape(n, k), axis=1) - math.log(k)


def iwae_loglik(model: ModelTriple, dataset, k: int, rng: RandomSource, prior_proposal_for_implicit: bool = True,
                batch_size: int = 64) -> LogLikEstimate:
    """Per-datum IWAE-k estimate; implicit encoders fall back to the prior as proposal when allowed."""
    dataset = np.asarray(dataset, dtype=np.float64)
    prior_proposal = not model.encoder.tractable
    if prior_proposal and not prior_proposal_for_implicit:
        raise TractabilityError("IWAE log-likelihood needs tractable q or the prior-proposal fallback")
    if prior_proposal:
        logger.warning("Implicit encoder: IWAE log-likelihood uses the prior as proposal (higher variance)")
    with T.no_grad():
        rows = [_iwae_rows(model, dataset[i:i + batch_size], k, rng, prior_proposal)
                for i in range(0, dataset.shape[0], batch_size)]
    per_datum = np.concatenate(rows)
    mean, se = _summary(per_datum)
    return LogLikEstimate(per_datum=per_datum, mean=mean, se=se, method=f"IWAE-{k}", k=k,
                          proposal="prior" if prior_proposal else "posterior")


def ais_loglik(model: ModelTriple, x, n_intermediate: int, n_chains: int, rng: RandomSource,
               proposal_std: float = 0.1) -> LogLikEstimate:
    """
    Annealed importance sampling along p(z)·p(x|z)^β, β on a linear grid, with
    one Gaussian random-walk Metropolis-Hastings move per intermediate
    temperature. Chains are combined per datum by log-mean-exp.
    """
    if n_intermediate < 1 or n_chains < 1:
        raise ConfigurationError("AIS needs n_intermediate >= 1 and n_chains >= 1", key="evaluation.ais_intermediate")
    if not isinstance(model.prior, StandardNormalPrior):
        raise TractabilityError("AIS is implemented for continuous latents with a standard normal prior")
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    x_rep = np.repeat(x, n_chains, axis=0)
    betas = np.linspace(0.0, 1.0, n_intermediate + 1)

    def log_lik(z: np.ndarray) -> np.ndarray:
        return model.generator.log_likelihood(x_rep, z).values

    def log_prior(z: np.ndarray) -> np.ndarray:
        return model.prior.log_prob(z).values

    accepted = 0
    with T.no_grad():
        z = model.prior.sample(rng, (x_rep.shape[0], model.prior.dim))
        current_ll = log_lik(z)
        log_w = np.zeros(x_rep.shape[0])
        for t in range(1, n_intermediate + 1):
            log_w += (betas[t] - betas[t - 1]) * current_ll
            if t == n_intermediate:
                break
            proposal = z + proposal_std * rng.gaussian(z.shape)
            proposal_ll = log_lik(proposal)
            log_ratio = (log_prior(proposal) + betas[t] * proposal_ll) - (log_prior(z) + betas[t] * current_ll)
            accept = np.log(rng.uniform(log_ratio.shape)) < log_ratio
            z = np.where(accept[:, None], proposal, z)
            current_ll = np.where(accept, proposal_ll, current_ll)
            accepted += int(accept.sum())

    if not np.all(np.isfinite(log_w)):
        bad = np.flatnonzero(~np.isfinite(log_w))
        raise DivergentWeightsError(f"{bad.size} of {log_w.size} AIS chains produced non-finite log-weights "
                                    f"(datum {bad[0] // n_chains}, chain {bad[0] % n_chains})")
    per_datum = special.logsumexp(log_w.reshape(n, n_chains), axis=1) - math.log(n_chains)
    moves = max(x_rep.shape[0] * (n_intermediate - 1), 1)
    logger.debug(f"AIS acceptance rate {accepted / moves:.3f} over {n_intermediate} temperatures")
    mean, se = _summary(per_datum)
    return LogLikEstimate(per_datum=per_datum, mean=mean, se=se, method="AIS", n_intermediate=n_intermediate,
                          n_chains=n_chains, proposal="prior")


# FID

def moments(features) -> MomentPair:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[:, None]
    if features.shape[0] < 2:
        raise UndefinedStatisticError(f"moments need at least 2 samples, got {features.shape[0]}")
    return MomentPair(mean=features.mean(axis=0), cov=np.atleast_2d(np.cov(features, rowvar=False)))


def _psd_sqrt(matrix: np.ndarray, label: str) -> Tuple[np.ndarray, np.ndarray]:
    eigvals, eigvecs = linalg.eigh((matrix + matrix.T) / 2.0)
    if eigvals.min() < -1e-10 * max(1.0, abs(eigvals).max()):
        raise NumericDomainError(f"{label} is not positive semi-definite (smallest eigenvalue {eigvals.min():.3e})")
    eigvals = np.clip(eigvals, 0.0, None)
    return eigvals, (eigvecs * np.sqrt(eigvals)) @ eigvecs.T


def fid(features_p, features_q) -> float:
    """‖m_P − m_Q‖² + Tr(C_P + C_Q − 2 (C_P C_Q)^{1/2})."""
    p, q = moments(features_p), moments(features_q)
    if p.mean.shape != q.mean.shape:
        raise ShapeMismatchError(f"feature dimensions differ: {p.mean.shape[0]} vs {q.mean.shape[0]}")
    _, root_p = _psd_sqrt(p.cov, "C_P")
    _psd_sqrt(q.cov, "C_Q")
    inner, _ = _psd_sqrt(root_p @ q.cov @ root_p, "C_P^1/2 C_Q C_P^1/2")
    distance = float(np.sum((p.mean - q.mean) ** 2) + np.trace(p.cov) + np.trace(q.cov) - 2.0 * np.sum(np.sqrt(inner)))
    return max(distance, 0.0)


# spike inference

def spike_correlation(pred_marginals, true_spikes, source_rate: float = 60.0, eval_rate: float = 25.0,
                      presence: bool = False) -> float:
    """Pearson correlation of binned expected spike counts against binned true spikes."""
    pred = np.asarray(pred_marginals, dtype=np.float64)
    truth = np.asarray(true_spikes, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeMismatchError(f"predictions cover {pred.shape} frames, ground truth {truth.shape}")
    if np.any((pred < 0.0) | (pred > 1.0)):
        raise NumericDomainError("marginal probabilities must lie in [0, 1]")
    binned_pred = downsample_marginals(pred, source_rate, eval_rate)
    binned_true = downsample_marginals(truth, source_rate, eval_rate, presence=presence)
    if np.ptp(binned_pred) == 0.0 or np.ptp(binned_true) == 0.0:
        raise UndefinedStatisticError("undefined correlation: one side has zero variance")
    return float(np.corrcoef(binned_pred, binned_true)[0, 1])


def posterior_marginals(encoder: InferenceNetwork, trace, rng: RandomSource, draws: int = 20) -> np.ndarray:
    """
    Per-frame P(s_t = 1 | trace). A tractable factorized encoder needs a single
    pass; noise-injected and autoregressive encoders average over ``draws``.
    """
    trace = np.asarray(trace, dtype=np.float64)
    batch = trace[None, :] if trace.ndim == 1 else trace
    passes = 1 if (encoder.tractable and not isinstance(encoder, AutoregressiveSpikeEncoder)) else draws
    total = np.zeros_like(batch)
    with T.no_grad():
        for _ in range(passes):
            sample = encoder.sample(batch, encoder.draw_noise(rng, batch.shape))
            total += sample.probs.values
    marginals = total / passes
    return marginals[0] if trace.ndim == 1 else marginals


def paired_ttest(scores_a, scores_b) -> Tuple[float, float]:
    """Two-sided paired t-test on a − b with n − 1 degrees of freedom."""
    a, b = np.asarray(scores_a, dtype=np.float64), np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeMismatchError(f"paired scores need equal 1-D shapes, got {a.shape} and {b.shape}")
    n = a.size
    if n < 2:
        raise UndefinedStatisticError(f"paired t-test needs n >= 2, got {n}")
    d = a - b
    mean, sd = d.mean(), d.std(ddof=1)
    if sd == 0.0:
        if mean == 0.0:
            return 0.0, 1.0
        return math.copysign(math.inf, mean), 0.0
    t_stat = float(mean / (sd / math.sqrt(n)))
    return t_stat, float(2.0 * stats.t.sf(abs(t_stat), df=n - 1))


def inference_timing(encoder: InferenceNetwork, trace, mode: str, rng: RandomSource, hardware_note: str = "") -> InferenceTimed:
    """Wall-clock time of one posterior-sampling pass over the whole trace."""
    trace = np.asarray(trace, dtype=np.float64).reshape(1, -1)
    note = hardware_note or f"{platform.machine()} {platform.processor() or platform.system()}".strip()
    with T.no_grad():
        if mode == "parallel":
            if isinstance(encoder, AutoregressiveSpikeEncoder):
                raise ConfigurationError("parallel timing needs a factorized or implicit encoder", key="mode")
            eps = encoder.draw_noise(rng, trace.shape)
            started = time.perf_counter()
            encoder.sample(trace, eps)
            evaluations = 1
        elif mode == "sequential":
            if not isinstance(encoder, AutoregressiveSpikeEncoder):
                raise ConfigurationError("sequential timing needs the autoregressive encoder", key="mode")
            uniform = rng.uniform(trace.shape)
            started = time.perf_counter()
            _, evaluations = encoder.sample_sequential(trace, uniform)
        else:
            raise ConfigurationError(f"unknown timing mode '{mode}'", key="mode")
        elapsed = time.perf_counter() - started
    logger.info(f"{mode} inference over {trace.shape[1]} frames: {elapsed:.3f} s ({evaluations} evaluations)")
    return InferenceTimed(mode=mode, frames=trace.shape[1], seconds=elapsed, evaluations=evaluations, hardware_note=note)


def compare_inference_speed(encoder: InferenceNetwork, architecture: ArchitectureConfig, trace, rng: RandomSource,
                            hardware_note: str = "") -> Tuple[InferenceTimed, InferenceTimed]:
    """
    Times ``encoder`` in its own mode and a freshly built encoder of the other
    kind (factorized conv or autoregressive, same architecture) on the same
    trace. Returns the (parallel, sequential) pair.
    """
    if isinstance(encoder, AutoregressiveSpikeEncoder):
        sequential = inference_timing(encoder, trace, "sequential", rng, hardware_note)
        parallel = inference_timing(ConvSpikeEncoder(architecture, rng), trace, "parallel", rng, hardware_note)
    else:
        parallel = inference_timing(encoder, trace, "parallel", rng, hardware_note)
        sequential = inference_timing(AutoregressiveSpikeEncoder(architecture, rng), trace, "sequential", rng,
                                      hardware_note)
    return parallel, sequential


def inference_speedup(parallel: InferenceTimed, sequential: InferenceTimed) -> float:
    """How many times faster the parallel pass ran than sequential sampling of the same trace."""
    if parallel.frames != sequential.frames:
        raise ShapeMismatchError(f"timings cover {parallel.frames} and {sequential.frames} frames")
    if parallel.seconds <= 0.0:
        raise UndefinedStatisticError("parallel pass finished below the timer resolution")
    return sequential.seconds / parallel.seconds
