"""
Desk-scale orderings between training families, medians over seeds. Each
test trains several models from scratch; run them with ``-m acceptance``.
"""
import numpy as np
# noinspection PyPackageRequirements
import pytest

from agents.train_agent import spike_windows
from configuration import build_experiment_config
from datasets import vector_dataset
from evaluation import iwae_loglik, posterior_marginals, spike_correlation
from spikesim import simulate_dataset
from tensor import RandomSource, seeded_rng
from trainer import train

pytestmark = [pytest.mark.acceptance, pytest.mark.timeout(3600)]


def _held_out_correlation(family: str, seed: int) -> float:
    config = build_experiment_config({
        "model": {"problem": "spikes"},
        "objective": {"family": family, "k": 4},
        "training": {"max_steps": 1500, "batch_size": 8, "seed": seed},
        "simulation": {"frames": 36000, "seed": seed},
    })
    state = train(spike_windows(config, []), config)
    held_out = config.simulation.model_copy(update={"seed": seed + 1000})
    trace, spikes = simulate_dataset(held_out, config.biophys, seeded_rng(held_out.seed))[0]
    marginals = posterior_marginals(state.model.encoder, trace.values, RandomSource(seed),
                                    draws=config.evaluation.marginal_draws)
    return spike_correlation(marginals, spikes.values, source_rate=trace.frame_rate,
                             eval_rate=config.evaluation.eval_rate)


def test_iwavb_spike_inference_matches_the_factorized_baseline():
    seeds = range(5)
    iwavb = np.median([_held_out_correlation("iw-avb", seed) for seed in seeds])
    factorized = np.median([_held_out_correlation("vimco-fact", seed) for seed in seeds])
    assert iwavb >= 0.6
    assert iwavb >= factorized - 0.02


def _pattern_bound(family: str, seed: int) -> float:
    config = build_experiment_config({
        "model": {"problem": "images", "data_dim": 64},
        "objective": {"family": family, "k": 4},
        "training": {"max_steps": 2000, "batch_size": 32, "seed": seed},
        "simulation": {"seed": seed},
    })
    train_set, test_set, _ = vector_dataset(config)
    state = train(train_set, config)
    return iwae_loglik(state.model, test_set, 64, RandomSource(seed)).mean


def test_iwavb_bound_on_binary_patterns_is_no_worse_than_avb():
    seeds = range(3)
    iwavb = np.median([_pattern_bound("iw-avb", seed) for seed in seeds])
    avb = np.median([_pattern_bound("avb", seed) for seed in seeds])
    assert iwavb >= avb - 0.05
