import numpy as np

from agents.base_agent import Agent
from datasets import vector_dataset
from errors import ConfigurationError, TractabilityError, UndefinedStatisticError
from evaluation import (ais_loglik, compare_inference_speed, fid, inference_speedup, iwae_loglik, posterior_marginals,
                        spike_correlation)
from logger import logger
from networks import BernoulliDecoder, GaussianDecoder, ModelTriple
from reports import emit_timing_report
from spikesim import load_traces, simulate_dataset, split_windows
from tensor import RandomSource, no_grad, seeded_rng
from trainer import load_checkpoint


def generate_samples(model: ModelTriple, n: int, rng: RandomSource) -> np.ndarray:
    """Ancestral samples x ~ p(z) p(x|z) from a vector generator."""
    generator = model.generator
    with no_grad():
        z = model.prior.sample(rng, model.prior.latent_shape(n))
        if isinstance(generator, GaussianDecoder):
            sigma = np.exp(generator.named_parameters()["log_sigma"].values)
            return generator.mean(z).values + sigma * rng.gaussian((n, generator.data_dim))
        if isinstance(generator, BernoulliDecoder):
            return rng.bernoulli(1.0 / (1.0 + np.exp(-generator.logits(z).values)))
    raise ConfigurationError(f"cannot sample from {type(generator).__name__}", key="model.problem")


class EvalAgent(Agent):
    def execute(self) -> int:
        checkpoint = self.context.option("checkpoint")
        if not checkpoint:
            raise ConfigurationError("eval needs --checkpoint", key="checkpoint")
        state = load_checkpoint(checkpoint)
        rng = seeded_rng(self.context.seed)
        if state.model.problem == "spikes":
            self._evaluate_spikes(state.model, state.config, rng)
        else:
            self._evaluate_vectors(state.model, state.config, rng)
        self.write_metrics()
        return 0

    def _loglik(self, model: ModelTriple, data: np.ndarray, rng: RandomSource) -> None:
        evaluation = self.context.config.evaluation
        try:
            estimate = iwae_loglik(model, data, evaluation.iwae_k, rng,
                                   prior_proposal_for_implicit=evaluation.prior_proposal_for_implicit)
        except TractabilityError as e:
            logger.warning(f"Skipping IWAE log-likelihood: {e}")
            return
        self.record_metric(f"iwae_loglik[{estimate.proposal}]", estimate.mean, estimate.se)

    def _evaluate_vectors(self, model: ModelTriple, trained_config, rng: RandomSource) -> None:
        evaluation = self.context.config.evaluation
        _, test, truth = vector_dataset(trained_config)
        self._loglik(model, test, rng)
        ais = ais_loglik(model, test, evaluation.ais_intermediate, evaluation.ais_chains, rng,
                         proposal_std=evaluation.ais_proposal_std)
        self.record_metric("ais_loglik", ais.mean, ais.se)
        if truth is not None:
            exact = truth.log_marginal(test)
            self.record_metric("true_loglik", exact.mean(), exact.std(ddof=1) / np.sqrt(exact.size))
        self.record_metric("fid", fid(test, generate_samples(model, test.shape[0], rng)))

    def _evaluate_spikes(self, model: ModelTriple, trained_config, rng: RandomSource) -> None:
        evaluation = self.context.config.evaluation
        for path in self.context.option("trace", []):
            trace, spikes = load_traces(path)
            self._loglik(model, split_windows(trace.values, trained_config.training.window_frames), rng)
            if spikes is None:
                continue
            marginals = posterior_marginals(model.encoder, trace.values, rng, draws=evaluation.marginal_draws)
            try:
                correlation = spike_correlation(marginals, spikes.values, source_rate=trace.frame_rate,
                                                eval_rate=evaluation.eval_rate, presence=evaluation.presence_binning)
                self.record_metric("spike_correlation", correlation)
            except UndefinedStatisticError as e:
                logger.warning(f"No correlation for {path}: {e}")
        if self.context.option("timing", False):
            self._time_inference(model, trained_config, rng)

    def _time_inference(self, model: ModelTriple, trained_config, rng: RandomSource) -> None:
        frames = self.context.config.evaluation.timing_frames
        simulation = trained_config.simulation.model_copy(update={"frames": frames, "neurons": 1})
        trace, _ = simulate_dataset(simulation, trained_config.biophys, rng)[0]
        timings = compare_inference_speed(model.encoder, trained_config.model.architecture, trace.values, rng)
        self.artifact_written(emit_timing_report(timings, self.context.output_dir / "timing.txt"))
        for timing in timings:
            self.publish(timing)
            self.record_metric(f"inference_seconds[{timing.mode}]", timing.seconds)
        try:
            self.record_metric("inference_speedup", inference_speedup(*timings))
        except UndefinedStatisticError as e:
            logger.warning(f"No speedup reported: {e}")
