from pathlib import Path

from agents.base_agent import Agent
from errors import ConfigurationError, UndefinedStatisticError
from evaluation import posterior_marginals, spike_correlation
from logger import logger
from spikesim import load_traces, save_marginals
from tensor import seeded_rng
from trainer import load_checkpoint


class InferAgent(Agent):
    """Writes per-frame spike probabilities for every input trace, scoring them when ground truth is present."""

    def execute(self) -> int:
        checkpoint = self.context.option("checkpoint")
        trace_paths = self.context.option("trace", [])
        if not checkpoint:
            raise ConfigurationError("infer needs --checkpoint", key="checkpoint")
        if not trace_paths:
            raise ConfigurationError("infer needs at least one --trace file", key="trace")

        state = load_checkpoint(checkpoint)
        if state.model.problem != "spikes":
            raise ConfigurationError(f"checkpoint holds a '{state.model.problem}' model, not a spike model",
                                     key="model.problem")
        evaluation = self.context.config.evaluation
        rng = seeded_rng(self.context.seed)

        for path in trace_paths:
            trace, spikes = load_traces(path)
            marginals = posterior_marginals(state.model.encoder, trace.values, rng, draws=evaluation.marginal_draws)
            stem = Path(path).stem
            self.artifact_written(save_marginals(self.context.output_dir / f"{stem}_marginals.csv", marginals,
                                                 trace.frame_rate, trace.neuron_id))
            if spikes is None:
                continue
            try:
                correlation = spike_correlation(marginals, spikes.values, source_rate=trace.frame_rate,
                                                eval_rate=evaluation.eval_rate, presence=evaluation.presence_binning)
            except UndefinedStatisticError as e:
                logger.warning(f"No correlation for {path}: {e}")
                continue
            self.record_metric(f"spike_correlation[{stem}]", correlation)
        self.write_metrics()
        return 0
