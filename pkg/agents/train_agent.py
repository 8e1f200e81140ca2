from typing import List

import numpy as np

from agents.base_agent import Agent
from configuration import ExperimentConfig
from datasets import vector_dataset
from errors import ConfigurationError
from logger import logger
from spikesim import load_traces, simulate_dataset, split_windows
from tensor import seeded_rng
from trainer import load_checkpoint, read_training_log, train


def spike_windows(config: ExperimentConfig, trace_paths: List[str]) -> np.ndarray:
    """Training windows cut from trace files, or from freshly simulated neurons when none are given."""
    window = config.training.window_frames
    if trace_paths:
        traces = []
        for path in trace_paths:
            trace, _ = load_traces(path)
            if abs(trace.frame_rate - config.biophys.frame_rate) > 1e-6:
                logger.warning(f"{path} is sampled at {trace.frame_rate} Hz but the model assumes "
                               f"{config.biophys.frame_rate:.3f} Hz")
            traces.append(trace.values)
    else:
        logger.info("No trace files given; training on simulated neurons")
        pairs = simulate_dataset(config.simulation, config.biophys, seeded_rng(config.simulation.seed))
        traces = [trace.values for trace, _ in pairs]
    return np.concatenate([split_windows(values, window) for values in traces])


class TrainAgent(Agent):
    def execute(self) -> int:
        config = self.context.config
        checkpoint = self.context.option("checkpoint")
        state = None
        if checkpoint:
            state = load_checkpoint(checkpoint)
            if state.config.objective != config.objective or state.config.model != config.model:
                raise ConfigurationError("resumed checkpoint was trained with a different model or objective",
                                         key="objective")
            training = state.config.training.model_copy(update={"max_steps": config.training.max_steps})
            state.config = state.config.model_copy(update={"training": training})
            config = state.config

        if config.model.problem == "spikes":
            data = spike_windows(config, self.context.option("trace", []))
        else:
            data, _, _ = vector_dataset(config)
        logger.info(f"Training data: {data.shape[0]} items of shape {data.shape[1:]}")

        state = train(data, config, output_dir=self.context.output_dir, state=state)
        self.artifact_written(self.context.output_dir / "final.ckpt")
        history = read_training_log(self.context.output_dir / "train_log.jsonl")
        if history:
            self.publish(history[-1])
        self.record_metric("train_steps", state.step)
        if state.history:
            self.record_metric("train_bound", state.running_mean)
        self.write_metrics()
        return 0
