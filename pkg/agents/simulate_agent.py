import numpy as np

from agents.base_agent import Agent
from logger import logger
from spikesim import save_traces, simulate_dataset
from tensor import seeded_rng


class SimulateAgent(Agent):
    """Draws synthetic neurons and writes one paired trace/spike file per neuron."""

    def execute(self) -> int:
        config = self.context.config
        sim, params = config.simulation, config.biophys
        logger.info(f"Simulating {sim.neurons} neuron(s) of {sim.frames} frames at {params.frame_rate:.1f} Hz "
                    f"(tau={params.tau}, sigma={params.sigma}, rate={params.rate})")
        pairs = simulate_dataset(sim, params, seeded_rng(sim.seed))

        counts = []
        for trace, spikes in pairs:
            self.artifact_written(save_traces(self.context.output_dir / f"{trace.neuron_id}.csv", trace, spikes))
            counts.append(spikes.values.sum())
        seconds = sim.frames / params.frame_rate
        self.record_metric("spike_count", float(np.sum(counts)))
        self.record_metric("firing_rate_hz", float(np.mean(counts)) / seconds)
        self.write_metrics()
        return 0
