from typing import Dict, List

import numpy as np
import pandas as pd
from tqdm import tqdm

from agents.base_agent import Agent
from configuration import ExperimentConfig, ModelConfig, ObjectiveSpec
from datasets import linear_gaussian_data, plant_linear_gaussian
from logger import logger
from networks import build_model_triple
from objectives import estimate_snr
from tensor import RandomSource


def snr_config(config: ExperimentConfig) -> ExperimentConfig:
    """A linear-Gaussian model trained with the IWAE bound, sized by the ``snr`` section."""
    model = ModelConfig(problem="gaussian", data_dim=config.snr.data_dim, architecture=config.model.architecture)
    return config.model_copy(update={"model": model, "objective": ObjectiveSpec(family="iwae")})


def snr_table(config: ExperimentConfig, seed: int) -> pd.DataFrame:
    """Median gradient SNR per replicate, parameter set and k."""
    snr = config.snr
    model_config = snr_config(config)
    rows: List[Dict] = []
    replicates = RandomSource(seed).spawn(snr.replicates)
    for replicate, rng in enumerate(tqdm(replicates, desc="snr", disable=not config.training.progress)):
        data = linear_gaussian_data(config.training.batch_size, 2, snr.data_dim,
                                    model_config.model.architecture.latent_dim, rng)
        model = build_model_triple(model_config, rng)
        plant_linear_gaussian(model, data, snr.perturbation, rng)
        for k in snr.k_list:
            for label in ("theta", "phi"):
                estimate = estimate_snr(model, data.train, k, snr.n_repeats, label, rng)
                rows.append({"replicate": replicate, "label": label, "k": k, "median": estimate.median})
        logger.debug(f"SNR replicate {replicate} done")
    return pd.DataFrame(rows)


class SNRAgent(Agent):
    def execute(self) -> int:
        table = snr_table(self.context.config, self.context.seed)
        path = self.context.output_dir / "snr.txt"
        table.to_csv(path, sep="\t", index=False, float_format="%.17g", lineterminator="\n")
        self.artifact_written(path)

        summary = table.groupby(["label", "k"])["median"].agg(["mean", "std", "count"])
        for (label, k), row in summary.iterrows():
            se = row["std"] / np.sqrt(row["count"]) if row["count"] > 1 else None
            self.record_metric(f"snr_{label}[k={k}]", row["mean"], se)
        for label in ("theta", "phi"):
            trend = summary.loc[label, "mean"].to_numpy()
            direction = "increases" if np.all(np.diff(trend) > 0) else "does not increase"
            logger.info(f"Median {label} SNR {direction} with k: {np.array2string(trend, precision=4)}")
        self.write_metrics()
        return 0
