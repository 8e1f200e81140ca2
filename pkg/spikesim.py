"""
Calcium-fluorescence generative model for spike inference.

Spikes drive a leaky calcium concentration c_t = γ·c_{t-1} + s_t with
γ = 1 − Δ/τ (Euler step of dc/dt = −c/τ + s), read out as f_t = α·c_t + β + σ·η_t.
"""
import math
import re
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, field_validator
from scipy import signal

import tensor as T
from configuration import BiophysParams, SimulationConfig
from errors import NumericDomainError, ShapeMismatchError, TraceFormatError
from logger import logger
from tensor import RandomSource, Tensor

_LOG_2PI = math.log(2.0 * math.pi)


class _ArrayRecord(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)


class SpikeTrain(_ArrayRecord):
    values: np.ndarray
    frame_rate: float = 60.0

    @field_validator("values")
    @classmethod
    def _binary(cls, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 1 or values.size == 0:
            raise ValueError(f"spike train must be a non-empty 1-D series, got shape {values.shape}")
        if not np.all((values == 0.0) | (values == 1.0)):
            raise ValueError("spike train entries must be 0 or 1")
        return values

    def __len__(self) -> int:
        return self.values.size


class FluorescenceTrace(_ArrayRecord):
    values: np.ndarray
    frame_rate: float = 60.0
    neuron_id: Optional[str] = None

    @field_validator("values")
    @classmethod
    def _finite(cls, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 1 or values.size == 0:
            raise ValueError(f"trace must be a non-empty 1-D series, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("trace values must be finite")
        return values

    def __len__(self) -> int:
        return self.values.size


def _check_stable(params: BiophysParams) -> None:
    if params.delta >= params.tau:
        raise NumericDomainError(f"unstable Euler update: delta {params.delta} >= tau {params.tau}")


def simulate_calcium(params: BiophysParams, spikes: SpikeTrain) -> np.ndarray:
    _check_stable(params)
    return signal.lfilter([1.0], [1.0, -params.decay], spikes.values)


def simulate_trace(params: BiophysParams, spikes: SpikeTrain, rng: RandomSource, neuron_id: Optional[str] = None) -> FluorescenceTrace:
    calcium = simulate_calcium(params, spikes)
    noise = rng.gaussian(calcium.shape) if params.sigma > 0.0 else 0.0
    values = params.alpha * calcium + params.beta + params.sigma * noise
    return FluorescenceTrace(values=values, frame_rate=spikes.frame_rate, neuron_id=neuron_id)


def gaussian_trace_log_likelihood(trace, spikes, alpha, beta, sigma, gamma) -> Tensor:
    """
    Σ over the last axis of log N(f_t; α·c_t + β, σ²). Every argument may be a
    Tensor; ``spikes`` may carry a straight-through gradient.
    """
    trace, spikes, sigma = T.as_tensor(trace), T.as_tensor(spikes), T.as_tensor(sigma)
    if trace.shape != spikes.shape:
        raise ShapeMismatchError(f"trace shape {trace.shape} does not match spike shape {spikes.shape}")
    calcium = T.exponential_filter(spikes, gamma)
    residual = trace - (alpha * calcium + beta)
    if np.any(sigma.values <= 0.0):
        if np.any(residual.values != 0.0):
            raise NumericDomainError("sigma is 0 but the trace deviates from the noiseless prediction")
        raise NumericDomainError("sigma is 0: the noiseless trace has no finite density")
    standardized = residual / sigma
    return T.tensor_sum(-0.5 * T.square(standardized) - T.log(sigma) - 0.5 * _LOG_2PI, axis=-1)


def trace_log_likelihood(params: BiophysParams, spikes, trace) -> Tensor:
    """log p(f | s) for one trace under fixed biophysical parameters."""
    _check_stable(params)
    if isinstance(spikes, SpikeTrain):
        spikes = spikes.values
    if isinstance(trace, FluorescenceTrace):
        trace = trace.values
    ll = gaussian_trace_log_likelihood(trace, spikes, params.alpha, params.beta, params.sigma, params.decay)
    return T.tensor_sum(ll)


def sample_spike_prior(rate: float, length: int, rng: RandomSource, frame_rate: float = 60.0) -> SpikeTrain:
    if not 0.0 <= rate <= 1.0:
        raise NumericDomainError(f"spike rate must lie in [0, 1], got {rate}")
    return SpikeTrain(values=rng.bernoulli(rate, (length,)), frame_rate=frame_rate)


def downsample_marginals(values, source_rate: float, target_rate: float, presence: bool = False) -> np.ndarray:
    """
    Sums frames into non-overlapping bins of width 1/target_rate; a frame goes
    to the bin containing its left edge. With ``presence`` each bin is clipped to 1.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1 or values.size == 0:
        raise ShapeMismatchError(f"downsampling needs a non-empty 1-D series, got shape {values.shape}")
    if target_rate > source_rate:
        raise NumericDomainError(f"target rate {target_rate} Hz exceeds source rate {source_rate} Hz")
    bins = np.floor(np.arange(values.size) * (target_rate / source_rate) + 1e-12).astype(np.int64)
    binned = np.bincount(bins, weights=values)
    return np.minimum(binned, 1.0) if presence else binned


def simulate_dataset(simulation: SimulationConfig, params: BiophysParams, rng: RandomSource) -> List[Tuple[FluorescenceTrace, SpikeTrain]]:
    """Independent neurons, each a spike train drawn from the prior and its trace."""
    pairs = []
    for i in range(simulation.neurons):
        spikes = sample_spike_prior(params.rate, simulation.frames, rng, frame_rate=params.frame_rate)
        trace = simulate_trace(params, spikes, rng, neuron_id=f"neuron{i}")
        pairs.append((trace, spikes))
        logger.debug(f"Simulated neuron{i}: {int(spikes.values.sum())} spikes over {simulation.frames} frames")
    return pairs


def split_windows(series: np.ndarray, window: int) -> np.ndarray:
    """(frames,) → (frames // window, window); the remainder is dropped."""
    series = np.asarray(series, dtype=np.float64)
    count = series.size // window
    if count == 0:
        raise ShapeMismatchError(f"series of {series.size} frames is shorter than one window of {window}")
    return series[:count * window].reshape(count, window)


# trace files

def save_traces(path, trace: FluorescenceTrace, spikes: Optional[SpikeTrain] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame({"fluorescence": trace.values})
    if spikes is not None:
        if len(spikes) != len(trace):
            raise ShapeMismatchError(f"trace has {len(trace)} frames but spike train has {len(spikes)}")
        frame["spikes"] = spikes.values.astype(np.int64)
    with path.open("w", encoding="utf-8", newline="") as handle:
        handle.write(f"# rate_hz={trace.frame_rate!r}\n")
        if trace.neuron_id is not None:
            handle.write(f"# neuron_id={trace.neuron_id}\n")
        frame.to_csv(handle, index=False, float_format="%.17g", lineterminator="\n")
    return path


def save_marginals(path, marginals: np.ndarray, frame_rate: float, neuron_id: Optional[str] = None) -> Path:
    """Per-frame spike probabilities in the trace file layout, one row per input frame."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        handle.write(f"# rate_hz={float(frame_rate)!r}\n")
        if neuron_id is not None:
            handle.write(f"# neuron_id={neuron_id}\n")
        pd.DataFrame({"spike_probability": np.asarray(marginals, dtype=np.float64)}).to_csv(
            handle, index=False, float_format="%.17g", lineterminator="\n")
    return path


def load_marginals(path) -> np.ndarray:
    frame = pd.read_csv(path, comment="#")
    if list(frame.columns) != ["spike_probability"]:
        raise TraceFormatError(f"{path}: expected a single 'spike_probability' column", line=1)
    return frame["spike_probability"].to_numpy(dtype=np.float64)


_TRACE_HEADERS = (["fluorescence"], ["fluorescence", "spikes"])


def _trace_file_layout(path: Path) -> Tuple[dict, List[int]]:
    """'# key=value' metadata and the 1-based file line of every header or data row."""
    metadata, content_lines = {}, []
    with path.open("r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.strip()
            if line.startswith("#"):
                key, _, value = line[1:].partition("=")
                metadata[key.strip()] = value.strip()
            elif line:
                content_lines.append(line_no)
    return metadata, content_lines


def load_traces(path) -> Tuple[FluorescenceTrace, Optional[SpikeTrain]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"trace file not found: {path}")
    metadata, content_lines = _trace_file_layout(path)
    try:
        frame = pd.read_csv(path, comment="#", dtype=str, keep_default_na=False, skipinitialspace=True)
    except pd.errors.EmptyDataError:
        raise TraceFormatError(f"{path}: no data rows", line=1) from None
    except pd.errors.ParserError as e:
        found = re.search(r"line (\d+)", str(e))
        raise TraceFormatError(f"{path}: {e}", line=int(found.group(1)) if found else content_lines[0]) from None
    header = [str(name).strip() for name in frame.columns]
    if header not in _TRACE_HEADERS:
        raise TraceFormatError(f"{path}: unexpected header {header}", line=content_lines[0])
    if "rate_hz" not in metadata:
        raise TraceFormatError(f"{path}: missing '# rate_hz=' metadata", line=1)
    if frame.empty:
        raise TraceFormatError(f"{path}: no data rows", line=1)
    try:
        rate = float(metadata["rate_hz"])
    except ValueError:
        raise TraceFormatError(f"{path}: rate_hz '{metadata['rate_hz']}' is not a number", line=1) from None

    row_lines = content_lines[1:]
    missing = frame.isna() | (frame == "")
    if missing.to_numpy().any():
        row = int(np.flatnonzero(missing.to_numpy().any(axis=1))[0])
        raise TraceFormatError(f"{path}: expected {len(header)} cells", line=row_lines[row])
    table = frame.apply(pd.to_numeric, errors="coerce").to_numpy(dtype=np.float64)
    for column, name in enumerate(header):
        invalid = ~np.isfinite(table[:, column])
        if name == "spikes":
            invalid |= (table[:, column] != 0.0) & (table[:, column] != 1.0)
        if invalid.any():
            row = int(np.flatnonzero(invalid)[0])
            raise TraceFormatError(f"{path}: invalid {name} value {frame.iat[row, column]!r}", line=row_lines[row])
    trace = FluorescenceTrace(values=table[:, 0], frame_rate=rate, neuron_id=metadata.get("neuron_id"))
    spikes = SpikeTrain(values=table[:, 1], frame_rate=rate) if header == ["fluorescence", "spikes"] else None
    return trace, spikes
