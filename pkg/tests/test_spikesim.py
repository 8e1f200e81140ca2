import numpy as np
# noinspection PyPackageRequirements
import pytest
from pydantic import ValidationError

from configuration import BiophysParams, SimulationConfig
from errors import NumericDomainError, ShapeMismatchError, TraceFormatError
from spikesim import (FluorescenceTrace, SpikeTrain, downsample_marginals, gaussian_trace_log_likelihood,
                      load_marginals, load_traces, sample_spike_prior, save_marginals, save_traces, simulate_calcium,
                      simulate_dataset, simulate_trace, split_windows, trace_log_likelihood)
from tensor import RandomSource


def test_calcium_jumps_in_the_spike_frame_and_decays():
    params = BiophysParams()
    spikes = SpikeTrain(values=np.array([0.0, 1.0, 0.0, 0.0, 1.0]))
    calcium = simulate_calcium(params, spikes)
    gamma = params.decay
    np.testing.assert_allclose(calcium, [0.0, 1.0, gamma, gamma ** 2, gamma ** 3 + 1.0])


def test_spike_and_its_fluorescence_jump_share_a_frame(rng):
    params = BiophysParams(alpha=2.0, beta=0.5, sigma=0.0)
    spikes = SpikeTrain(values=np.array([0.0, 0.0, 0.0, 1.0, 0.0, 0.0]))
    trace = simulate_trace(params, spikes, rng)
    assert trace.values[2] == 0.5
    assert trace.values[3] == 2.5
    # the likelihood filter shares the alignment: only the same-frame train fits exactly
    aligned = gaussian_trace_log_likelihood(trace.values, spikes.values, 2.0, 0.5, 0.1, params.decay).item()
    delayed = gaussian_trace_log_likelihood(trace.values, np.roll(spikes.values, 1), 2.0, 0.5, 0.1,
                                            params.decay).item()
    assert aligned == pytest.approx(-6.0 * (np.log(0.1) + 0.5 * np.log(2.0 * np.pi)))
    assert delayed < aligned


def test_noiseless_trace_is_the_affine_readout(rng):
    params = BiophysParams(sigma=0.0, alpha=2.0, beta=0.5)
    spikes = sample_spike_prior(0.1, 50, rng)
    trace = simulate_trace(params, spikes, rng)
    np.testing.assert_allclose(trace.values, 2.0 * simulate_calcium(params, spikes) + 0.5)


def test_zero_sigma_has_no_density(rng):
    params = BiophysParams(sigma=0.0)
    spikes = sample_spike_prior(0.1, 20, rng)
    trace = simulate_trace(params, spikes, rng)
    with pytest.raises(NumericDomainError):
        trace_log_likelihood(params, spikes, trace)


def test_likelihood_is_a_sum_of_gaussian_terms(rng):
    params = BiophysParams(sigma=0.4)
    spikes = sample_spike_prior(0.05, 30, rng)
    trace = simulate_trace(params, spikes, rng)
    residual = trace.values - (params.alpha * simulate_calcium(params, spikes) + params.beta)
    expected = np.sum(-0.5 * (residual / 0.4) ** 2 - np.log(0.4) - 0.5 * np.log(2 * np.pi))
    assert trace_log_likelihood(params, spikes, trace).item() == pytest.approx(expected, rel=1e-12)


def test_likelihood_is_per_row_for_batches(rng):
    spikes = rng.bernoulli(0.1, (3, 10))
    trace = rng.gaussian((3, 10))
    ll = gaussian_trace_log_likelihood(trace, spikes, 1.0, 0.0, 0.5, 0.9)
    assert ll.shape == (3,)
    with pytest.raises(ShapeMismatchError):
        gaussian_trace_log_likelihood(trace, spikes[:, :5], 1.0, 0.0, 0.5, 0.9)


def test_prior_sampling_bounds(rng):
    assert sample_spike_prior(0.0, 100, rng).values.sum() == 0.0
    assert sample_spike_prior(1.0, 100, rng).values.sum() == 100.0
    with pytest.raises(NumericDomainError):
        sample_spike_prior(1.5, 10, rng)


def test_records_validate_their_series():
    with pytest.raises(ValidationError):
        SpikeTrain(values=np.array([0.0, 0.5]))
    with pytest.raises(ValidationError):
        FluorescenceTrace(values=np.array([0.0, np.nan]))


def test_downsampling_60_to_25_hz():
    values = np.ones(60)
    binned = downsample_marginals(values, 60.0, 25.0)
    assert binned.size == 25
    assert binned.sum() == pytest.approx(60.0)
    # bin widths alternate between two and three frames
    assert set(np.unique(binned)) == {2.0, 3.0}


def test_presence_binning_clips_counts():
    spikes = np.zeros(12)
    spikes[[0, 1, 5]] = 1.0
    binned = downsample_marginals(spikes, 60.0, 20.0, presence=True)
    np.testing.assert_array_equal(binned, [1.0, 1.0, 0.0, 0.0])


def test_downsampling_cannot_upsample():
    with pytest.raises(NumericDomainError):
        downsample_marginals(np.ones(10), 25.0, 60.0)


def test_split_windows_drops_the_remainder():
    windows = split_windows(np.arange(25.0), 10)
    assert windows.shape == (2, 10)
    np.testing.assert_array_equal(windows[1], np.arange(10.0, 20.0))
    with pytest.raises(ShapeMismatchError):
        split_windows(np.arange(5.0), 10)


def test_simulated_dataset_is_seeded():
    simulation = SimulationConfig(frames=300, neurons=2)
    first = simulate_dataset(simulation, BiophysParams(), RandomSource(3))
    second = simulate_dataset(simulation, BiophysParams(), RandomSource(3))
    assert [trace.neuron_id for trace, _ in first] == ["neuron0", "neuron1"]
    for (trace_a, spikes_a), (trace_b, spikes_b) in zip(first, second):
        np.testing.assert_array_equal(trace_a.values, trace_b.values)
        np.testing.assert_array_equal(spikes_a.values, spikes_b.values)


def test_trace_files_preserve_values(tmp_path, rng):
    params = BiophysParams()
    spikes = sample_spike_prior(0.05, 120, rng)
    trace = simulate_trace(params, spikes, rng, neuron_id="cell7")
    path = save_traces(tmp_path / "cell7.csv", trace, spikes)
    loaded_trace, loaded_spikes = load_traces(path)
    np.testing.assert_array_equal(loaded_trace.values, trace.values)
    np.testing.assert_array_equal(loaded_spikes.values, spikes.values)
    assert loaded_trace.frame_rate == trace.frame_rate
    assert loaded_trace.neuron_id == "cell7"


def test_trace_without_spikes(tmp_path):
    path = save_traces(tmp_path / "t.csv", FluorescenceTrace(values=np.array([0.1, 0.2, 0.3])))
    trace, spikes = load_traces(path)
    assert spikes is None
    assert len(trace) == 3


@pytest.mark.parametrize("content, line", [
    ("# rate_hz=60.0\nfluorescence,spikes\n0.1,0\nabc,1\n", 4),
    ("# rate_hz=60.0\nfluorescence,spikes\n0.1,0\n0.2,0.5\n", 4),
    ("# rate_hz=60.0\nfluorescence,spikes\n0.1,0\n0.2\n", 4),
    ("# rate_hz=60.0\nfluorescence,spikes\n0.1,0\n0.2,1,7\n", 4),
    ("# rate_hz=60.0\n\nfluorescence,spikes\n\n0.1,0\n0.2,2\n", 6),
    ("# rate_hz=60.0\ntime,value\n0.1,0\n", 2),
    ("fluorescence\n0.1\n", 1),
])
def test_malformed_trace_files_report_the_line(tmp_path, content, line):
    path = tmp_path / "bad.csv"
    path.write_text(content, encoding="utf-8")
    with pytest.raises(TraceFormatError) as excinfo:
        load_traces(path)
    assert excinfo.value.line == line


def test_missing_trace_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_traces(tmp_path / "absent.csv")


def test_marginal_files_keep_length(tmp_path, rng):
    marginals = rng.uniform(37)
    path = save_marginals(tmp_path / "m.csv", marginals, 60.0, neuron_id="n0")
    np.testing.assert_array_equal(load_marginals(path), marginals)
