import numpy as np
# noinspection PyPackageRequirements
import pytest

from configuration import load_experiment_config
from experiment_runner import (EXIT_OK, EXIT_USAGE_ERROR, OUTPUT_ROOT_ENV, ExperimentRunner, build_parser,
                               collect_overrides, run)
from reports import parse_report
from spikesim import load_marginals, load_traces

SMALL_SPIKE_MODEL = """\
[model]
problem = spikes
architecture.conv_widths = [5, 3]
architecture.conv_filters = [4, 3]
architecture.noise_layers = [0]
architecture.discriminator_widths = [3]
architecture.discriminator_filters = [4]

[training]
window_frames = 100
batch_size = 2
"""

SMALL_THEORY = ["--set", "theory.n_models=4", "--set", "theory.ordering_models=1", "--set", "theory.grid_points=6"]


@pytest.fixture
def spike_config_file(tmp_path):
    path = tmp_path / "spikes.ini"
    path.write_text(SMALL_SPIKE_MODEL, encoding="utf-8")
    return path


def test_convenience_flags_become_overrides():
    args = build_parser().parse_args(["train", "--objective", "iwae", "--k", "8", "--seed", "3",
                                      "--set", "objective.k=9"])
    overrides = collect_overrides(args)
    assert overrides == ["objective.family=iwae", "objective.k=8", "training.seed=3", "simulation.seed=3",
                         "objective.k=9"]
    assert load_experiment_config(None, overrides).objective.k == 9


def test_default_output_directory_uses_the_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
    runner = ExperimentRunner.from_args(build_parser().parse_args(["verify-theory"]))
    assert runner.output_dir == tmp_path / "verify-theory" / runner.config_hash


@pytest.mark.integration
def test_verify_theory_passes_and_writes_its_table(tmp_path):
    out = tmp_path / "theory"
    assert run(["verify-theory", "--seed", "7", "--output-dir", str(out)] + SMALL_THEORY) == EXIT_OK
    table = (out / "theory.txt").read_text(encoding="utf-8").splitlines()
    assert len(table) == 7
    assert all(line.endswith("PASS") for line in table[1:])
    assert (out / "config.ini").exists()
    assert any(m.name == "theorem1.max_residual" for m in parse_report(out / "metrics.txt"))


@pytest.mark.integration
def test_resolved_config_reloads_to_the_same_run(tmp_path):
    out = tmp_path / "theory"
    run(["verify-theory", "--seed", "7", "--output-dir", str(out)] + SMALL_THEORY)
    resolved = load_experiment_config(str(out / "config.ini"))
    assert resolved.theory.n_models == 4
    assert resolved.training.seed == 7


@pytest.mark.integration
def test_simulate_writes_paired_trace_files(tmp_path):
    out = tmp_path / "sim"
    status = run(["simulate", "--frames", "6000", "--sigma", "0.2", "--neurons", "2", "--seed", "1",
                  "--output-dir", str(out)])
    assert status == EXIT_OK
    trace, spikes = load_traces(out / "neuron0.csv")
    assert len(trace) == 6000 and len(spikes) == 6000
    assert (out / "neuron1.csv").exists()
    names = [m.name for m in parse_report(out / "metrics.txt")]
    assert names == ["spike_count", "firing_rate_hz"]


@pytest.mark.integration
def test_train_then_infer_and_eval_on_a_simulated_neuron(tmp_path, spike_config_file):
    sim_dir, train_dir, infer_dir, eval_dir = (tmp_path / name for name in ("sim", "train", "infer", "eval"))
    assert run(["simulate", "--frames", "600", "--output-dir", str(sim_dir)]) == EXIT_OK
    trace_file = str(sim_dir / "neuron0.csv")

    status = run(["train", "--config", str(spike_config_file), "--objective", "iw-avb", "--k", "2", "--steps", "2",
                  "--trace", trace_file, "--output-dir", str(train_dir)])
    assert status == EXIT_OK
    checkpoint = train_dir / "final.ckpt"
    assert checkpoint.exists()
    assert (train_dir / "train_log.jsonl").exists()

    status = run(["infer", "--checkpoint", str(checkpoint), "--trace", trace_file, "--output-dir", str(infer_dir)])
    assert status == EXIT_OK
    marginals = load_marginals(infer_dir / "neuron0_marginals.csv")
    assert marginals.shape == (600,)
    assert np.all((marginals >= 0.0) & (marginals <= 1.0))

    status = run(["eval", "--checkpoint", str(checkpoint), "--trace", trace_file, "--set", "evaluation.iwae_k=4",
                  "--output-dir", str(eval_dir)])
    assert status == EXIT_OK
    assert "iwae_loglik[prior]" in [m.name for m in parse_report(eval_dir / "metrics.txt")]


@pytest.mark.integration
def test_resuming_with_another_objective_is_a_usage_error(tmp_path, spike_config_file):
    sim_dir, train_dir = tmp_path / "sim", tmp_path / "train"
    run(["simulate", "--frames", "200", "--output-dir", str(sim_dir)])
    trace_file = str(sim_dir / "neuron0.csv")
    run(["train", "--config", str(spike_config_file), "--objective", "iwae", "--k", "2", "--steps", "1",
         "--trace", trace_file, "--output-dir", str(train_dir)])
    status = run(["train", "--config", str(spike_config_file), "--objective", "iw-avb", "--k", "2", "--steps", "2",
                  "--trace", trace_file, "--checkpoint", str(train_dir / "final.ckpt"),
                  "--output-dir", str(tmp_path / "resumed")])
    assert status == EXIT_USAGE_ERROR


@pytest.mark.parametrize("argv", [
    ["verify-theory", "--set", "theory.no_such_key=1"],
    ["verify-theory", "--set", "theory.n_models=0"],
    ["simulate", "--set", "simulation"],
    ["train", "--config", "absent.ini"],
    ["infer", "--checkpoint", "absent.ckpt", "--trace", "absent.csv"],
])
def test_usage_errors_exit_with_two(tmp_path, argv):
    assert run(argv + ["--output-dir", str(tmp_path / "out")]) == EXIT_USAGE_ERROR


@pytest.mark.parametrize("argv", [[], ["unknown-subcommand"], ["infer", "--trace", "t.csv"]])
def test_malformed_command_lines_exit_with_two(argv):
    assert run(argv) == EXIT_USAGE_ERROR


@pytest.mark.integration
def test_snr_reports_both_parameter_sets(tmp_path):
    out = tmp_path / "snr"
    status = run(["snr", "--seed", "2", "--output-dir", str(out), "--set", "snr.k_list=[1, 4]",
                  "--set", "snr.n_repeats=30", "--set", "snr.replicates=2", "--set", "training.batch_size=4"])
    assert status == EXIT_OK
    names = {m.name for m in parse_report(out / "metrics.txt")}
    assert names == {"snr_theta[k=1]", "snr_theta[k=4]", "snr_phi[k=1]", "snr_phi[k=4]"}
    assert (out / "snr.txt").exists()


@pytest.mark.integration
def test_theory_rows_and_metrics_reach_the_business_log(tmp_path, mocker):
    business_log = mocker.patch("agents.base_agent.sqlite_business_logger")
    run(["verify-theory", "--output-dir", str(tmp_path / "theory")] + SMALL_THEORY)
    published = [call.args[1].split(" ", 1)[0] for call in business_log.log.call_args_list]
    assert published.count("TheorySuiteChecked") == 6
    assert published.count("MetricComputed") == 12
    assert all(call.args[0] == "TheoryAgent" for call in business_log.log.call_args_list)


@pytest.mark.integration
def test_training_publishes_its_last_step(tmp_path, spike_config_file, mocker):
    business_log = mocker.patch("agents.base_agent.sqlite_business_logger")
    run(["simulate", "--frames", "200", "--output-dir", str(tmp_path / "sim")])
    run(["train", "--config", str(spike_config_file), "--objective", "iwae", "--k", "2", "--steps", "2",
         "--trace", str(tmp_path / "sim" / "neuron0.csv"), "--output-dir", str(tmp_path / "train")])
    messages = [call.args[1] for call in business_log.log.call_args_list if call.args[0] == "TrainAgent"]
    steps = [m for m in messages if m.startswith("TrainingStepCompleted")]
    assert len(steps) == 1
    assert '"step":2' in steps[0]


@pytest.mark.integration
def test_eval_times_both_inference_paths(tmp_path, spike_config_file):
    sim_dir, train_dir, eval_dir = tmp_path / "sim", tmp_path / "train", tmp_path / "eval"
    run(["simulate", "--frames", "200", "--output-dir", str(sim_dir)])
    trace_file = str(sim_dir / "neuron0.csv")
    run(["train", "--config", str(spike_config_file), "--objective", "iw-avb", "--k", "2", "--steps", "1",
         "--trace", trace_file, "--output-dir", str(train_dir)])
    status = run(["eval", "--checkpoint", str(train_dir / "final.ckpt"), "--trace", trace_file, "--timing",
                  "--set", "evaluation.timing_frames=300", "--set", "evaluation.iwae_k=2",
                  "--output-dir", str(eval_dir)])
    assert status == EXIT_OK
    rows = (eval_dir / "timing.txt").read_text(encoding="utf-8").splitlines()[1:]
    assert [row.split("\t")[0] for row in rows] == ["parallel", "sequential"]
    names = [m.name for m in parse_report(eval_dir / "metrics.txt")]
    assert {"inference_seconds[parallel]", "inference_seconds[sequential]", "inference_speedup"} <= set(names)
