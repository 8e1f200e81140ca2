# noinspection PyPackageRequirements
import pytest
from pydantic import ValidationError

from configuration import (BiophysParams, ExperimentConfig, ObjectiveSpec, build_experiment_config, config_hash,
                           load_experiment_config, render_experiment_config)
from errors import ConfigurationError


def test_defaults_are_valid():
    config = ExperimentConfig()
    assert config.objective.family == "iw-avb"
    assert config.objective.discriminator_mode == "joint"
    assert config.biophys.frame_rate == pytest.approx(60.0)
    assert config.biophys.decay == pytest.approx(1.0 - (1.0 / 60.0) / 0.7)


@pytest.mark.parametrize("family, mode", [
    ("vae", "none"), ("iwae", "none"), ("avb", "joint"), ("iw-avb", "joint"),
    ("aae", "latent-only"), ("iw-aae", "latent-only"), ("vimco-fact", "none"), ("vimco-corr", "none"),
])
def test_discriminator_mode_follows_family(family, mode):
    spec = ObjectiveSpec(family=family)
    assert spec.discriminator_mode == mode
    assert spec.uses_discriminator == (mode != "none")


def test_mismatched_discriminator_mode_is_rejected():
    with pytest.raises(ValidationError):
        ObjectiveSpec(family="iw-aae", discriminator_mode="joint")


def test_unstable_euler_step_is_rejected():
    with pytest.raises(ValidationError):
        BiophysParams(tau=0.01, delta=0.02)


def test_unknown_key_names_the_key():
    with pytest.raises(ConfigurationError) as excinfo:
        build_experiment_config({"training": {"batch_sise": 3}})
    assert excinfo.value.key == "training.batch_sise"


def test_invalid_value_names_the_key():
    with pytest.raises(ConfigurationError) as excinfo:
        load_experiment_config(None, ["objective.k=0"])
    assert excinfo.value.key == "objective.k"


def test_file_sections_and_overrides(tmp_path):
    path = tmp_path / "experiment.ini"
    path.write_text(
        "[model]\n"
        "problem = gaussian\n"
        "data_dim = 3\n"
        "architecture.hidden_widths = 16, 16\n"
        "\n"
        "[objective]\n"
        "family = iwae\n"
        "k = 5\n",
        encoding="utf-8",
    )
    config = load_experiment_config(str(path), ["objective.k=7"])
    assert config.model.problem == "gaussian"
    assert config.model.data_dim == 3
    assert config.model.architecture.hidden_widths == [16, 16]
    assert config.objective.k == 7


def test_missing_file_is_reported_with_its_path(tmp_path):
    missing = tmp_path / "absent.ini"
    with pytest.raises(FileNotFoundError, match="absent.ini"):
        load_experiment_config(str(missing))


def test_malformed_override_is_a_configuration_error():
    with pytest.raises(ConfigurationError):
        load_experiment_config(None, ["no_equals_sign"])
    with pytest.raises(ConfigurationError):
        load_experiment_config(None, ["k=3"])


def test_rendering_reloads_to_an_equal_config(tmp_path):
    config = load_experiment_config(None, ["objective.family=aae", "biophys.sigma=0.3", "training.betas=[0.5, 0.9]"])
    path = tmp_path / "config.ini"
    path.write_text(render_experiment_config(config), encoding="utf-8")
    assert load_experiment_config(str(path)) == config


def test_config_hash_tracks_every_override():
    base = load_experiment_config(None, ["objective.k=8"])
    assert config_hash(base) == config_hash(load_experiment_config(None, ["objective.k=8"]))
    assert config_hash(base) != config_hash(load_experiment_config(None, ["objective.k=9"]))
    assert config_hash(base) != config_hash(load_experiment_config(None, ["objective.k=8", "biophys.sigma=0.21"]))
    assert len(config_hash(base)) == 12
