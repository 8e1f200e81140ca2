from types import SimpleNamespace

import numpy as np
# noinspection PyPackageRequirements
import pytest

import tensor as T
from datasets import linear_gaussian_log_marginal
from errors import ConfigurationError, NonFiniteLossError
from networks import DenseDiscriminator, discriminate
from objectives import elbo
from tensor import RandomSource, Tensor, parameter
from trainer import (DISC, GEN_INF, SGD, Adam, DataStream, TrainState, fit_discriminator, load_checkpoint,
                     make_optimizer, read_training_log, save_checkpoint, step_schedules, train)


@pytest.fixture
def gaussian_data(rng):
    return rng.gaussian((12, 2))


def test_sgd_ascends_along_the_gradient():
    p = parameter([1.0, 2.0])
    SGD(0.1).step([p], [np.array([1.0, -2.0])])
    np.testing.assert_allclose(p.values, [1.1, 1.8])


def test_adam_first_step_is_the_learning_rate_times_the_sign():
    p = parameter([0.0, 0.0])
    opt = Adam(0.01)
    opt.step([p], [np.array([3.0, -0.5])])
    np.testing.assert_allclose(p.values, [0.01, -0.01], rtol=1e-6)
    assert opt.t == 1


def test_adam_state_round_trip():
    p = parameter([0.0])
    opt = Adam(0.01)
    for g in (1.0, 2.0):
        opt.step([p], [np.array([g])])
    restored = Adam(0.01)
    restored.load_state_arrays(opt.state_arrays(), opt.t)
    q = parameter(p.values.copy())
    opt.step([p], [np.array([0.5])])
    restored.step([q], [np.array([0.5])])
    np.testing.assert_array_equal(p.values, q.values)


def test_schedule_alternates_generator_and_discriminator_updates(make_config):
    config = make_config("gaussian", "iw-avb", training={"n_disc": 2})
    schedule = step_schedules(config.training, config.objective)
    assert [next(schedule) for _ in range(6)] == [GEN_INF, DISC, DISC, GEN_INF, DISC, DISC]


def test_schedule_without_discriminator(make_config):
    config = make_config("gaussian", "iwae")
    schedule = step_schedules(config.training, config.objective)
    assert {next(schedule) for _ in range(4)} == {GEN_INF}


def test_adversarial_family_needs_discriminator_updates(make_config):
    config = make_config("gaussian", "avb", training={"n_disc": 0})
    with pytest.raises(ConfigurationError):
        step_schedules(config.training, config.objective)


def test_data_stream_is_determined_by_its_position():
    data = np.arange(10.0).reshape(10, 1)
    stream = DataStream(data, 4, seed=3)
    first, second = stream.next_batch(), stream.next_batch()
    assert len(np.intersect1d(first, second)) == 0
    third = stream.next_batch()
    assert stream.state() == {"epoch": 1, "cursor": 4}
    replay = DataStream(data, 4, seed=3, epoch=1, cursor=0)
    np.testing.assert_array_equal(replay.next_batch(), third)


def test_data_stream_rejects_oversized_batches():
    with pytest.raises(ConfigurationError):
        DataStream(np.zeros((3, 2)), 4, seed=0)


def test_training_writes_log_and_final_checkpoint(make_config, gaussian_data, tmp_path):
    config = make_config("gaussian", "iw-avb", training={"max_steps": 3})
    state = train(gaussian_data, config, tmp_path)
    assert state.step == 3
    log = read_training_log(tmp_path / "train_log.jsonl")
    assert [record.step for record in log] == [1, 2, 3]
    assert all(record.discriminator is not None for record in log)
    assert (tmp_path / "final.ckpt").exists()


def test_checkpoint_restores_parameters_and_position(make_config, gaussian_data, tmp_path):
    config = make_config("gaussian", "iwae", training={"max_steps": 2, "batch_size": 5})
    state = train(gaussian_data, config)
    path = save_checkpoint(state, tmp_path / "state.ckpt")
    restored = load_checkpoint(path)
    assert restored.step == 2
    assert restored.data_state == state.data_state
    assert restored.history == state.history
    for name, values in state.model.state_dict().items():
        np.testing.assert_array_equal(restored.model.state_dict()[name], values)


def test_resumed_training_matches_uninterrupted_training(make_config, gaussian_data, tmp_path):
    short = make_config("gaussian", "iw-avb", training={"max_steps": 3})
    full = make_config("gaussian", "iw-avb", training={"max_steps": 6})
    interrupted = train(gaussian_data, short, tmp_path)
    resumed = train(gaussian_data, full, state=load_checkpoint(tmp_path / "final.ckpt"))
    straight = train(gaussian_data, full)
    np.testing.assert_allclose(resumed.history, straight.history, rtol=1e-12)
    for name, values in straight.model.state_dict().items():
        np.testing.assert_allclose(resumed.model.state_dict()[name], values, rtol=1e-12)
    assert interrupted.step == 3


def test_non_finite_loss_leaves_a_diagnostic_checkpoint(make_config, gaussian_data, tmp_path, mocker):
    nan = Tensor(np.nan)
    mocker.patch("trainer.training_losses", return_value=SimpleNamespace(generator=nan, inference=nan, value=np.nan))
    config = make_config("gaussian", "iwae")
    with pytest.raises(NonFiniteLossError) as excinfo:
        train(gaussian_data, config, tmp_path)
    assert excinfo.value.step == 0
    assert excinfo.value.checkpoint_path.endswith("diagnostic_step0.ckpt")
    assert load_checkpoint(excinfo.value.checkpoint_path).step == 0


def test_early_stop_on_plateau(make_config, gaussian_data):
    config = make_config("gaussian", "vae", training={"max_steps": 50, "early_stop": True, "plateau_window": 2,
                                                      "plateau_tolerance": 1e6})
    assert train(gaussian_data, config).step == 4


def test_fresh_state_has_one_optimizer_per_network(make_config):
    state = TrainState.fresh(make_config("gaussian", "iw-aae"))
    assert set(state.optimizers) == {"generator", "encoder", "discriminator"}
    assert np.isnan(state.running_mean)


@pytest.mark.slow
def test_fitted_discriminator_recovers_the_gaussian_log_ratio(small_architecture):
    # a linear head is the family holding log N(z; 1, 1) - log N(z; 0, 1) = z - 1/2
    architecture = small_architecture.model_copy(update={"discriminator_hidden": []})
    disc = DenseDiscriminator("latent-only", 1, 1, architecture, RandomSource(0))

    def sample_q(rng):
        return None, 1.0 + rng.gaussian((4096, 1))

    def sample_p(rng):
        return None, rng.gaussian((4096, 1))

    trajectory = fit_discriminator(disc, sample_q, sample_p, steps=5000, lr=0.002, rng=RandomSource(1), optimizer="adam")
    assert np.mean(trajectory[-100:]) > trajectory[0]
    grid = np.linspace(-3.0, 3.0, 61)
    with T.no_grad():
        logits = discriminate(disc, None, grid[:, None]).values
    assert np.max(np.abs(logits - (grid - 0.5))) < 0.1


@pytest.mark.slow
def test_training_improves_the_bound(make_config, rng):
    data = np.array([[1.0, -1.0]]) + 0.3 * rng.gaussian((64, 2))
    config = make_config("gaussian", "iwae", training={"max_steps": 300, "batch_size": 16, "lr_generator": 0.01,
                                                       "lr_inference": 0.01})
    state = train(data, config)
    assert np.mean(state.history[-30:]) > np.mean(state.history[:30])


@pytest.mark.parametrize("optimizer", ["sgd", "adam"])
def test_zero_learning_rates_leave_every_weight_unchanged(make_config, gaussian_data, optimizer):
    config = make_config("gaussian", "iw-avb", training={"max_steps": 6, "optimizer": optimizer, "lr_generator": 0.0,
                                                         "lr_inference": 0.0, "lr_discriminator": 0.0})
    trained = train(gaussian_data, config).model.state_dict()
    initial = TrainState.fresh(config).model.state_dict()
    assert trained.keys() == initial.keys()
    for name, values in initial.items():
        np.testing.assert_array_equal(trained[name], values, err_msg=name)


def test_identical_runs_reproduce_the_loss_trajectory(make_config, gaussian_data):
    config = make_config("gaussian", "iw-aae", training={"max_steps": 8})
    first, second = train(gaussian_data, config), train(gaussian_data, config)
    assert first.history == second.history
    for name, values in first.model.state_dict().items():
        np.testing.assert_array_equal(second.model.state_dict()[name], values, err_msg=name)


def _scalar_config(make_config, small_architecture, family: str, k: int, **sections):
    architecture = small_architecture.model_copy(update={"hidden_widths": [], "latent_dim": 1})
    return make_config("gaussian", family, k=k, data_dim=1, model={"architecture": architecture.model_dump()},
                       **sections)


@pytest.mark.slow
def test_vae_reaches_the_marginal_of_its_own_generator(make_config, small_architecture, rng):
    config = _scalar_config(make_config, small_architecture, "vae", 1, objective={"analytic_kl": True},
                            training={"max_steps": 3000, "batch_size": 32, "lr_generator": 0.01, "lr_inference": 0.01})
    data = np.sqrt(2.0) * rng.gaussian((512, 1))
    model = train(data, config).model
    held_out = np.linspace(-2.5, 2.5, 21)[:, None]
    with T.no_grad():
        bound = elbo(model, held_out, 2000, rng, analytic_kl=True).item()
    params = model.generator.named_parameters()
    exact = linear_gaussian_log_marginal(held_out, params["out.weight"].values, params["out.bias"].values, 1.0)
    assert bound <= exact.mean() + 0.01
    assert bound == pytest.approx(exact.mean(), abs=0.05)


@pytest.mark.slow
def test_iwavb_discriminator_tracks_the_analytic_log_ratio(make_config, small_architecture, scalar_gaussian_model,
                                                            rng):
    architecture = small_architecture.model_copy(update={"hidden_widths": [], "latent_dim": 1,
                                                         "discriminator_hidden": [32, 32]})
    config = _scalar_config(make_config, architecture, "iw-avb", 4,
                            training={"max_steps": 2000, "batch_size": 32, "lr_generator": 0.002,
                                      "lr_inference": 0.002, "lr_discriminator": 0.005})
    disc = DenseDiscriminator("joint", 1, 1, architecture, RandomSource(2))
    model = scalar_gaussian_model(slope=0.2, variance=1.0, discriminator=disc)
    training = config.training
    optimizers = {"generator": make_optimizer(training, training.lr_generator),
                  "encoder": make_optimizer(training, training.lr_inference),
                  "discriminator": make_optimizer(training, training.lr_discriminator)}
    state = TrainState(config, model, RandomSource(training.seed), optimizers)
    train(np.sqrt(2.0) * rng.gaussian((512, 1)), config, state=state)

    x = np.sqrt(2.0) * rng.gaussian((2000, 1))
    with T.no_grad():
        z = model.encoder.sample(x, model.encoder.draw_noise(rng, x.shape)).z
        analytic = (model.encoder.log_prob(x, z) - model.prior.log_prob(z)).values
        logits = discriminate(disc, x, z.values).values
    assert np.corrcoef(logits, analytic)[0, 1] > 0.95
