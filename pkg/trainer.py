"""
Alternating optimization of generator, inference network and discriminator.

Each step updates the generator and the inference network on their own
objectives (drawn from one shared posterior sample) and is followed by
``n_disc`` discriminator updates. Every update is gradient *ascent*.
"""
import itertools
import json
import time
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

import tensor as T
from configuration import ExperimentConfig, ObjectiveSpec, TrainingConfig, build_experiment_config
from errors import ConfigurationError, NonFiniteLossError
from events import TrainingStepCompleted
from logger import logger
from networks import ModelTriple, build_model_triple, read_checkpoint, write_checkpoint
from objectives import discriminator_loss, discriminator_objective, training_losses
from tensor import RandomSource, Tensor, seeded_rng

GEN_INF = "gen+inf"
DISC = "disc"


# optimizers

class SGD:
    kind = "sgd"

    def __init__(self, lr: float):
        self.lr = lr
        self.t = 0

    def step(self, params: Sequence[Tensor], grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        for p, g in zip(params, grads):
            p.values = p.values + self.lr * g

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {}

    def load_state_arrays(self, arrays: Dict[str, np.ndarray], t: int) -> None:
        self.t = t


class Adam:
    """Adaptive-moment ascent with bias correction."""

    kind = "adam"

    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m: List[np.ndarray] = []
        self.v: List[np.ndarray] = []

    def step(self, params: Sequence[Tensor], grads: Sequence[np.ndarray]) -> None:
        if not self.m:
            self.m = [np.zeros_like(p.values) for p in params]
            self.v = [np.zeros_like(p.values) for p in params]
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            update = (self.m[i] / correction1) / (np.sqrt(self.v[i] / correction2) + self.eps)
            p.values = p.values + self.lr * update

    def state_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {f"m.{i}": m for i, m in enumerate(self.m)}
        arrays.update({f"v.{i}": v for i, v in enumerate(self.v)})
        return arrays

    def load_state_arrays(self, arrays: Dict[str, np.ndarray], t: int) -> None:
        count = sum(1 for name in arrays if name.startswith("m."))
        self.m = [arrays[f"m.{i}"].copy() for i in range(count)]
        self.v = [arrays[f"v.{i}"].copy() for i in range(count)]
        self.t = t


def make_optimizer(training: TrainingConfig, lr: float):
    if training.optimizer == "sgd":
        return SGD(lr)
    return Adam(lr, betas=tuple(training.betas))


# schedule and data order

def step_schedules(training: TrainingConfig, spec: ObjectiveSpec) -> Iterator[str]:
    """Endless alternation: one generator/inference update, then ``n_disc`` discriminator updates."""
    if spec.uses_discriminator and training.n_disc == 0:
        raise ConfigurationError(f"{spec.family} needs at least one discriminator update per step", key="training.n_disc")
    cycle = [GEN_INF] + ([DISC] * training.n_disc if spec.uses_discriminator else [])
    return itertools.cycle(cycle)


class DataStream:
    """Seeded epoch-wise shuffling; the (epoch, cursor) pair fully determines what comes next."""

    def __init__(self, data: np.ndarray, batch_size: int, seed: int, epoch: int = 0, cursor: int = 0):
        self.data = np.asarray(data, dtype=np.float64)
        if self.data.shape[0] == 0:
            raise ConfigurationError("training data is empty", key="data")
        if batch_size > self.data.shape[0]:
            raise ConfigurationError(f"batch size {batch_size} exceeds the {self.data.shape[0]} available examples",
                                     key="training.batch_size")
        self.batch_size = batch_size
        self.seed = seed
        self.epoch = epoch
        self.cursor = cursor
        self._order = self._permutation(epoch)

    def _permutation(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.seed, epoch]).permutation(self.data.shape[0])

    def next_batch(self) -> np.ndarray:
        if self.cursor + self.batch_size > self.data.shape[0]:
            self.epoch += 1
            self.cursor = 0
            self._order = self._permutation(self.epoch)
            logger.debug(f"Data exhausted; reshuffled for epoch {self.epoch}")
        rows = self._order[self.cursor:self.cursor + self.batch_size]
        self.cursor += self.batch_size
        return self.data[rows]

    def state(self) -> Dict[str, int]:
        return {"epoch": self.epoch, "cursor": self.cursor}


# train state and checkpoints

class TrainState:
    def __init__(self, config: ExperimentConfig, model: ModelTriple, rng: RandomSource, optimizers: Dict[str, object],
                 step: int = 0, data_state: Optional[Dict[str, int]] = None, history: Optional[List[float]] = None):
        self.config = config
        self.model = model
        self.rng = rng
        self.optimizers = optimizers
        self.step = step
        self.data_state = data_state or {"epoch": 0, "cursor": 0}
        self.history = history or []

    @classmethod
    def fresh(cls, config: ExperimentConfig) -> "TrainState":
        rng = seeded_rng(config.training.seed)
        model = build_model_triple(config, rng)
        training = config.training
        lrs = {"generator": training.lr_generator, "encoder": training.lr_inference,
               "discriminator": training.lr_discriminator}
        optimizers = {name: make_optimizer(training, lrs[name]) for name in model.networks()}
        return cls(config, model, rng, optimizers)

    @property
    def running_mean(self) -> float:
        recent = self.history[-self.config.training.plateau_window:]
        return float(np.mean(recent)) if recent else float("nan")


def save_checkpoint(state: TrainState, path) -> Path:
    arrays = {f"model.{k}": v for k, v in state.model.state_dict().items()}
    optimizer_header = {}
    for name, opt in state.optimizers.items():
        optimizer_header[name] = {"kind": opt.kind, "t": opt.t}
        arrays.update({f"optim.{name}.{k}": v for k, v in opt.state_arrays().items()})
    header = {
        "architecture": state.config.model.architecture.model_dump(),
        "objective": state.config.objective.family,
        "seed": state.config.training.seed,
        "step": state.step,
        "config": state.config.model_dump(),
        "rng_state": state.rng.get_state(),
        "data_state": state.data_state,
        "history": state.history,
        "optimizers": optimizer_header,
    }
    return write_checkpoint(path, header, arrays)


def load_checkpoint(path) -> TrainState:
    header, arrays = read_checkpoint(path)
    config = build_experiment_config(header["config"])
    state = TrainState.fresh(config)
    state.model.load_state_dict({k[len("model."):]: v for k, v in arrays.items() if k.startswith("model.")})
    for name, opt in state.optimizers.items():
        prefix = f"optim.{name}."
        opt.load_state_arrays({k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)},
                              header["optimizers"][name]["t"])
    state.rng.set_state(header["rng_state"])
    state.step = header["step"]
    state.data_state = dict(header["data_state"])
    state.history = list(header["history"])
    logger.info(f"Loaded checkpoint {path} at step {state.step} ({header['objective']})")
    return state


# training loop

def _plateaued(history: List[float], window: int, tolerance: float) -> bool:
    if len(history) < 2 * window:
        return False
    previous = np.mean(history[-2 * window:-window])
    current = np.mean(history[-window:])
    return abs(current - previous) <= tolerance * max(abs(previous), 1e-12)


def _check_finite(state: TrainState, values: Dict[str, float], output_dir: Optional[Path]) -> None:
    bad = {name: v for name, v in values.items() if v is not None and not np.isfinite(v)}
    if not bad:
        return
    checkpoint_path = ""
    if output_dir is not None:
        checkpoint_path = str(save_checkpoint(state, output_dir / f"diagnostic_step{state.step}.ckpt"))
    raise NonFiniteLossError(f"non-finite loss at step {state.step}: {bad}", step=state.step, checkpoint_path=checkpoint_path)


def train(data: np.ndarray, config: ExperimentConfig, output_dir=None, state: Optional[TrainState] = None,
          log_name: str = "train_log.jsonl") -> TrainState:
    """Runs (or resumes) training up to ``config.training.max_steps`` generator/inference updates."""
    training, spec = config.training, config.objective
    state = state or TrainState.fresh(config)
    model = state.model
    output_dir = Path(output_dir) if output_dir is not None else None
    stream = DataStream(data, training.batch_size, training.seed, **state.data_state)
    schedule = step_schedules(training, spec)
    cycle_length = 1 + (training.n_disc if spec.uses_discriminator else 0)

    theta = model.generator.trainable_parameters()
    phi = model.encoder.trainable_parameters()
    psi = model.discriminator.trainable_parameters() if model.discriminator is not None else []

    log_handle = None
    if output_dir is not None:
        output_dir.mkdir(parents=True, exist_ok=True)
        log_handle = (output_dir / log_name).open("a", encoding="utf-8")
    logger.info(f"Training {spec.family} (k={spec.k}) from step {state.step} to {training.max_steps}")

    try:
        steps = tqdm(range(state.step, training.max_steps), disable=not training.progress, desc=spec.family)
        for _ in steps:
            started = time.perf_counter()
            batch = stream.next_batch()
            disc_value = None
            for phase in itertools.islice(schedule, cycle_length):
                if phase == GEN_INF:
                    terms = training_losses(model, spec, batch, state.rng)
                    values = {"generator": terms.generator.item(), "inference": terms.inference.item(), "bound": terms.value}
                    _check_finite(state, values, output_dir)
                    g_theta = T.grad(terms.generator, theta)
                    g_phi = T.grad(terms.inference, phi)
                    state.optimizers["generator"].step(theta, g_theta)
                    state.optimizers["encoder"].step(phi, g_phi)
                else:
                    objective = discriminator_objective(model, spec, batch, state.rng)
                    disc_value = objective.item()
                    _check_finite(state, {"discriminator": disc_value}, output_dir)
                    state.optimizers["discriminator"].step(psi, T.grad(objective, psi))
            state.step += 1
            state.data_state = stream.state()
            state.history.append(values["bound"])
            record = TrainingStepCompleted(step=state.step, generator=values["generator"], inference=values["inference"],
                                           discriminator=disc_value, bound=values["bound"],
                                           wall_ms=(time.perf_counter() - started) * 1000.0)
            logger.debug(f"step {state.step}: bound {values['bound']:.5f}")
            if log_handle is not None:
                log_handle.write(record.model_dump_json() + "\n")
            if output_dir is not None and training.checkpoint_every and state.step % training.checkpoint_every == 0:
                save_checkpoint(state, output_dir / f"step{state.step}.ckpt")
            if training.early_stop and _plateaued(state.history, training.plateau_window, training.plateau_tolerance):
                logger.info(f"Plateau reached at step {state.step}; stopping early")
                break
    finally:
        if log_handle is not None:
            log_handle.close()

    if output_dir is not None:
        save_checkpoint(state, output_dir / "final.ckpt")
    logger.info(f"Training finished at step {state.step}; running bound {state.running_mean:.4f}")
    return state


def read_training_log(path) -> List[TrainingStepCompleted]:
    with Path(path).open("r", encoding="utf-8") as handle:
        return [TrainingStepCompleted(**json.loads(line)) for line in handle if line.strip()]


# standalone density-ratio fitting

def fit_discriminator(disc, sample_q: Callable[[RandomSource], Tuple], sample_p: Callable[[RandomSource], Tuple],
                      steps: int, lr: float, rng: RandomSource, optimizer: str = "sgd") -> List[float]:
    """Maximizes the discriminator objective on batches from the two samplers; returns the trajectory."""
    opt = SGD(lr) if optimizer == "sgd" else Adam(lr)
    params = disc.trainable_parameters()
    trajectory = []
    for _ in range(steps):
        objective = discriminator_loss(disc, sample_q(rng), sample_p(rng))
        opt.step(params, T.grad(objective, params))
        trajectory.append(objective.item())
    return trajectory
