"""Reptile meta-training, strain-energy identity pretraining, validation."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .fem import SingularSystemError, SolverNonConvergenceError
from .filters import BisectionError
from .network import NetworkParameters, backward, forward, network_inputs
from .optim import AdamState, NeuralObjective, NonFiniteError, OptimConfig, adam_step, adapt
from .taskgen import Task

log = logging.getLogger(__name__)

# failures that drop one task from a meta-batch instead of aborting training
TASK_FAILURES = (SingularSystemError, SolverNonConvergenceError, NonFiniteError, BisectionError)


@dataclass(frozen=True)
class MetaConfig:
    meta_iterations: int = 6000
    meta_batch: int = 5
    inner_steps: int = 10
    inner_lr: float = 1e-4
    outer_lr: float = 1e-6
    outer_optimizer: str = "adam"  # or "sgd": plain interpolation step
    validation_interval: int = 500
    validation_steps: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.meta_iterations < 0 or self.meta_batch < 1 or self.inner_steps < 0:
            raise ValueError(f"invalid counts in {self}")
        if self.inner_lr <= 0 or self.outer_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.outer_optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown outer optimizer {self.outer_optimizer!r}")


@dataclass(eq=False)
class Checkpoint:
    iteration: int
    params: NetworkParameters
    val_loss: float | None = None


@dataclass(eq=False)
class MetaResult:
    checkpoints: list[Checkpoint] = field(default_factory=list)
    # rows of (meta-iteration, mean inner final loss, validation loss or nan, wall time)
    log_rows: list[tuple[int, float, float, float]] = field(default_factory=list)
    skipped: int = 0

    @property
    def final(self) -> NetworkParameters:
        return self.checkpoints[-1].params

    def best(self) -> Checkpoint:
        scored = [c for c in self.checkpoints if c.val_loss is not None]
        if not scored:
            return self.checkpoints[-1]
        return min(scored, key=lambda c: c.val_loss)


def _lerp(a: np.ndarray, b: np.ndarray, t: float) -> np.ndarray:
    """``a + t (b - a)``, exact at ``t = 1`` and wherever ``a == b``."""
    d = b - a
    return a + t * d if t <= 0.5 else b - (1.0 - t) * d


def _epoch_order(n: int, rng: np.random.Generator):
    """Endless stream of task indices: a fresh permutation each epoch."""
    while True:
        yield from rng.permutation(n).tolist()


def reptile_train(
    tasks: list[Task],
    cfg: MetaConfig,
    init: NetworkParameters,
    optim_cfg: OptimConfig | None = None,
    validation: list[Task] | None = None,
) -> MetaResult:
    """Move the initialization toward the mean of task-adapted weights.

    The outer Adam step receives ``-(mean adapted - theta)`` as its gradient;
    the "sgd" variant moves ``theta`` a fraction ``lr`` of the way to the mean.
    """
    if not tasks:
        raise ValueError("meta-training needs at least one task")
    optim_cfg = optim_cfg or OptimConfig()
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0x4D455441,)))
    order = _epoch_order(len(tasks), rng)
    theta = init.values.copy()
    outer = AdamState.fresh(theta.size)
    result = MetaResult()
    start = time.perf_counter()

    def checkpoint(it):
        params = init.copy(theta.copy(), provenance="meta-learned")
        val = None
        if validation:
            val = evaluate_validation(params, validation, cfg.validation_steps, optim_cfg, cfg.inner_lr)
        result.checkpoints.append(Checkpoint(it, params, val))
        return val

    for it in range(1, cfg.meta_iterations + 1):
        batch = [next(order) for _ in range(cfg.meta_batch)]
        adapted, losses = [], []
        for idx in batch:
            objective = NeuralObjective(tasks[idx], init, optim_cfg)
            try:
                th, loss = adapt(objective, theta.copy(), cfg.inner_steps, cfg.inner_lr)
            except TASK_FAILURES as exc:
                log.warning("meta-iteration %d: skipping task %s (%s)", it, tasks[idx].task_id, exc)
                result.skipped += 1
                continue
            adapted.append(th)
            losses.append(loss)
        if adapted:
            # offsets from the first member keep the mean exact when members coincide
            base = adapted[0]
            mean = base + np.mean(np.asarray(adapted) - base, axis=0)
            if cfg.outer_optimizer == "adam":
                outer, theta = adam_step(outer, theta, theta - mean, cfg.outer_lr)
            else:
                theta = _lerp(theta, mean, cfg.outer_lr)
        val = float("nan")
        if cfg.validation_interval and it % cfg.validation_interval == 0:
            v = checkpoint(it)
            val = float("nan") if v is None else v
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        result.log_rows.append((it, mean_loss, val, time.perf_counter() - start))
        log.debug("meta-iteration %d: inner loss %.5f", it, mean_loss)
    if not result.checkpoints or result.checkpoints[-1].iteration != cfg.meta_iterations:
        checkpoint(cfg.meta_iterations)
    return result


def evaluate_validation(
    params: NetworkParameters,
    tasks: list[Task],
    steps: int = 10,
    optim_cfg: OptimConfig | None = None,
    lr: float = 1e-4,
) -> float:
    """Mean loss after ``steps`` fresh-Adam updates from ``params`` on each task."""
    optim_cfg = optim_cfg or OptimConfig()
    losses = []
    for task in tasks:
        _, loss = adapt(NeuralObjective(task, params, optim_cfg), params.values.copy(), steps, lr, final_eval=True)
        losses.append(loss)
    return float(np.mean(losses))


def identity_mse(prediction: np.ndarray, energy: np.ndarray) -> float:
    return float(np.mean((prediction - energy) ** 2))


def pretrain_identity(
    tasks: list[Task],
    init: NetworkParameters,
    epochs: int = 100,
    lr: float = 1e-5,
    seed: int = 0,
) -> tuple[NetworkParameters, list[float]]:
    """Fit the network to reproduce its strain-energy input (full batch per task).

    Returns the pretrained parameters and the mean MSE of every epoch.
    """
    cfg = init.config
    if not cfg.conditioned:
        raise ValueError("identity pretraining needs the strain-energy input")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0x50524554,)))
    theta = init.values.copy()
    adam = AdamState.fresh(theta.size)
    inputs = [network_inputs(t.disc, t.energy) for t in tasks]
    history = []
    for _ in range(epochs):
        epoch = []
        for idx in rng.permutation(len(tasks)):
            out, cache = forward(cfg, theta, inputs[idx], keep_cache=True)
            resid = out - tasks[idx].energy
            loss = float(np.mean(resid**2))
            if not np.isfinite(loss):
                raise NonFiniteError("non-finite pretraining loss")
            epoch.append(loss)
            grad = backward(cfg, theta, cache, 2.0 * resid / resid.size)
            adam, theta = adam_step(adam, theta, grad, lr)
        history.append(float(np.mean(epoch)))
    return init.copy(theta, provenance="pretrained"), history


def identity_loss(params: NetworkParameters, tasks: list[Task]) -> float:
    """Mean identity MSE of ``params`` over ``tasks``."""
    return float(np.mean([
        identity_mse(forward(params.config, params.values, network_inputs(t.disc, t.energy)), t.energy)
        for t in tasks
    ]))
