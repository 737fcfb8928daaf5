"""Per-task optimizers: Adam on network weights, MMA on element densities."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .fem import MaterialModel, assemble_solve, compliance_sensitivities
from .filters import (
    AMPLIFICATION,
    density_filter_operator,
    project_backward,
    sigmoid_volume_project,
    threshold_volume_preserving,
)
from .network import NetworkParameters, backward, forward, network_inputs
from .taskgen import Task


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-4
    max_iters: int = 200
    min_iters: int = 10
    eps: float = 1e-5
    filter_radius: float | None = None  # None: nelx / 32
    amplification: float = AMPLIFICATION
    material: MaterialModel = field(default_factory=MaterialModel)
    solver: str = "auto"
    mma_move: float = 0.2
    mma_asyinit: float = 0.5
    mma_asyincr: float = 1.2
    mma_asydecr: float = 0.7


# ---------------------------------------------------------------- Adam

@dataclass(eq=False)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, n: int) -> AdamState:
        return cls(np.zeros(n), np.zeros(n))


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray, lr: float) -> tuple[AdamState, np.ndarray]:
    if grad.shape != params.shape or state.m.shape != params.shape:
        raise ValueError("Adam state, parameters and gradient differ in shape")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("non-finite gradient passed to Adam")
    t = state.t + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grad
    v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    m_hat = m / (1 - state.beta1**t)
    v_hat = v / (1 - state.beta2**t)
    new = AdamState(m, v, t, state.beta1, state.beta2, state.eps)
    return new, params - lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------- stopping

def stopping_check(trace, eps: float = 1e-5, min_iters: int = 10) -> bool:
    """Relative loss-change test, only once ``len(trace) >= min_iters``."""
    if len(trace) < max(min_iters, 2):
        return False
    prev, cur = trace[-2], trace[-1]
    return abs(cur - prev) < eps * (1 + abs(prev))


@dataclass(eq=False)
class RunRecord:
    losses: list[float] = field(default_factory=list)
    volumes: list[float] = field(default_factory=list)
    iterations: int = 0
    stop_reason: str = ""
    c_cont: float = float("nan")
    c_thresh: float = float("nan")
    wall_time: float = 0.0
    design: np.ndarray | None = None
    binary: np.ndarray | None = None


def run_loop(
    evaluate: Callable[[np.ndarray], tuple[float, object]],
    update: Callable[[np.ndarray, object], np.ndarray],
    x0: np.ndarray,
    cfg: OptimConfig,
    record: RunRecord,
    volume_of: Callable[[object], float],
):
    """Evaluate, test the stopping rule, update; returns (final x, last evaluation).

    The iterate that triggers the stop is the final design, so no update is wasted.
    """
    x = x0
    for it in range(1, cfg.max_iters + 1):
        loss, info = evaluate(x)
        if not np.isfinite(loss):
            raise NonFiniteError(f"non-finite loss at iteration {it}")
        record.losses.append(float(loss))
        record.volumes.append(volume_of(info))
        record.iterations = it
        if stopping_check(record.losses, cfg.eps, cfg.min_iters):
            record.stop_reason = "criterion"
            return x, info
        if it == cfg.max_iters:
            record.stop_reason = "budget"
            return x, info
        x = update(x, info)
    raise ValueError("max_iters must be >= 1")


def _finish(task: Task, design: np.ndarray, compliance: float, cfg: OptimConfig, record: RunRecord) -> None:
    record.design = design
    record.c_cont = compliance
    record.binary = threshold_volume_preserving(design, task.vstar)
    record.c_thresh = assemble_solve(task.disc, task.bc, cfg.material, record.binary, cfg.solver).compliance


# ---------------------------------------------------------------- neural pipeline

@dataclass(eq=False)
class NeuralEvaluation:
    loss: float
    grad: np.ndarray
    design: np.ndarray
    compliance: float
    shift: float


class NeuralObjective:
    """Normalized compliance of the network's projected design, with its parameter gradient."""

    def __init__(self, task: Task, params: NetworkParameters, cfg: OptimConfig):
        if not task.annotated:
            raise ValueError(f"task {task.task_id!r} lacks strain energy / c_ref")
        self.task = task
        self.net = params.config
        self.cfg = cfg
        self.inputs = network_inputs(task.disc, task.energy if self.net.conditioned else None)
        self.filter = density_filter_operator(task.disc, cfg.filter_radius)

    def design(self, theta: np.ndarray) -> np.ndarray:
        raw = forward(self.net, theta, self.inputs)
        rho, _ = sigmoid_volume_project(self.filter(raw), self.task.vstar, self.cfg.amplification)
        return rho

    def __call__(self, theta: np.ndarray, with_grad: bool = True) -> NeuralEvaluation:
        task, cfg = self.task, self.cfg
        if with_grad:
            raw, cache = forward(self.net, theta, self.inputs, keep_cache=True)
        else:
            raw = forward(self.net, theta, self.inputs)
        rho_bar = self.filter(raw)
        rho, b = sigmoid_volume_project(rho_bar, task.vstar, cfg.amplification)
        state = assemble_solve(task.disc, task.bc, cfg.material, rho, cfg.solver)
        loss = state.compliance / task.c_ref
        grad = None
        if with_grad:
            d_rho = compliance_sensitivities(state, rho, cfg.material) / task.c_ref
            d_bar = project_backward(rho_bar, rho, b, d_rho, cfg.amplification)
            grad = backward(self.net, theta, cache, self.filter.transpose(d_bar))
        return NeuralEvaluation(loss, grad, rho, state.compliance, b)


def adapt(
    objective: NeuralObjective, theta: np.ndarray, steps: int, lr: float, final_eval: bool = False
) -> tuple[np.ndarray, float]:
    """``steps`` Adam updates from a fresh state. Returns (theta, last loss seen).

    With ``final_eval`` the returned loss is measured after the last update.
    """
    adam = AdamState.fresh(theta.size)
    loss = float("nan")
    for _ in range(steps):
        ev = objective(theta)
        if not np.isfinite(ev.loss):
            raise NonFiniteError("non-finite loss during adaptation")
        loss = ev.loss
        adam, theta = adam_step(adam, theta, ev.grad, lr)
    if final_eval or steps == 0:
        loss = objective(theta, with_grad=False).loss
    return theta, loss


def neural_optimize(
    task: Task, params: NetworkParameters, cfg: OptimConfig | None = None
) -> tuple[RunRecord, NetworkParameters]:
    cfg = cfg or OptimConfig()
    objective = NeuralObjective(task, params, cfg)
    record = RunRecord()
    adam = AdamState.fresh(params.values.size)
    start = time.perf_counter()

    def evaluate(theta):
        ev = objective(theta)
        return ev.loss, ev

    def update(theta, ev):
        nonlocal adam
        adam, theta = adam_step(adam, theta, ev.grad, cfg.lr)
        return theta

    theta, last = run_loop(evaluate, update, params.values.copy(), cfg, record, lambda ev: float(ev.design.mean()))
    _finish(task, last.design, last.compliance, cfg, record)
    record.wall_time = time.perf_counter() - start
    return record, params.copy(theta)


def network_initial_design(task: Task, params: NetworkParameters, cfg: OptimConfig | None = None) -> np.ndarray:
    """Projected density the network produces for ``task`` before any update."""
    cfg = cfg or OptimConfig()
    return NeuralObjective(task, params, cfg).design(params.values)


# ---------------------------------------------------------------- MMA

class MMAInfeasibleError(RuntimeError):
    pass


@dataclass(eq=False)
class MMAState:
    x: np.ndarray
    xold1: np.ndarray
    xold2: np.ndarray
    low: np.ndarray
    upp: np.ndarray
    iteration: int = 0
    xmin: float = 0.0
    xmax: float = 1.0

    @classmethod
    def start(cls, x0: np.ndarray, xmin: float = 0.0, xmax: float = 1.0) -> MMAState:
        x0 = np.asarray(x0, dtype=float)
        return cls(x0.copy(), x0.copy(), x0.copy(), np.full_like(x0, xmin), np.full_like(x0, xmax), 0, xmin, xmax)


_RAA0 = 1e-5
_ALBEFA = 0.1


def _mma_terms(df: np.ndarray, ux: np.ndarray, xl: np.ndarray, span: float):
    pos, neg = np.maximum(df, 0.0), np.maximum(-df, 0.0)
    reg = 0.001 * (pos + neg) + _RAA0 / span
    return (pos + reg) * ux**2, (neg + reg) * xl**2


def mma_step(
    state: MMAState,
    f0: float,
    df0: np.ndarray,
    g: float,
    dg: np.ndarray,
    move: float = 0.2,
    asyinit: float = 0.5,
    asyincr: float = 1.2,
    asydecr: float = 0.7,
) -> MMAState:
    """One MMA iteration for ``min f0`` subject to a single constraint ``g <= 0``.

    The convex subproblem is solved through its dual, a monotone 1-D problem
    in the constraint multiplier, by bisection. ``f0`` itself only shifts the
    approximation and does not affect the step.
    """
    x, span = state.x, state.xmax - state.xmin
    if not (np.all(np.isfinite(df0)) and np.all(np.isfinite(dg)) and np.isfinite(g)):
        raise NonFiniteError("non-finite gradient passed to MMA")
    k = state.iteration + 1
    if k <= 2:
        low = x - asyinit * span
        upp = x + asyinit * span
    else:
        trend = (x - state.xold1) * (state.xold1 - state.xold2)
        gamma = np.where(trend > 0, asyincr, np.where(trend < 0, asydecr, 1.0))
        low = x - gamma * (state.xold1 - state.low)
        upp = x + gamma * (state.upp - state.xold1)
        low = np.clip(low, x - 10 * span, x - 0.01 * span)
        upp = np.clip(upp, x + 0.01 * span, x + 10 * span)

    alpha = np.maximum.reduce([low + _ALBEFA * (x - low), x - move * span, np.full_like(x, state.xmin)])
    beta = np.minimum.reduce([upp - _ALBEFA * (upp - x), x + move * span, np.full_like(x, state.xmax)])
    ux, xl = upp - x, x - low
    p0, q0 = _mma_terms(df0, ux, xl, span)
    p1, q1 = _mma_terms(dg, ux, xl, span)
    r1 = g - np.sum(p1 / ux + q1 / xl)

    def primal(lam):
        sp_, sq = np.sqrt(p0 + lam * p1), np.sqrt(q0 + lam * q1)
        return np.clip((sp_ * low + sq * upp) / (sp_ + sq), alpha, beta)

    def constraint(xn):
        return np.sum(p1 / (upp - xn) + q1 / (xn - low)) + r1

    x_new = primal(0.0)
    if constraint(x_new) > 0:
        lo, hi = 0.0, 1.0
        while constraint(primal(hi)) > 0 and hi < 1e40:
            lo, hi = hi, hi * 10
        if constraint(primal(hi)) > 0:
            lowest = g + np.sum(np.minimum(dg * (state.xmin - x), dg * (state.xmax - x)))
            if lowest > 0:
                raise MMAInfeasibleError("constraint cannot be met anywhere in the box")
            # only the move limit blocks feasibility; take the most feasible point
            x_new = primal(hi)
        else:
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                if not lo < mid < hi:
                    break
                if constraint(primal(mid)) > 0:
                    lo = mid
                else:
                    hi = mid
            # the upper end is always on the feasible side of the approximation
            x_new = primal(hi)
    return MMAState(x_new, x.copy(), state.xold1.copy(), low, upp, k, state.xmin, state.xmax)


# ---------------------------------------------------------------- standard pipeline

@dataclass(eq=False)
class DensityEvaluation:
    loss: float
    compliance: float
    design: np.ndarray
    grad: np.ndarray
    volume_gap: float
    volume_grad: np.ndarray


def standard_optimize(task: Task, cfg: OptimConfig | None = None, init: np.ndarray | None = None) -> RunRecord:
    """Density-based TO: filter, FE, MMA with an explicit volume constraint.

    ``init`` defaults to the uniform design at the task's volume fraction; a
    network-generated design works the same way.
    """
    cfg = cfg or OptimConfig()
    if not task.annotated:
        raise ValueError(f"task {task.task_id!r} lacks c_ref")
    n = task.disc.n_elem
    x0 = np.full(n, task.vstar) if init is None else np.asarray(init, dtype=float).copy()
    if x0.shape != (n,) or x0.min() < 0 or x0.max() > 1:
        raise ValueError("initial design must be a length-N vector in [0, 1]")
    H = density_filter_operator(task.disc, cfg.filter_radius)
    volume_grad = H.transpose(np.full(n, 1.0 / n))
    record = RunRecord()
    mma = MMAState.start(x0)
    start = time.perf_counter()

    def evaluate(x):
        rho = H(x)
        state = assemble_solve(task.disc, task.bc, cfg.material, rho, cfg.solver)
        grad = H.transpose(compliance_sensitivities(state, rho, cfg.material)) / task.c_ref
        ev = DensityEvaluation(
            state.compliance / task.c_ref, state.compliance, rho, grad, float(rho.mean()) - task.vstar, volume_grad
        )
        return ev.loss, ev

    def update(x, ev):
        nonlocal mma
        mma = mma_step(
            mma, ev.loss, ev.grad, ev.volume_gap, ev.volume_grad,
            cfg.mma_move, cfg.mma_asyinit, cfg.mma_asyincr, cfg.mma_asydecr,
        )
        return mma.x

    _, last = run_loop(evaluate, update, x0, cfg, record, lambda ev: float(ev.design.mean()))
    _finish(task, last.design, last.compliance, cfg, record)
    record.wall_time = time.perf_counter() - start
    return record
