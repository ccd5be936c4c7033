"""Projected Adam descent on the perturbation, with plateau LR decay.

Only the image encoder adapter is consulted here; the captioning pipeline
never enters the loop.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .encoders.base import ImageEncoderAdapter, value_and_grad
from .errors import NonFiniteGradient, ShapeMismatch
from .objectives import ObjectiveSpec, cosine_similarity, cs_loss, cs_loss_grad, sim_loss, sim_loss_grad
from .types import AttackConfig, AttackResult, ImageTensor, l2_norm, linf_norm, validate_config

log = logging.getLogger(__name__)

ADAM_EPS = 1e-8
PLATEAU_THRESHOLD = 1e-4
# Below this max-abs gradient the iterate is treated as stationary.
STATIONARY_TOL = 1e-10
# Scale of the seeded tie-breaking direction; Adam normalizes it to ~lr.
DITHER_SCALE = 1e-6


@dataclass(frozen=True, eq=False)
class OptimizerState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    learning_rate: float = 0.01

    @classmethod
    def zeros(cls, shape, learning_rate: float) -> "OptimizerState":
        return cls(np.zeros(shape), np.zeros(shape), 0, learning_rate)


def adam_step(
    state: OptimizerState,
    grad: np.ndarray,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps_num: float = ADAM_EPS,
) -> tuple[OptimizerState, np.ndarray]:
    """Bias-corrected Adam. Returns the new state and the additive update."""
    grad = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradient("adam_step got a non-finite gradient")
    t = state.step_count + 1
    m = beta1 * state.first_moment + (1.0 - beta1) * grad
    v = beta2 * state.second_moment + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    update = -state.learning_rate * m_hat / (np.sqrt(v_hat) + eps_num)
    return OptimizerState(m, v, t, state.learning_rate), update


@dataclass(frozen=True)
class SchedulerState:
    best_loss: float = math.inf
    steps_since_improvement: int = 0
    patience: int = 30
    factor: float = 0.1
    threshold: float = PLATEAU_THRESHOLD


def _improves(loss: float, best: float, threshold: float) -> bool:
    if math.isinf(best):
        return loss < best
    return loss < best - threshold * abs(best)


def scheduler_step(state: SchedulerState, current_loss: float, lr: float) -> tuple[SchedulerState, float]:
    """Plateau detector: decay ``lr`` once ``patience`` non-improving steps pile up."""
    if _improves(current_loss, state.best_loss, state.threshold):
        return dataclasses.replace(state, best_loss=current_loss, steps_since_improvement=0), lr
    stale = state.steps_since_improvement + 1
    if stale >= state.patience:
        return dataclasses.replace(state, steps_since_improvement=0), lr * state.factor
    return dataclasses.replace(state, steps_since_improvement=stale), lr


def project_linf(delta: np.ndarray, epsilon: float) -> np.ndarray:
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    return np.clip(delta, -epsilon, epsilon)


def clamp_domain(img: ImageTensor | np.ndarray) -> ImageTensor:
    data = img.data if isinstance(img, ImageTensor) else np.asarray(img, dtype=np.float64)
    return ImageTensor(np.clip(data, 0.0, 1.0), "unit")


StepCallback = Callable[[dict], None]


def run_attack(
    clean: ImageTensor,
    spec: ObjectiveSpec,
    cfg: AttackConfig,
    encoder: ImageEncoderAdapter,
    on_step: StepCallback | None = None,
) -> AttackResult:
    """Minimize the composite objective over an L-infinity ball around ``clean``.

    ``on_step`` receives one record per evaluated iterate with keys
    ``step, loss, cs_term, sim_term, lr, linf``. The returned image is the
    lowest-loss iterate seen.
    """
    problems = validate_config(cfg)
    if problems:
        raise ValueError(f"invalid AttackConfig: {[p.code for p in problems]}")
    if spec.mode != cfg.mode:
        raise ValueError(f"spec mode {spec.mode!r} does not match config mode {cfg.mode!r}")
    if clean.domain != "unit":
        raise ShapeMismatch("run_attack needs a unit-domain image")
    if tuple(clean.shape[:2]) != tuple(encoder.input_size):
        raise ShapeMismatch(f"clean image {clean.shape[:2]} is not at encoder resolution {encoder.input_size}")

    x0 = clean.data
    eps = cfg.epsilon
    lam = spec.lam
    delta = np.zeros_like(x0)
    x = x0.copy()
    opt = OptimizerState.zeros(x0.shape, cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    sched = SchedulerState(patience=cfg.scheduler_patience, factor=cfg.scheduler_factor)

    def embedding_loss(e: np.ndarray):
        return cs_loss(spec, e), cs_loss_grad(spec, e)

    trace: list[float] = []
    best_loss, best_x, best_emb, best_step = math.inf, x0, None, -1
    stop = "max_steps"
    for step in range(cfg.max_steps):
        if opt.learning_rate < cfg.min_learning_rate:
            stop = "lr_floor"
            break
        try:
            emb, cs_term, grad = value_and_grad(encoder, x, embedding_loss)
        except NonFiniteGradient:
            log.warning("non-finite gradient at step %d, aborting", step)
            stop = "nan_abort"
            break
        sim_term = sim_loss(x0, x)
        loss = cs_term + lam * sim_term
        if not math.isfinite(loss):
            stop = "nan_abort"
            break
        if lam:
            grad = grad + lam * sim_loss_grad(x0, x)
        if np.max(np.abs(grad)) < STATIONARY_TOL:
            # delta = 0 is a stationary point of the untargeted loss (CS is
            # at its maximum); step off it along a seeded random direction.
            grad = rng.standard_normal(grad.shape) * DITHER_SCALE
        trace.append(loss)
        if on_step is not None:
            on_step(
                {
                    "step": step,
                    "loss": loss,
                    "cs_term": cs_term,
                    "sim_term": sim_term,
                    "lr": opt.learning_rate,
                    "linf": linf_norm(x, x0),
                }
            )
        if loss < best_loss:
            best_loss, best_x, best_emb, best_step = loss, x, emb, step

        try:
            opt, update = adam_step(opt, grad, cfg.beta1, cfg.beta2)
        except NonFiniteGradient:
            stop = "nan_abort"
            break
        delta = project_linf(delta + update, eps)
        x = np.clip(x0 + delta, 0.0, 1.0)
        delta = x - x0
        sched, lr = scheduler_step(sched, loss, opt.learning_rate)
        if lr != opt.learning_rate:
            log.debug("step %d: lr %.3g -> %.3g", step, opt.learning_rate, lr)
            opt = dataclasses.replace(opt, learning_rate=lr)

    if best_emb is None:
        best_emb = encoder.encode(x0)
    adv = ImageTensor(best_x, "unit")
    return AttackResult(
        adversarial_image=adv,
        loss_trace=tuple(trace),
        cs_final=cosine_similarity(spec.reference_embedding, best_emb),
        linf_actual=linf_norm(best_x, x0),
        l2_actual=l2_norm(best_x, x0),
        steps_run=len(trace),
        stop_reason=stop,
        final_loss=best_loss,
        best_step=best_step,
    )
