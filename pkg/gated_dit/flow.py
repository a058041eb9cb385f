#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Gated DiT - Rectified Flow
Straight-line interpolant training objective, AdamW updates and Euler sampling.

Convention: x_t = (1 - t) x0 + t x1, target velocity u = x1 - x0,
sampling integrates from noise (t=1) to data (t=0) by subtracting velocity.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .config import FlowConfig, ModelConfig
from .errors import DimensionError, GatedDiTError, NonFiniteLossError
from .numerics import Tape, Tensor, add, constant, mse, scale

logger = logging.getLogger(__name__)

LossFn = Callable[[Mapping[str, Tensor], Sequence], Tensor]


@dataclass
class FlowSample:
    x0: np.ndarray
    x1: np.ndarray
    t: float
    x_t: np.ndarray
    u_t: np.ndarray


def make_flow_sample(x0: np.ndarray, rng: np.random.Generator, t: Optional[float] = None,
                     x1: Optional[np.ndarray] = None) -> FlowSample:
    """Noise and t ~ U[0, 1] drawn from rng unless given"""
    x0 = np.asarray(x0, dtype=np.float64)
    if x1 is None:
        x1 = rng.standard_normal(x0.shape)
    if t is None:
        t = float(rng.uniform(0.0, 1.0))
    return FlowSample(x0=x0, x1=x1, t=float(t), x_t=(1.0 - t) * x0 + t * x1, u_t=x1 - x0)


def fm_loss(predicted: Tensor, sample: FlowSample) -> Tensor:
    """Mean squared error between predicted and target velocity"""
    if predicted.shape != sample.u_t.shape:
        raise DimensionError("fm_loss", predicted.shape, sample.u_t.shape)
    return mse(predicted, constant(sample.u_t))


# ==================== OPTIMIZER ====================

@dataclass
class OptimizerState:
    """Adam moments with decoupled weight decay"""
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: FlowConfig) -> "OptimizerState":
        return cls(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps,
                   weight_decay=cfg.weight_decay)


def adam_update(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], opt: OptimizerState):
    """One in-place AdamW step over the names in grads"""
    opt.step += 1
    bc1 = 1.0 - opt.beta1 ** opt.step
    bc2 = 1.0 - opt.beta2 ** opt.step
    for name, g in grads.items():
        p = params[name]
        m = opt.m.get(name)
        if m is None or m.shape != p.shape:
            m = np.zeros_like(p.data)
            opt.v[name] = np.zeros_like(p.data)
        v = opt.v[name]
        m = opt.beta1 * m + (1.0 - opt.beta1) * g
        v = opt.beta2 * v + (1.0 - opt.beta2) * g * g
        opt.m[name], opt.v[name] = m, v
        if opt.lr == 0.0:
            continue
        p.data *= 1.0 - opt.lr * opt.weight_decay
        p.data -= opt.lr * (m / bc1) / (np.sqrt(v / bc2) + opt.eps)


def train_step(params: Mapping[str, Tensor], batch: Sequence, opt: OptimizerState,
               trainable: Optional[Iterable[str]], loss_fn: LossFn,
               step: Optional[int] = None) -> float:
    """
    Record loss_fn(params, batch), backpropagate into the trainable names,
    apply one AdamW update. Non-trainable tensors are never touched.
    """
    if len(batch) == 0:
        raise GatedDiTError("train_step needs a non-empty batch")
    if trainable is None:
        trainable = getattr(params, "trainable", None) or list(params.keys())
    wanted = set(trainable)
    names = [n for n in params.keys() if n in wanted]
    for name in params.keys():
        params[name].requires_grad = name in names

    with Tape() as tape:
        loss = loss_fn(params, batch)
    value = loss.item()
    if not np.isfinite(value):
        raise NonFiniteLossError(opt.step if step is None else step, value)

    targets = [params[n] for n in names]
    tape.backward(loss, wrt=targets)
    grads = {n: params[n].grad for n in names}
    adam_update(params, grads, opt)
    for t in targets:
        t.zero_grad()
    return value


def flow_loss_fn(cfg: ModelConfig, rng: np.random.Generator, use_condition_image: bool = True,
                 cond_dropout: float = 0.1) -> LossFn:
    """
    Batch-mean flow-matching loss through model_forward.

    With probability cond_dropout a sample is trained unconditionally
    (no condition image, null class) so guidance has an unconditional branch.
    """
    from .model import model_forward

    def loss_fn(params, batch) -> Tensor:
        total = None
        for sample in batch:
            fs = make_flow_sample(sample.target, rng)
            dropped = cond_dropout > 0 and rng.uniform() < cond_dropout
            cond_image = sample.condition if (use_condition_image and not dropped) else None
            class_id = cfg.null_class if dropped else sample.class_id
            velocity = model_forward(fs.x_t, fs.t, cond_image, class_id, params, cfg)
            term = fm_loss(velocity, fs)
            total = term if total is None else add(total, term)
        return scale(total, 1.0 / len(batch))

    return loss_fn


# ==================== SAMPLING ====================

def euler_sample(model: Callable, cond, steps: int, rng: Optional[np.random.Generator] = None,
                 guidance_scale: float = 1.0, shape: Optional[Tuple[int, ...]] = None,
                 x1: Optional[np.ndarray] = None,
                 clamp: Optional[Tuple[float, float]] = (0.0, 1.0)) -> np.ndarray:
    """
    x <- x - dt * v(x, t, cond) from t=1 down to t=0 in `steps` equal steps.

    For guidance_scale != 1, v = v_u + g (v_c - v_u) with v_u = model(x, t, None).
    The result is clamped only after the last step.
    """
    if steps < 1:
        raise GatedDiTError(f"euler_sample needs steps >= 1, got {steps}")
    if x1 is None:
        if shape is None or rng is None:
            raise GatedDiTError("euler_sample needs x1 or (shape, rng)")
        x1 = rng.standard_normal(shape)
    x = np.array(x1, dtype=np.float64, copy=True)
    dt = 1.0 / steps
    guided = guidance_scale != 1.0 and cond is not None
    for k in range(steps):
        t = 1.0 - k * dt
        v = model(x, t, cond)
        if guided:
            v_u = model(x, t, None)
            v = v_u + guidance_scale * (v - v_u)
        x = x - dt * v
    if clamp is not None:
        x = np.clip(x, clamp[0], clamp[1])
    return x


def sample_grid(model: Callable, conds: List, steps_list: Sequence[int],
                guidance_list: Sequence[float], seed: int,
                shape: Tuple[int, ...]) -> Dict[Tuple[int, float], List[np.ndarray]]:
    """One image per condition for every (steps, guidance) pair, same noise across pairs"""
    from .data import STREAM_SAMPLE, batch_rng

    noises = [batch_rng(seed, STREAM_SAMPLE, i).standard_normal(shape) for i in range(len(conds))]
    results = {}
    for steps in steps_list:
        for g in guidance_list:
            results[(int(steps), float(g))] = [
                euler_sample(model, cond, int(steps), guidance_scale=float(g), x1=noise)
                for cond, noise in zip(conds, noises)
            ]
    return results
