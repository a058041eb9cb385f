#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Gated DiT - Trainer
Runs one training run (pretrain / finetune / scratch) and records its curves.

Random streams are derived from (seed, stream, step), so every gate spec
sees the same batches and noise draws for a given seed:
  data, flow noise / dropout, init, evaluation, sampling (ids in data.py)
"""
import logging
import time
from dataclasses import replace
from typing import Callable, Dict, List, Optional

import numpy as np
from tqdm import tqdm

from .checkpoint import load as load_checkpoint
from .config import RunConfig, TrainMode, to_flat_dict
from .data import (
    STREAM_DATA, STREAM_EVAL, STREAM_INIT, STREAM_NOISE, TaskKind, batch_rng, edge_condition, make_batch,
)
from .errors import CheckpointError, NonFiniteError
from .evaluation import RunRecord, edge_f1, mse_metric, psnr
from .flow import OptimizerState, euler_sample, flow_loss_fn, train_step
from .model import (
    ConditionInput, ModelParams, VelocityModel, attach_lora, ensure_gates, init_params,
)

logger = logging.getLogger(__name__)

CheckpointCallback = Callable[[ModelParams, int], None]


def load_base_params(path: str, config: RunConfig) -> ModelParams:
    """Backbone tensors from a checkpoint laid over a fresh init of the same shape"""
    arrays = load_checkpoint(path)
    params = init_params(config.model, batch_rng(config.seed, STREAM_INIT))
    for name in params.names("backbone"):
        if name not in arrays:
            raise CheckpointError(f"{path}: missing tensor '{name}'")
        if arrays[name].shape != params[name].shape:
            raise CheckpointError(f"{path}: tensor '{name}' has shape {arrays[name].shape}, "
                                  f"model expects {params[name].shape}")
        params[name].data[...] = arrays[name]
    return params


def prepare_params(config: RunConfig) -> ModelParams:
    cfg = config.model
    if config.mode is TrainMode.FINETUNE:
        params = load_base_params(config.base_checkpoint, config)
        ensure_gates(params, cfg)
        params = attach_lora(params, cfg, batch_rng(config.seed, STREAM_INIT, 1))
        return params.set_mode(TrainMode.FINETUNE)
    params = init_params(cfg, batch_rng(config.seed, STREAM_INIT))
    return params.set_mode(config.mode)


class Trainer:
    """
    Usage:
        record = Trainer(config).run()
    """

    def __init__(self, config: RunConfig, params: Optional[ModelParams] = None,
                 progress: bool = True, checkpoint_cb: Optional[CheckpointCallback] = None,
                 raise_on_divergence: bool = False):
        self.config = config
        self.params = params if params is not None else prepare_params(config)
        self.progress = progress
        self.checkpoint_cb = checkpoint_cb
        self.raise_on_divergence = raise_on_divergence
        self.opt = OptimizerState.from_config(config.flow)

    @property
    def uses_condition_image(self) -> bool:
        return self.config.mode is not TrainMode.PRETRAIN

    def eval_batch(self) -> List:
        cfg = self.config
        return make_batch(cfg.data.task, cfg.eval.eval_samples, batch_rng(cfg.seed, STREAM_EVAL),
                          image_size=cfg.model.image_size, n_classes=cfg.model.n_classes)

    def evaluate(self, batch: Optional[List] = None) -> Dict[str, float]:
        """Mean edge F1 / task MSE / PSNR of fresh samples on a fixed eval batch"""
        cfg = self.config
        batch = batch if batch is not None else self.eval_batch()
        model = VelocityModel(self.params, cfg.model)
        task = TaskKind(cfg.data.task)
        shape = (cfg.model.channels, cfg.model.image_size, cfg.model.image_size)
        f1s, mses, psnrs = [], [], []
        for i, sample in enumerate(batch):
            image = sample.condition if self.uses_condition_image else None
            generated = euler_sample(model, ConditionInput(image, sample.class_id), cfg.flow.sample_steps,
                                     rng=batch_rng(cfg.seed, STREAM_EVAL, i), shape=shape,
                                     guidance_scale=cfg.flow.guidance_scale)
            f1s.append(edge_f1(generated, edge_condition(sample.target), cfg.eval.edge_tolerance))
            mses.append(mse_metric(generated, sample.condition, task) if task.spatially_aligned else np.nan)
            psnrs.append(psnr(generated, sample.target))
        return {"edge_f1": float(np.mean(f1s)), "mse": float(np.mean(mses)),
                "psnr": float(np.mean(psnrs))}

    def run(self, steps: Optional[int] = None) -> RunRecord:
        cfg = self.config
        steps = cfg.steps if steps is None else steps
        record = RunRecord(config=to_flat_dict(cfg), seed=cfg.seed)
        alpha = cfg.eval.ema_alpha
        eval_batch = self.eval_batch()
        start = time.time()
        smoothed = None

        logger.info(f"🚀 Starting {cfg.mode.value} run: task={TaskKind(cfg.data.task).value}, "
                    f"gate={cfg.model.gate_spec.label}, seed={cfg.seed}, steps={steps}")
        bar = tqdm(range(steps), desc=f"{cfg.model.gate_spec.label} s{cfg.seed}",
                   disable=not self.progress, leave=False)
        for step in bar:
            batch = make_batch(cfg.data.task, cfg.data.batch_size, batch_rng(cfg.seed, STREAM_DATA, step),
                               image_size=cfg.model.image_size, n_classes=cfg.model.n_classes)
            loss_fn = flow_loss_fn(cfg.model, batch_rng(cfg.seed, STREAM_NOISE, step),
                                   use_condition_image=self.uses_condition_image,
                                   cond_dropout=cfg.flow.cond_dropout)
            try:
                loss = train_step(self.params, batch, self.opt, self.params.trainable, loss_fn, step=step + 1)
            except NonFiniteError as e:
                record.diverged_at = step + 1
                logger.error(f"❌ Failed: {e}")
                if self.raise_on_divergence:
                    record.wall_time = time.time() - start
                    raise
                break

            smoothed = loss if smoothed is None else (1.0 - alpha) * smoothed + alpha * loss
            record.losses.append(loss)
            record.smoothed.append(float(smoothed))
            if self.progress:
                bar.set_postfix(loss=f"{smoothed:.4f}")

            done = step + 1
            if done % cfg.eval.eval_interval == 0 or done == steps:
                metrics = self.evaluate(eval_batch)
                record.metrics.append({"step": done, **metrics})
                logger.debug(f"step {done}: loss {smoothed:.5f} edge_f1 {metrics['edge_f1']:.3f}")
                if self.checkpoint_cb is not None:
                    self.checkpoint_cb(self.params, done)

        record.wall_time = time.time() - start
        if record.diverged_at is None:
            logger.info(f"✅ Completed {len(record.losses)} steps in {record.wall_time:.1f}s "
                        f"(final smoothed loss {record.final_loss:.5f})")
        return record


def unconditional_config(config: RunConfig) -> RunConfig:
    """Same run without image conditioning (baseline for controllability checks)"""
    return replace(config, mode=TrainMode.PRETRAIN, base_checkpoint=None)
