"""Adam, the cosine learning-rate schedule and the two-stage training regime."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, asdict, field
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from . import net
from .checkpoint import AdamState, Checkpoint
from .data import Manifest, load_pairs
from .losses import LOSS_MODES, LossWeights, objective
from .metrics import MetricsReport, psnr, ssim_metric
from .tensor import Tensor, ShapeError

logger = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    batch_size: int = 2
    epochs_total: int = 2500
    # when set, stage budgets are counted in optimiser steps instead of epochs
    steps_total: Optional[int] = None
    stage1_fraction: float = 0.5
    stage1_loss: str = "MSE"
    stage2_loss: str = "CL"
    lr_init: float = 2e-3
    lr_final: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    train_resize: bool = False
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.lr_final > self.lr_init:
            raise ValueError("lr_final must not exceed lr_init")
        if not 0.0 <= self.stage1_fraction <= 1.0:
            raise ValueError("stage1_fraction must lie in [0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        for mode in (self.stage1_loss, self.stage2_loss):
            if mode not in LOSS_MODES:
                raise ValueError(f"unknown loss mode {mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepRecord:
    step: int
    stage: int
    lr: float
    loss: float
    terms: dict = field(default_factory=dict)

    def line(self) -> str:
        extra = "".join(f"\t{k}={v:.8g}" for k, v in self.terms.items())
        return f"{self.step}\t{self.stage}\t{self.lr:.8g}\t{self.loss:.8g}{extra}"


# -- optimiser -------------------------------------------------------------

def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update applied in place, in sorted name order.

    ``grads`` maps parameter names to arrays.
    """
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name in sorted(params):
        p = params[name]
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: grad for {name} has shape {g.shape}, param {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.data.dtype, copy=False)


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Cosine decay from ``lr_init`` at step 0 to ``lr_final`` at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return cfg.lr_init
    cos = math.cos(math.pi * step / total_steps)
    return cfg.lr_final + 0.5 * (cfg.lr_init - cfg.lr_final) * (1.0 + cos)


# -- training --------------------------------------------------------------

def _batch(samples: list, idx) -> tuple:
    inp = np.concatenate([samples[i][1].data for i in idx], axis=0)
    tgt = np.concatenate([samples[i][2].data for i in idx], axis=0)
    return Tensor(inp), Tensor(tgt)


def _budget(cfg: TrainConfig, n_samples: int, stage: int) -> int:
    """Optimiser steps allotted to stage 1 or 2."""
    if cfg.steps_total is not None:
        total = cfg.steps_total
    else:
        total = cfg.epochs_total * math.ceil(n_samples / cfg.batch_size)
    first = math.ceil(cfg.stage1_fraction * total)
    return first if stage == 1 else total - first


def _epoch_plan(cfg: TrainConfig, n_samples: int, stage: int) -> tuple:
    if cfg.steps_total is None:
        epochs = math.ceil(cfg.stage1_fraction * cfg.epochs_total)
        if stage == 2:
            epochs = cfg.epochs_total - epochs
        return epochs, None
    steps = _budget(cfg, n_samples, stage)
    per_epoch = math.ceil(n_samples / cfg.batch_size)
    return math.ceil(steps / per_epoch), steps


def run_stage(params: dict, stacks: int, samples: list, cfg: TrainConfig, *, stage: int,
              loss_mode: str, epochs: int, max_steps: Optional[int] = None,
              state: Optional[AdamState] = None, weights: LossWeights = LossWeights(),
              step_offset: int = 0, on_step: Optional[Callable] = None,
              on_epoch: Optional[Callable] = None):
    """Train for ``epochs`` (or ``max_steps`` if set) and return ``(state, history)``.

    ``samples`` is a list of ``(scene_id, input, target)``.  Batches follow a
    permutation seeded by ``(seed, stage, epoch)``; the final short batch is
    kept.
    """
    if not samples:
        raise ValueError("run_stage needs at least one sample")
    state = state if state is not None else AdamState()
    per_epoch = math.ceil(len(samples) / cfg.batch_size)
    total = epochs * per_epoch if max_steps is None else min(max_steps, epochs * per_epoch)
    names = sorted(params)
    leaves = [params[n] for n in names]
    history = []
    step = 0
    for epoch in range(epochs):
        if step >= total:
            break
        order = np.random.default_rng((cfg.seed, stage, epoch)).permutation(len(samples))
        for b in range(per_epoch):
            if step >= total:
                break
            inp, tgt = _batch(samples, order[b * cfg.batch_size:(b + 1) * cfg.batch_size])
            lr = lr_at(step, total - 1, cfg)
            pred = net.forward(params, inp, stacks)
            loss, terms = objective(loss_mode, pred, tgt, weights)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError(
                    f"non-finite loss {value} at stage {stage} step {step_offset + step} "
                    f"(lr={lr:.3g}, terms={terms})")
            T.backward(loss, wrt=leaves)
            adam_step(params, {n: params[n].grad for n in names}, state, lr,
                      cfg.beta1, cfg.beta2, cfg.eps)
            rec = StepRecord(step_offset + step, stage, lr, value, terms)
            history.append(rec)
            if on_step is not None:
                on_step(rec)
            step += 1
        if on_epoch is not None:
            on_epoch(stage, epoch, state, step_offset + step)
    return state, history


def train_two_stage(cfg: TrainConfig, net_cfg: net.NetConfig, samples, *,
                    weights: LossWeights = LossWeights(), params: Optional[dict] = None,
                    on_step: Optional[Callable] = None,
                    on_stage_end: Optional[Callable] = None,
                    on_epoch: Optional[Callable] = None) -> Checkpoint:
    """Stage 1 with ``cfg.stage1_loss``, then stage 2 with ``cfg.stage2_loss``.

    Adam state and the learning-rate schedule restart at the stage boundary;
    weights carry over.  ``samples`` is a manifest or a pre-loaded sample list.
    ``on_stage_end(stage, params)`` runs after each stage.
    """
    if isinstance(samples, Manifest):
        samples = load_pairs(samples, half=cfg.train_resize)
    if params is None:
        params = net.init_params(net_cfg)
    history = []
    state = None
    global_step = 0
    for stage, mode in ((1, cfg.stage1_loss), (2, cfg.stage2_loss)):
        epochs, steps = _epoch_plan(cfg, len(samples), stage)
        state, hist = run_stage(params, net_cfg.stacks, samples, cfg, stage=stage,
                                loss_mode=mode, epochs=epochs, max_steps=steps,
                                weights=weights, step_offset=global_step, on_step=on_step,
                                on_epoch=on_epoch)
        history += hist
        global_step += len(hist)
        if on_stage_end is not None:
            on_stage_end(stage, params)
    ckpt = Checkpoint(net_cfg, params, state, global_step, stage=2)
    ckpt.history = history
    return ckpt


def predict(params: dict, stacks: int, image: Tensor) -> Tensor:
    with T.no_grad():
        return net.forward(params, image, stacks)


def evaluate(params: dict, stacks: int, samples) -> MetricsReport:
    """Full-resolution inference, clamp, then per-sample PSNR and SSIM."""
    if isinstance(samples, Manifest):
        samples = load_pairs(samples)
    if not samples:
        raise ValueError("evaluate needs at least one sample")
    report = MetricsReport()
    for sid, inp, tgt in samples:
        pred = predict(params, stacks, inp)
        if pred.shape != tgt.shape:
            raise ShapeError(f"{sid}: prediction {pred.shape} vs target {tgt.shape}")
        report.add(sid, psnr(pred, tgt), ssim_metric(pred, tgt))
    return report
