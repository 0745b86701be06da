"""Adam + cosine-annealed training loop with checkpointing."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .checkpoint import save_checkpoint
from .data import Sample, augment, to_batch
from .layers import Module
from .losses import HybridLossConfig, hybrid_loss
from .tensor import Tensor

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "epoch", "lr", "total", "bce", "iou", "f", "edge_total")


@dataclass
class TrainConfig:
    lr_max: float = 1e-4
    lr_min: float = 1e-5
    weight_decay: float = 5e-4
    batch_size: int = 8
    epochs: int = 60
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    augment: bool = True
    max_steps: Optional[int] = None
    checkpoint_every: int = 1  # epochs; 0 disables periodic checkpoints

    def __post_init__(self):
        if not 0 < self.lr_min <= self.lr_max:
            raise ValueError(f"need 0 < lr_min <= lr_max, got {self.lr_min}, {self.lr_max}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if self.weight_decay < 0 or self.adam_eps <= 0:
            raise ValueError("weight_decay must be >= 0 and adam_eps > 0")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Small-CPU variant: batch 4 and a larger peak rate; 125 epochs of 16 samples is 500 steps."""
        base = dict(batch_size=4, epochs=125, lr_max=1e-3, lr_min=1e-5)
        base.update(overrides)
        return cls(**base)


def cosine_lr(epoch: int, cfg: TrainConfig) -> float:
    if not 0 <= epoch <= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs}]")
    if epoch == 0:
        return cfg.lr_max
    if epoch == cfg.epochs:
        return cfg.lr_min
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1 + math.cos(math.pi * epoch / cfg.epochs))


@dataclass
class OptimizerState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "OptimizerState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


class NonFiniteGradient(FloatingPointError):
    pass


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: OptimizerState,
              lr: float, cfg: TrainConfig, names: Optional[Sequence[str]] = None) -> None:
    """One Adam update in place, with L2 decay folded into the gradient."""
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            name = names[i] if names else f"#{i}"
            raise NonFiniteGradient(f"non-finite gradient for parameter {name}; step skipped")
    state.step += 1
    t = state.step
    c1 = 1 - cfg.beta1 ** t
    c2 = 1 - cfg.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p.data
        m *= cfg.beta1
        m += (1 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1 - cfg.beta2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        p.data -= update.astype(p.dtype, copy=False)


@dataclass
class TrainResult:
    log: List[Dict[str, float]] = field(default_factory=list)
    checkpoint: Optional[Path] = None
    halted: bool = False

    @property
    def losses(self) -> List[float]:
        return [row["total"] for row in self.log]


def write_loss_log(path, rows: Sequence[Dict[str, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow({k: row[k] for k in LOG_FIELDS})


def train(model: Module, dataset: Sequence[Sample], cfg: TrainConfig,
          loss_cfg: HybridLossConfig = HybridLossConfig(), out_dir=None) -> TrainResult:
    """Train in place.  With ``out_dir`` set, writes ``model.ckpt`` and ``loss_log.csv`` there."""
    if not dataset:
        raise ValueError("cannot train on an empty dataset")
    out_dir = Path(out_dir) if out_dir is not None else None
    rng = np.random.default_rng(cfg.seed)
    named = list(model.named_parameters())
    names = [n for n, _ in named]
    params = [p for _, p in named]
    state = OptimizerState.for_params(params)
    result = TrainResult()
    good_state = model.state_dict()
    step = 0
    model.train()
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg)
        order = rng.permutation(len(dataset))
        for start in range(0, len(order), cfg.batch_size):
            batch = [dataset[i] for i in order[start : start + cfg.batch_size]]
            if cfg.augment:
                batch = [augment(s, rng) for s in batch]
            image, gp, ge = to_batch(batch)
            model.zero_grad()
            out = model(image)
            total, parts = hybrid_loss(out, gp, ge, loss_cfg)
            value = total.item()
            if not math.isfinite(value):
                log.error("loss became %s at step %d; restoring last good weights", value, step + 1)
                model.load_state_dict(good_state)
                result.halted = True
                return _finish(model, result, out_dir)
            total.backward()
            try:
                adam_step(params, [p.grad for p in params], state, lr, cfg, names)
            except NonFiniteGradient as exc:
                log.error("%s", exc)
                model.load_state_dict(good_state)
                result.halted = True
                return _finish(model, result, out_dir)
            step += 1
            edge_total = parts["edge_bce"] + loss_cfg.lam * parts["edge_iou"] + parts["edge_f"]
            row = {"step": step, "epoch": epoch, "lr": lr, "total": value, "bce": parts["bce"],
                   "iou": parts["iou"], "f": parts["f"], "edge_total": edge_total}
            result.log.append(row)
            log.debug("step %d epoch %d lr %.3g loss %.5f", step, epoch, lr, value)
            if cfg.max_steps is not None and step >= cfg.max_steps:
                return _finish(model, result, out_dir)
        good_state = model.state_dict()
        log.info("epoch %d done: step %d, last loss %.5f", epoch, step, result.log[-1]["total"])
        if out_dir is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            result.checkpoint = save_checkpoint(model, out_dir / "model.ckpt")
            write_loss_log(out_dir / "loss_log.csv", result.log)
    return _finish(model, result, out_dir)


def _finish(model: Module, result: TrainResult, out_dir: Optional[Path]) -> TrainResult:
    model.eval()
    if out_dir is not None:
        result.checkpoint = save_checkpoint(model, out_dir / "model.ckpt")
        write_loss_log(out_dir / "loss_log.csv", result.log)
    return result
