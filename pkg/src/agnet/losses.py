"""Hybrid saliency loss: BCE + IoU + F-value terms on both saliency and edge maps."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, clip, log, rsub


@dataclass(frozen=True)
class HybridLossConfig:
    lam: float = 0.6      # IoU weight
    mu: float = 0.5       # edge-term weight
    beta_sq: float = 0.3
    eps: float = 1e-7
    clamp: float = 1e-7

    def __post_init__(self):
        if self.lam < 0 or self.mu < 0:
            raise ValueError("loss weights must be non-negative")
        if self.beta_sq <= 0 or self.eps <= 0 or self.clamp <= 0:
            raise ValueError("beta_sq, eps and clamp must be positive")


def _check(p: Tensor, g: Tensor, name: str) -> None:
    if p.shape != g.shape:
        raise ShapeError(f"{name}: prediction {p.shape} and target {g.shape} differ")


def _per_sample_sum(x: Tensor) -> Tensor:
    return x.sum(axis=tuple(range(1, x.ndim)))


def bce_loss(p: Tensor, g, clamp: float = 1e-7) -> Tensor:
    g = as_tensor(g)
    _check(p, g, "bce_loss")
    ph = clip(p, clamp, 1.0 - clamp)
    per_pixel = g * log(ph) + rsub(g, 1.0) * log(rsub(ph, 1.0))
    return -per_pixel.mean()


def iou_loss(p: Tensor, g, eps: float = 1e-7) -> Tensor:
    g = as_tensor(g)
    _check(p, g, "iou_loss")
    inter = _per_sample_sum(p * g)
    union = _per_sample_sum(p + g - p * g)
    return rsub((inter + eps) / (union + eps), 1.0).mean()


def f_loss(p: Tensor, g, beta_sq: float = 0.3, eps: float = 1e-7) -> Tensor:
    g = as_tensor(g)
    _check(p, g, "f_loss")
    tp = _per_sample_sum(p * g) + eps
    precision = tp / (_per_sample_sum(p) + eps)
    recall = tp / (_per_sample_sum(g) + eps)
    f = (precision * recall * (1.0 + beta_sq)) / (precision * beta_sq + recall + eps)
    return rsub(f, 1.0).mean()


def region_loss(p: Tensor, g, cfg: HybridLossConfig) -> Tuple[Tensor, Dict[str, Tensor]]:
    """bce + lam * iou + f for one prediction/target pair."""
    parts = {
        "bce": bce_loss(p, g, cfg.clamp),
        "iou": iou_loss(p, g, cfg.eps),
        "f": f_loss(p, g, cfg.beta_sq, cfg.eps),
    }
    return parts["bce"] + parts["iou"] * cfg.lam + parts["f"], parts


def hybrid_loss(out, gp, ge, cfg: HybridLossConfig = HybridLossConfig()) -> Tuple[Tensor, Dict[str, float]]:
    """Saliency term plus ``mu`` times the edge term.

    Returns the differentiable total and a float breakdown with keys
    ``bce, iou, f`` (saliency) and ``edge_bce, edge_iou, edge_f``.
    """
    sal, sal_parts = region_loss(out.P, gp, cfg)
    edge, edge_parts = region_loss(out.E, ge, cfg)
    total = sal + edge * cfg.mu
    parts = {k: v.item() for k, v in sal_parts.items()}
    parts.update({f"edge_{k}": v.item() for k, v in edge_parts.items()})
    return total, parts


def recombine(parts: Dict[str, float], cfg: HybridLossConfig) -> float:
    sal = parts["bce"] + cfg.lam * parts["iou"] + parts["f"]
    edge = parts["edge_bce"] + cfg.lam * parts["edge_iou"] + parts["edge_f"]
    return sal + cfg.mu * edge


def edge_target(mask: np.ndarray) -> np.ndarray:
    """Boundary ring of a binary mask: 3x3 dilation XOR 3x3 erosion.

    Works on the last two axes.  Pixels outside the frame count as background,
    so a full-frame mask yields a one-pixel ring along the image border.
    """
    m = np.asarray(mask) > 0.5
    h, w = m.shape[-2:]
    pad = [(0, 0)] * (m.ndim - 2) + [(1, 1), (1, 1)]
    padded = np.pad(m, pad, constant_values=False)
    dil = np.zeros_like(m)
    ero = np.ones_like(m)
    for dy in range(3):
        for dx in range(3):
            dil |= padded[..., dy : dy + h, dx : dx + w]
            ero &= padded[..., dy : dy + h, dx : dx + w]
    return (dil ^ ero).astype(np.float32)
