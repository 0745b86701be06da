"""Prediction helpers and the four-way ablation run."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import metrics
from .data import Sample, write_image
from .losses import HybridLossConfig
from .model import AGNet, AblationConfig, ModelConfig
from .tensor import Tensor, no_grad
from .trainer import TrainConfig, TrainResult, train

log = logging.getLogger(__name__)

# baseline first, full model last, matching the usual ablation table layout
ORDER = ("baseline", "no-drs", "no-pes", "full")


def predict(model: AGNet, images: np.ndarray, batch_size: int = 8) -> Tuple[np.ndarray, np.ndarray]:
    """Saliency and edge maps for an (N, 3, H, W) array, in eval mode."""
    model.eval()
    ps, es = [], []
    with no_grad():
        for start in range(0, len(images), batch_size):
            out = model(Tensor(images[start : start + batch_size]))
            ps.append(out.P.data)
            es.append(out.E.data)
    return np.concatenate(ps), np.concatenate(es)


def evaluate_samples(model: AGNet, samples: Sequence[Sample]) -> Tuple[List[metrics.EvalRecord], metrics.EvalRecord]:
    P, _ = predict(model, np.stack([s.image for s in samples]))
    return metrics.evaluate_batch(P, np.stack([s.mask for s in samples]), [s.name for s in samples])


@dataclass
class AblationRun:
    ablation: AblationConfig
    result: TrainResult
    rows: List[metrics.EvalRecord]
    mean: metrics.EvalRecord


def run_ablation(train_set: Sequence[Sample], eval_set: Sequence[Sample], model_cfg: ModelConfig,
                 train_cfg: TrainConfig, loss_cfg: HybridLossConfig = HybridLossConfig(),
                 names: Iterable[str] = ORDER, out_dir: Optional[Path] = None) -> Dict[str, AblationRun]:
    """Train each configuration from the same seed and evaluate it on ``eval_set``.

    With ``out_dir``, each run gets ``<out_dir>/<name>/`` holding its
    checkpoint, loss log and predicted maps.
    """
    runs = {}
    for name in names:
        ablation = AblationConfig.from_name(name)
        run_dir = Path(out_dir) / name if out_dir is not None else None
        model = AGNet(model_cfg, ablation)
        result = train(model, train_set, train_cfg, loss_cfg, run_dir)
        rows, mean = evaluate_samples(model, eval_set)
        if run_dir is not None:
            P, _ = predict(model, np.stack([s.image for s in eval_set]))
            (run_dir / "pred").mkdir(parents=True, exist_ok=True)
            for s, p in zip(eval_set, P):
                write_image(run_dir / "pred" / f"{s.name}.pgm", p)
            metrics.write_csv(run_dir / "metrics.csv", rows, mean)
        log.info("%s: mF %.4f MAE %.4f", ablation.label, mean.mf, mean.mae)
        runs[name] = AblationRun(ablation, result, rows, mean)
    return runs


def ablation_table(runs: Dict[str, AblationRun]) -> str:
    return metrics.format_table([(r.ablation.label, r.mean) for r in runs.values()])


def write_ablation_csv(path, runs: Dict[str, AblationRun]) -> None:
    rows = [metrics.EvalRecord(r.ablation.label, r.mean.mae, r.mean.mf, r.mean.sm, r.mean.me)
            for r in runs.values()]
    with open(path, "w", newline="") as fh:
        fh.write("name,mae,mf,sm,me\n")
        for r in rows:
            fh.write(f"{r.name},{r.mae:.6f},{r.mf:.6f},{r.sm:.6f},{r.me:.6f}\n")

