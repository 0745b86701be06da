"""Saliency evaluation: MAE, mean F-measure, S-measure, mean E-measure.

All functions take a prediction in [0, 1] and a binary ground truth of the
same 2-D shape.  Threshold sweeps use 256 levels: at level ``t`` a pixel is
predicted salient iff ``256 * P > t``, so the thresholds are t/256 for
t = 0..255 and a binary prediction reproduces itself at every level.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

log = logging.getLogger(__name__)

EPS = np.finfo(np.float64).eps
N_LEVELS = 256


def _prep(pred, gt) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    return pred, gt > 0.5


def threshold_levels(pred: np.ndarray) -> np.ndarray:
    """Highest threshold index at which each pixel is still predicted salient (-1: never)."""
    q = N_LEVELS * np.asarray(pred, dtype=np.float64)
    # 256*p > t  <=>  t <= ceil(256*p) - 1 for integer t
    return np.clip(np.ceil(q) - 1, -1, N_LEVELS - 1).astype(np.int64)


def _positive_counts(levels: np.ndarray) -> np.ndarray:
    """count[t] = number of pixels with level >= t, for t = 0..255."""
    hist = np.bincount(levels[levels >= 0], minlength=N_LEVELS)
    return np.cumsum(hist[::-1])[::-1]


def mae(pred, gt) -> float:
    pred, gt = _prep(pred, gt)
    return float(np.mean(np.abs(pred - gt)))


def f_curve(pred, gt, beta_sq: float = 0.3) -> np.ndarray:
    pred, gt = _prep(pred, gt)
    levels = threshold_levels(pred)
    tp = _positive_counts(levels[gt]).astype(np.float64)
    predicted = _positive_counts(levels.reshape(-1)).astype(np.float64)
    n_fg = float(gt.sum())
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = tp / n_fg if n_fg > 0 else np.zeros_like(tp)
    num = (1 + beta_sq) * precision * recall
    den = beta_sq * precision + recall
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def mean_f(pred, gt, beta_sq: float = 0.3) -> float:
    return float(f_curve(pred, gt, beta_sq).mean())


# -- S-measure ------------------------------------------------------------------

def _object_score(x: np.ndarray) -> float:
    # x: prediction values inside the region of interest
    if x.size == 0:
        return 0.0
    mu = x.mean()
    sigma = x.std(ddof=1) if x.size > 1 else 0.0
    return 2.0 * mu / (mu * mu + 1.0 + sigma + EPS)


def _s_object(pred: np.ndarray, gt: np.ndarray) -> float:
    u = gt.mean()
    fg = _object_score(pred[gt])
    bg = _object_score(1.0 - pred[~gt])
    return u * fg + (1 - u) * bg


def _ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    n = pred.size
    x, y = pred.mean(), gt.mean()
    d = max(n - 1, 1)
    sx = ((pred - x) ** 2).sum() / d
    sy = ((gt - y) ** 2).sum() / d
    sxy = ((pred - x) * (gt - y)).sum() / d
    alpha = 4 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if alpha != 0:
        return alpha / (beta + EPS)
    return 1.0 if beta == 0 else 0.0


def _centroid(gt: np.ndarray) -> Tuple[int, int]:
    h, w = gt.shape
    if not gt.any():
        return int(round(w / 2)), int(round(h / 2))
    rows, cols = np.nonzero(gt)
    return int(np.round(cols.mean())) + 1, int(np.round(rows.mean())) + 1


def _s_region(pred: np.ndarray, gt: np.ndarray) -> float:
    h, w = gt.shape
    x, y = _centroid(gt)
    x, y = min(x, w), min(y, h)
    gtf = gt.astype(np.float64)
    score = 0.0
    for rs, cs in ((slice(0, y), slice(0, x)), (slice(0, y), slice(x, w)),
                   (slice(y, h), slice(0, x)), (slice(y, h), slice(x, w))):
        block = pred[rs, cs]
        if block.size:
            score += block.size / (h * w) * _ssim(block, gtf[rs, cs])
    return score


def s_measure(pred, gt, alpha: float = 0.5) -> float:
    pred, gt = _prep(pred, gt)
    y = gt.mean()
    if y == 0:
        score = 1.0 - pred.mean()
    elif y == 1:
        score = pred.mean()
    else:
        score = alpha * _s_object(pred, gt) + (1 - alpha) * _s_region(pred, gt)
    return float(np.clip(score, 0.0, 1.0))


# -- E-measure ------------------------------------------------------------------

def e_curve(pred, gt) -> np.ndarray:
    pred, gt = _prep(pred, gt)
    levels = threshold_levels(pred).reshape(-1)
    g = gt.reshape(-1)
    n = g.size
    n_fg = int(g.sum())
    scores = np.zeros(N_LEVELS)
    if n_fg == 0:
        # enhanced map is 1 - binarized prediction
        return 1.0 - _positive_counts(levels) / n
    if n_fg == n:
        return _positive_counts(levels) / n
    # For a binarized map only four (pred, gt) value pairs exist, so the
    # enhanced-alignment mean is a weighted sum over those four cases.
    tp = _positive_counts(levels[g]).astype(np.float64)
    pos = _positive_counts(levels).astype(np.float64)
    mg = n_fg / n
    for t in range(N_LEVELS):
        mp = pos[t] / n
        cases = (
            (tp[t], 1 - mp, 1 - mg),               # pred 1, gt 1
            (pos[t] - tp[t], 1 - mp, -mg),         # pred 1, gt 0
            (n_fg - tp[t], -mp, 1 - mg),           # pred 0, gt 1
            (n - n_fg - pos[t] + tp[t], -mp, -mg),  # pred 0, gt 0
        )
        total = 0.0
        for count, dp, dg in cases:
            if count == 0:
                continue
            den = dp * dp + dg * dg
            align = 2 * dp * dg / den if den > 0 else 0.0
            total += count * (align + 1) ** 2 / 4
        scores[t] = total / n
    return scores


def mean_e(pred, gt) -> float:
    return float(e_curve(pred, gt).mean())


# -- dataset evaluation -----------------------------------------------------------

@dataclass
class EvalRecord:
    name: str
    mae: float
    mf: float
    sm: float
    me: float


def evaluate(pred, gt) -> Dict[str, float]:
    return {"mae": mae(pred, gt), "mf": mean_f(pred, gt), "sm": s_measure(pred, gt), "me": mean_e(pred, gt)}


def minmax_normalize(pred: np.ndarray) -> np.ndarray:
    lo, hi = float(pred.min()), float(pred.max())
    if hi <= lo:
        return pred
    return (pred - lo) / (hi - lo)


def aggregate(records: Sequence[EvalRecord]) -> EvalRecord:
    if not records:
        raise ValueError("no records to aggregate")
    ordered = sorted(records, key=lambda r: r.name)
    means = {k: float(np.mean([getattr(r, k) for r in ordered])) for k in ("mae", "mf", "sm", "me")}
    return EvalRecord("__mean__", **means)


def evaluate_batch(pred: np.ndarray, gt: np.ndarray, names: Optional[Sequence[str]] = None
                   ) -> Tuple[List[EvalRecord], EvalRecord]:
    """In-memory counterpart of :func:`evaluate_dataset` for (N, 1, H, W) arrays."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape or pred.ndim != 4 or pred.shape[1] != 1:
        raise ValueError(f"expected matching (N, 1, H, W) arrays, got {pred.shape} and {gt.shape}")
    names = names or [f"{i:04d}" for i in range(len(pred))]
    records = [EvalRecord(n, **evaluate(minmax_normalize(p[0].astype(np.float64)), g[0] > 0.5))
               for n, p, g in zip(names, pred, gt)]
    return records, aggregate(records)


def evaluate_dataset(pred_dir, gt_dir) -> Tuple[List[EvalRecord], EvalRecord]:
    """Evaluate every ``<stem>.pgm`` in ``pred_dir`` against the mask with the same stem."""
    from .data import find_images, read_image

    preds = find_images(pred_dir)
    gts = find_images(gt_dir)
    for stem in sorted(preds.keys() ^ gts.keys()):
        side = "prediction" if stem in preds else "ground truth"
        log.warning("skipping %s: only a %s file exists", stem, side)
    stems = sorted(preds.keys() & gts.keys())
    if not stems:
        raise ValueError(f"no matching prediction/ground-truth pairs in {pred_dir} and {gt_dir}")
    records = []
    for stem in stems:
        p = read_image(preds[stem])
        g = read_image(gts[stem])
        p, g = p.mean(axis=0), g.mean(axis=0)
        if p.shape != g.shape:
            log.warning("%s: resizing prediction %s to ground truth %s", stem, p.shape, g.shape)
            from .layers import resize_array
            p = np.clip(resize_array(p.astype(np.float64), *g.shape), 0.0, 1.0)
        p = minmax_normalize(p.astype(np.float64))
        records.append(EvalRecord(stem, **evaluate(p, g > 0.5)))
    return records, aggregate(records)


def write_csv(path, records: Sequence[EvalRecord], mean: EvalRecord) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "mae", "mf", "sm", "me"])
        for r in list(records) + [mean]:
            w.writerow([r.name] + [f"{getattr(r, k):.6f}" for k in ("mae", "mf", "sm", "me")])


def format_table(rows: Sequence[Tuple[str, EvalRecord]], columns=("mf", "mae", "sm", "me")) -> str:
    """Aligned text table; default column order is mF, MAE, Sm, mE."""
    headers = {"mf": "mF↑", "mae": "MAE↓", "sm": "Sm↑", "me": "mE↑"}
    width = max([len("Methods")] + [len(name) for name, _ in rows]) + 2
    lines = ["Methods".ljust(width) + "".join(headers[c].rjust(9) for c in columns)]
    for name, rec in rows:
        lines.append(name.ljust(width) + "".join(f"{getattr(rec, c):9.4f}" for c in columns))
    return "\n".join(lines)


def record_dict(rec: EvalRecord) -> Dict[str, float]:
    return asdict(rec)
