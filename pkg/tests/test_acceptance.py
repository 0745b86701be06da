"""Acceptance criteria 1-8, one test each.

Every test records a ``PASS``/``FAIL`` line; the lines are printed in an
"acceptance criteria" section at the end of the pytest run.  Training-based
criteria share one cache of trained models, so the full run takes a few
CPU minutes per model.
"""

import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from agnet import checks, metrics  # noqa: E402
from agnet.ablation import ORDER, evaluate_samples, predict  # noqa: E402
from agnet.checkpoint import load_checkpoint, save_checkpoint  # noqa: E402
from agnet.data import quantize, read_image, synth_dataset, write_image  # noqa: E402
from agnet.losses import HybridLossConfig, hybrid_loss  # noqa: E402
from agnet.model import AGNet, AblationConfig, ModelConfig, ModelOutput  # noqa: E402
from agnet.tensor import Tensor  # noqa: E402
from agnet.trainer import TrainConfig, cosine_lr, train  # noqa: E402
from conftest import ACCEPTANCE_LINES  # noqa: E402
from test_metrics import (  # noqa: E402
    PAIRS, mae_oracle, mean_e_oracle, mean_f_oracle, s_measure_oracle,
)

TRAIN_SET = synth_dataset(16, 64, seed=0)
TEST_SET = synth_dataset(16, 64, seed=1)
TIE = 0.005

_trained = {}


def trained(name):
    """Desk model for ablation ``name`` trained on TRAIN_SET, cached per session."""
    if name not in _trained:
        model = AGNet(ModelConfig(), AblationConfig.from_name(name))
        start = time.perf_counter()
        result = train(model, TRAIN_SET, TrainConfig.desk())
        _trained[name] = (model, result, time.perf_counter() - start)
    return _trained[name]


def report(criterion, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def test_1_gradient_correctness():
    start = time.perf_counter()
    layers = checks.layer_gradchecks()
    worst, per_tensor = checks.model_gradcheck()
    elapsed = time.perf_counter() - start
    worst_layer = max(layers, key=layers.get)
    ok = worst < 1e-4 and max(layers.values()) < 1e-4 and elapsed < 300
    assert report(1, ok, f"full model max rel err {worst:.2e} over {len(per_tensor)} tensors, "
                         f"worst layer {worst_layer} {layers[worst_layer]:.2e}, {elapsed:.0f}s")


def test_2_structural_invariants():
    model = AGNet()
    model.eval()
    results = checks.attention_invariants(model, passes=100)
    failed = [r.name for r in results if not r.passed]
    assert report(2, not failed, "; ".join(r.line() for r in results))


def test_3_loss_identities():
    rng = np.random.default_rng(3)
    cfg = HybridLossConfig()
    assert (cfg.lam, cfg.mu) == (0.6, 0.5)
    shape = (4, 1, 32, 32)
    gp = (rng.random(shape) > 0.5).astype(np.float64)
    ge = (rng.random(shape) > 0.85).astype(np.float64)
    out = ModelOutput(Tensor(rng.uniform(0.01, 0.99, shape)), Tensor(rng.uniform(0.01, 0.99, shape)))
    total, p = hybrid_loss(out, gp, ge, cfg)
    manual = (p["bce"] + 0.6 * p["iou"] + p["f"]) + 0.5 * (p["edge_bce"] + 0.6 * p["edge_iou"] + p["edge_f"])
    diff = abs(total.item() - manual)
    _, perfect = hybrid_loss(ModelOutput(Tensor(gp), Tensor(ge)), gp, ge, cfg)
    ok = diff < 1e-6 and perfect["bce"] < 1e-6 and perfect["iou"] < 1e-5 and perfect["f"] < 1e-5
    assert report(3, ok, f"recombination diff {diff:.1e}; perfect bce {perfect['bce']:.1e} "
                         f"iou {perfect['iou']:.1e} f {perfect['f']:.1e}")


def test_4_metric_oracles():
    worst = dict(mae=0.0, mf=0.0, sm=0.0, me=0.0)
    in_range = True
    for p, g in PAIRS:
        got = metrics.evaluate(p, g)
        worst["mae"] = max(worst["mae"], abs(got["mae"] - mae_oracle(p, g)))
        worst["mf"] = max(worst["mf"], abs(got["mf"] - mean_f_oracle(p, g)))
        worst["sm"] = max(worst["sm"], abs(got["sm"] - s_measure_oracle(p, g)))
        worst["me"] = max(worst["me"], abs(got["me"] - mean_e_oracle(p, g)))
        in_range &= all(0 <= v <= 1 for v in got.values())
    ok = (worst["mae"] < 1e-9 and worst["mf"] < 1e-9 and worst["sm"] < 1e-6 and worst["me"] < 1e-6
          and in_range)
    assert report(4, ok, f"{len(PAIRS)} pairs, max diffs " +
                  " ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", in range {in_range}")


def test_5_desk_learnability():
    model, result, elapsed = trained("full")
    losses = result.losses
    reduction = 1 - losses[-1] / losses[0]
    _, mean = evaluate_samples(model, TRAIN_SET)
    ok = (len(losses) <= 500 and reduction >= 0.8 and mean.mf >= 0.95 and mean.mae <= 0.05
          and elapsed < 900 and not result.halted)
    assert report(5, ok, f"{len(losses)} steps, loss {losses[0]:.3f} -> {losses[-1]:.3f} "
                         f"({reduction:.1%} lower), train mF {mean.mf:.4f} MAE {mean.mae:.4f}, {elapsed:.0f}s")


def test_6_ablation_ordering():
    mf = {}
    for name in ORDER:
        model, _, _ = trained(name)
        mf[name] = evaluate_samples(model, TEST_SET)[1].mf
    full, base = mf["full"], mf["baseline"]
    ok = all(full >= mf[n] - TIE and mf[n] >= base - TIE for n in ("no-drs", "no-pes"))
    detail = ", ".join(f"{AblationConfig.from_name(n).label} {mf[n]:.4f}" for n in ORDER)
    assert report(6, ok, f"held-out mF: {detail} (ties within {TIE})")


def test_7_determinism_and_round_trips(tmp_path):
    small = ModelConfig(widths=(4, 4, 8, 8, 8), channels=8, groups=8)
    cfg = TrainConfig.desk(epochs=3)
    curves, models = [], []
    for _ in range(2):
        m = AGNet(small)
        curves.append(np.array(train(m, TRAIN_SET[:8], cfg).losses))
        models.append(m)
    same_curve = curves[0].tobytes() == curves[1].tobytes()

    images = np.stack([s.image for s in TEST_SET[:4]])
    before, _ = predict(models[0], images)
    path = save_checkpoint(models[0], tmp_path / "m.ckpt")
    fresh = load_checkpoint(AGNet(small), path)
    after, _ = predict(fresh, images)
    same_output = before.tobytes() == after.tobytes()

    rng = np.random.default_rng(7)
    io_ok = True
    for shape, ext in (((3, 17, 23), "ppm"), ((1, 9, 31), "pgm")):
        q = quantize(rng.random(shape)) / 255.0
        write_image(tmp_path / f"x.{ext}", q)
        back = read_image(tmp_path / f"x.{ext}")
        io_ok &= np.array_equal(quantize(back), quantize(q)) and np.array_equal(back, q.astype(back.dtype))
    ok = same_curve and same_output and io_ok
    assert report(7, ok, f"loss curves bitwise equal {same_curve}, checkpoint inference identical "
                         f"{same_output}, PGM/PPM identity {io_ok}")


def test_8_schedule_endpoints():
    cfg = TrainConfig()
    start, end = cosine_lr(0, cfg), cosine_lr(cfg.epochs, cfg)
    ok = start == 1e-4 and end == 1e-5
    assert report(8, ok, f"cosine_lr(0) = {start!r}, cosine_lr({cfg.epochs}) = {end!r}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
