"""Verification suite behind ``agnet selftest`` and ``agnet gradcheck``.

Each check returns a :class:`CheckResult`; the CLI prints one PASS/FAIL
line per result and exits non-zero if any failed.
"""

from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import metrics
from .layers import CBR, BatchNorm2d, Conv2d, GroupConv1d, upsample_bilinear
from .losses import HybridLossConfig, hybrid_loss, recombine
from .model import AGNet, CAM, PES, SAM, SRM, ModelConfig, ModelOutput
from .tensor import Tensor, default_dtype, grad_check, no_grad, rsub

GRAD_TOL = 1e-4
GRADCHECK_CONFIG = ModelConfig(widths=(4, 4, 8, 8, 8), channels=8, groups=8, seed=1)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}" + (f": {self.detail}" if self.detail else "")


# -- gradients --------------------------------------------------------------------

def generic_point(model, rng: np.random.Generator) -> None:
    """Move biases and batch-norm statistics off their initial values.

    Zero biases make a pixel whose inputs are all dead ReLUs land exactly on
    the next ReLU's kink, where central differences and the subgradient
    disagree by construction.  Random offsets put the check at a generic point.
    """
    for name, t in model.named_tensors():
        if name.endswith(("bias", "beta", "running_mean")):
            t.data = rng.uniform(-0.1, 0.1, t.shape)
        elif name.endswith(("gamma", "running_var")):
            t.data = rng.uniform(0.5, 1.5, t.shape)


def model_gradcheck(config: ModelConfig = GRADCHECK_CONFIG, size: int = 64, h: float = 1e-5,
                    input_samples: int = 200, weight_samples: int = 5) -> Tuple[float, Dict[str, float]]:
    """Full-model check at 64-bit, in eval mode.

    Every coordinate of each vector parameter is checked, plus
    ``weight_samples`` random coordinates of each weight tensor and
    ``input_samples`` input pixels.  Returns the worst error and a
    per-tensor breakdown.
    """
    rng = np.random.default_rng(config.seed)
    model = AGNet(config).to(np.float64)
    model.eval()
    generic_point(model, rng)
    x = Tensor(rng.random((1, 3, size, size)), requires_grad=True)
    wp = Tensor(rng.normal(size=(1, 1, size, size)))
    we = Tensor(rng.normal(size=(1, 1, size, size)))

    def objective(_):
        out = model(x)
        return (out.P * wp).sum() + (out.E * we).sum()

    errors = {"input": grad_check(objective, x, h, rng.choice(x.size, input_samples, replace=False))}
    for name, p in model.named_parameters():
        idx = None if p.ndim == 1 else rng.choice(p.size, min(weight_samples, p.size), replace=False)
        errors[name] = grad_check(objective, p, h, idx)
    return max(errors.values()), errors


def _weighted_sum(out: Tensor, rng) -> Tensor:
    return (out * Tensor(rng.normal(size=out.shape))).sum()


def layer_gradchecks(seed: int = 0, h: float = 1e-5) -> Dict[str, float]:
    """Per-layer checks on small random inputs, each w.r.t. its input tensor."""
    rng = np.random.default_rng(seed)
    cases: Dict[str, Tuple[Callable[[Tensor], Tensor], Tuple[int, ...]]] = {}
    with default_dtype(np.float64):
        conv = Conv2d(4, 6, 3, stride=2, rng=rng)
        gconv = GroupConv1d(16, 8, rng=rng)
        bn = BatchNorm2d(4)
        cbr = CBR(4, 5, 3, rng=rng)
        sam, cam = SAM(16, 8, rng=rng), CAM(8, rng=rng)
        srm, pes = SRM(8, 1, rng=rng), PES(8, 8, 1, rng=rng)
    for m in (sam, cam, srm, pes):
        generic_point(m, rng)
        m.eval()
    f5 = Tensor(rng.normal(size=(2, 8, 2, 2)))
    deep = Tensor(rng.normal(size=(2, 8, 3, 3)))
    cases["conv2d"] = (conv, (2, 4, 7, 7))
    cases["group_conv"] = (gconv, (2, 16, 1, 1))
    cases["batch_norm_train"] = (bn, (3, 4, 3, 3))
    cases["cbr"] = (cbr, (2, 4, 5, 5))
    cases["upsample"] = (lambda t: upsample_bilinear(t, 7, 9), (1, 2, 3, 4))
    cases["sam"] = (sam, (2, 16, 3, 3))
    cases["cam"] = (cam, (2, 8, 4, 4))
    cases["pes"] = (lambda t: pes(t, f5), (2, 8, 4, 4))
    cases["srm"] = (lambda t: srm(deep, t), (2, 8, 6, 6))
    results = {}
    for name, (fn, shape) in cases.items():
        x = Tensor(rng.normal(size=shape), requires_grad=True)
        weights = Tensor(rng.normal(size=fn(x).shape))
        results[name] = grad_check(lambda t: (fn(t) * weights).sum(), x, h)
    return results


def gradcheck_suite() -> List[CheckResult]:
    out = []
    for name, err in layer_gradchecks().items():
        out.append(CheckResult(f"gradcheck {name}", err < GRAD_TOL, f"max rel err {err:.2e}"))
    start = time.perf_counter()
    worst, per_tensor = model_gradcheck()
    culprit = max(per_tensor, key=per_tensor.get)
    out.append(CheckResult("gradcheck full model", worst < GRAD_TOL,
                           f"max rel err {worst:.2e} ({culprit}), {len(per_tensor)} tensors, "
                           f"{time.perf_counter() - start:.1f}s"))
    return out


# -- structural invariants ------------------------------------------------------------

def attention_invariants(model: AGNet, passes: int = 10, size: int = 64, seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    channels = model.config.channels
    in_range = exact = True
    recon_err = 0.0
    bad_channels = set()
    with no_grad():
        for _ in range(passes):
            trace: Dict[str, Tensor] = {}
            model(Tensor(rng.random((1, 3, size, size)).astype(np.float32)), trace)
            for key, t in trace.items():
                if "att" in key and not key.endswith("_att_r"):
                    in_range &= bool(((t.data > 0) & (t.data < 1)).all())
                if key.endswith("_out") or key == "pes" or key.endswith("_f"):
                    if t.shape[1] != channels:
                        bad_channels.add(key)
            for tag in ("srm3", "srm2", "srm1"):
                if f"{tag}_att" not in trace:
                    continue
                att, att_r, f = (trace[f"{tag}_{k}"].data for k in ("att", "att_r", "f"))
                exact &= bool((att + att_r == 1).all())
                recon_err = max(recon_err, float(np.abs(att * f + att_r * f - f).max()))
    return [
        CheckResult("attention values in (0,1)", in_range, f"{passes} forward passes"),
        CheckResult("att + att_r == 1", exact),
        CheckResult("att*f + att_r*f reconstructs f", recon_err <= 1e-6, f"max abs err {recon_err:.1e}"),
        CheckResult(f"inter-module features have {channels} channels", not bad_channels,
                    ", ".join(sorted(bad_channels))),
    ]


# -- metric oracles ---------------------------------------------------------------------

def _brute_mean_f(p: np.ndarray, g: np.ndarray, beta_sq: float = 0.3) -> float:
    total = 0.0
    for t in range(256):
        b = 256 * p > t
        tp, npred, ngt = float((b & g).sum()), float(b.sum()), float(g.sum())
        pr = tp / npred if npred else 0.0
        rc = tp / ngt if ngt else 0.0
        den = beta_sq * pr + rc
        total += (1 + beta_sq) * pr * rc / den if den else 0.0
    return total / 256


def _brute_mean_e(p: np.ndarray, g: np.ndarray) -> float:
    gf = g.astype(np.float64)
    total = 0.0
    for t in range(256):
        b = (256 * p > t).astype(np.float64)
        if gf.sum() == 0:
            enhanced = 1 - b
        elif gf.sum() == gf.size:
            enhanced = b
        else:
            dp, dg = b - b.mean(), gf - gf.mean()
            den = dp * dp + dg * dg
            xi = np.divide(2 * dp * dg, den, out=np.zeros_like(den), where=den > 0)
            enhanced = (xi + 1) ** 2 / 4
        total += enhanced.mean()
    return total / 256


def metric_checks(pairs: int = 40, seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    worst = {"mae": 0.0, "mf": 0.0, "me": 0.0}
    in_range = True
    for k in range(pairs):
        size = 8 if k % 2 == 0 else 32
        p = rng.random((size, size))
        g = rng.random((size, size)) > rng.uniform(0.2, 0.8)
        worst["mae"] = max(worst["mae"], abs(metrics.mae(p, g) - float(np.abs(p - g).mean())))
        worst["mf"] = max(worst["mf"], abs(metrics.mean_f(p, g) - _brute_mean_f(p, g)))
        worst["me"] = max(worst["me"], abs(metrics.mean_e(p, g) - _brute_mean_e(p, g)))
        in_range &= all(0 <= v <= 1 for v in metrics.evaluate(p, g).values())
    g = np.zeros((16, 16), dtype=bool)
    g[4:10, 3:12] = True
    perfect = metrics.evaluate(g.astype(np.float64), g)
    return [
        CheckResult("MAE matches scalar oracle", worst["mae"] < 1e-9, f"max diff {worst['mae']:.1e}"),
        CheckResult("mean F matches threshold sweep", worst["mf"] < 1e-9, f"max diff {worst['mf']:.1e}"),
        CheckResult("mean E matches threshold sweep", worst["me"] < 1e-6, f"max diff {worst['me']:.1e}"),
        CheckResult("metrics stay in [0,1]", in_range),
        CheckResult("perfect prediction scores 1", perfect["mae"] == 0 and
                    all(abs(perfect[k] - 1) < 1e-12 for k in ("mf", "sm", "me"))),
    ]


# -- loss identities ----------------------------------------------------------------------

def loss_checks(seed: int = 0) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    cfg = HybridLossConfig()
    shape = (2, 1, 16, 16)
    gp = (rng.random(shape) > 0.5).astype(np.float64)
    ge = (rng.random(shape) > 0.8).astype(np.float64)
    out = ModelOutput(Tensor(rng.uniform(0.01, 0.99, shape)), Tensor(rng.uniform(0.01, 0.99, shape)))
    total, parts = hybrid_loss(out, gp, ge, cfg)
    diff = abs(total.item() - recombine(parts, cfg))
    _, perfect = hybrid_loss(ModelOutput(Tensor(gp), Tensor(ge)), gp, ge, cfg)
    return [
        CheckResult("hybrid loss equals recombined parts", diff < 1e-6, f"diff {diff:.1e}"),
        CheckResult("perfect prediction zeroes the loss terms",
                    perfect["bce"] < 1e-6 and perfect["iou"] < 1e-5 and perfect["f"] < 1e-5,
                    f"bce {perfect['bce']:.1e} iou {perfect['iou']:.1e} f {perfect['f']:.1e}"),
    ]


# -- suite ------------------------------------------------------------------------------

MUTATIONS = {
    # scales the attention before inverting, so att + att_r drifts away from 1
    "srm-inversion": lambda att: rsub(att * 0.9, 1.0),
}


@contextlib.contextmanager
def mutated(name: Optional[str]) -> Iterator[None]:
    if name is None:
        yield
        return
    if name not in MUTATIONS:
        raise ValueError(f"unknown mutation {name!r}; choose from {sorted(MUTATIONS)}")
    original = SRM.__dict__["invert"]
    SRM.invert = staticmethod(MUTATIONS[name])
    try:
        yield
    finally:
        SRM.invert = original


def selftest(mutation: Optional[str] = None, passes: int = 10) -> List[CheckResult]:
    with mutated(mutation):
        model = AGNet()
        model.eval()
        results = attention_invariants(model, passes)
    return results + metric_checks() + loss_checks()
