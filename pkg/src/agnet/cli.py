"""``agnet`` command line: train, infer, eval, gradcheck, selftest, ablate.

Exit codes: 0 success, 1 a verification check failed, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import checks, config, metrics
from .ablation import ORDER, ablation_table, predict, run_ablation, write_ablation_csv
from .checkpoint import CheckpointError, load_checkpoint
from .data import (
    ImageFormatError, Sample, find_images, load_dataset, read_image, resize_sample, synth_dataset, write_image,
)
from .layers import resize_array
from .model import ABLATIONS, AGNet
from .trainer import train

log = logging.getLogger("agnet")

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad input from the user; reported without a traceback, exit 2."""


# -- config plumbing ----------------------------------------------------------------

def _overrides(args: argparse.Namespace) -> Dict:
    """Translate flags into the config file's nested layout (flags win)."""
    o: Dict = {}

    def put(section: Optional[str], key: str, value) -> None:
        if value is None:
            return
        if section is None:
            o[key] = value
        else:
            o.setdefault(section, {})[key] = value

    put(None, "seed", getattr(args, "seed", None))
    put(None, "output_dir", getattr(args, "out", None))
    put(None, "ablation", getattr(args, "ablation", None))
    put("data", "root", getattr(args, "data", None))
    put("data", "test_root", getattr(args, "test_data", None))
    put("train", "epochs", getattr(args, "epochs", None))
    put("train", "max_steps", getattr(args, "max_steps", None))
    put("train", "lr_max", getattr(args, "lr_max", None))
    put("train", "batch_size", getattr(args, "batch_size", None))
    return o


def _config(args: argparse.Namespace) -> config.RunConfig:
    try:
        return config.load(args.config, _overrides(args))
    except config.ConfigError as exc:
        raise UsageError(str(exc)) from None


def _echo(cfg: config.RunConfig, out_dir: Path) -> None:
    path = cfg.dump(out_dir / "config.yaml")
    log.info("effective config written to %s", path)


def _dataset(cfg: config.RunConfig, root: Optional[str]) -> List[Sample]:
    if root is None:
        s = cfg.data.synthetic
        log.info("using %d synthetic %dx%d samples (seed %d)", s.n, s.size, s.size, s.seed)
        return synth_dataset(s.n, s.size, s.seed)
    if not Path(root).is_dir():
        raise UsageError(f"dataset path {root} does not exist")
    samples = load_dataset(root)
    if not samples:
        raise UsageError(f"no image/mask pairs under {root}/images and {root}/masks")
    return [resize_sample(s, cfg.data.image_size) for s in samples]


# -- commands --------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _config(args)
    data = _dataset(cfg, cfg.data.root)
    out_dir = Path(cfg.output_dir)
    _echo(cfg, out_dir)
    model = AGNet(cfg.model_config(), cfg.ablation_config())
    result = train(model, data, cfg.train_config(), cfg.loss, out_dir)
    losses = result.losses
    print(f"trained {cfg.ablation_config().label} for {len(losses)} steps: "
          f"loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    print(f"checkpoint: {result.checkpoint}")
    print(f"loss log: {out_dir / 'loss_log.csv'}")
    return EXIT_FAILED if result.halted else EXIT_OK


def _model_input(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape[1:]
    if h % 32 == 0 and w % 32 == 0:
        return img
    return np.clip(resize_array(img.astype(np.float64), size, size), 0, 1).astype(np.float32)


def cmd_infer(args) -> int:
    cfg = _config(args)
    model = AGNet(cfg.model_config(), cfg.ablation_config())
    try:
        load_checkpoint(model, args.checkpoint)
    except (OSError, CheckpointError) as exc:
        raise UsageError(str(exc)) from None
    try:
        inputs = find_images(args.input)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _echo(cfg, out_dir)
    if not inputs:
        log.warning("no .ppm/.pgm images in %s; nothing to do", args.input)
        return EXIT_OK
    for stem, path in inputs.items():
        img = read_image(path)
        if img.shape[0] == 1:
            img = np.repeat(img, 3, axis=0)
        h, w = img.shape[1:]
        P, E = predict(model, _model_input(img, cfg.data.image_size)[None])
        maps = [(out_dir, P[0, 0])] + ([(out_dir / "edges", E[0, 0])] if args.edges else [])
        for folder, m in maps:
            if m.shape != (h, w):
                m = resize_array(m.astype(np.float64), h, w)
            folder.mkdir(exist_ok=True)
            write_image(folder / f"{stem}.pgm", m)
    print(f"wrote {len(inputs)} saliency map(s) to {out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        rows, mean = metrics.evaluate_dataset(args.pred, args.gt)
    except (FileNotFoundError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    print(metrics.format_table([(r.name, r) for r in rows] + [("mean", mean)]))
    if args.report:
        metrics.write_csv(args.report, rows, mean)
        print(f"report: {args.report}")
    return EXIT_OK


def _report(results: Sequence[checks.CheckResult]) -> int:
    for r in results:
        print(r.line())
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_FAILED if failed else EXIT_OK


def cmd_gradcheck(args) -> int:
    return _report(checks.gradcheck_suite())


def cmd_selftest(args) -> int:
    try:
        return _report(checks.selftest(args.mutate, args.passes))
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_ablate(args) -> int:
    cfg = _config(args)
    train_set = _dataset(cfg, cfg.data.root)
    eval_set = train_set if cfg.data.test_root is None else _dataset(cfg, cfg.data.test_root)
    out_dir = Path(cfg.output_dir)
    _echo(cfg, out_dir)
    runs = run_ablation(train_set, eval_set, cfg.model_config(), cfg.train_config(), cfg.loss,
                        ORDER, out_dir)
    print(ablation_table(runs))
    write_ablation_csv(out_dir / "ablation.csv", runs)
    print(f"report: {out_dir / 'ablation.csv'}")
    return EXIT_FAILED if any(r.result.halted for r in runs.values()) else EXIT_OK


# -- parser ------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="agnet", description="AGNet salient object detection toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p, training: bool = False):
        p.add_argument("--config", help="YAML run config")
        p.add_argument("--seed", type=int, help="overrides AGNET_SEED and the config seed")
        p.add_argument("--ablation", choices=sorted(ABLATIONS))
        if training:
            p.add_argument("--data", help="dataset root with images/ and masks/ (default: synthetic)")
            p.add_argument("--out", help="output directory")
            p.add_argument("--epochs", type=int)
            p.add_argument("--max-steps", type=int)
            p.add_argument("--lr-max", type=float)
            p.add_argument("--batch-size", type=int)

    p = sub.add_parser("train", help="train a model")
    with_config(p, training=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="write saliency maps for a directory of images")
    with_config(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="directory of .ppm/.pgm images")
    p.add_argument("--out", required=True)
    p.add_argument("--edges", action="store_true", help="also write edge maps to <out>/edges/")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predicted maps against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--report", help="CSV output path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="per-layer and full-model gradient checks")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("selftest", help="attention, metric and loss invariants")
    p.add_argument("--mutate", choices=sorted(checks.MUTATIONS),
                   help="deliberately break a component to confirm the suite catches it")
    p.add_argument("--passes", type=int, default=10, help="random forward passes")
    p.set_defaults(func=cmd_selftest)

    p = sub.add_parser("ablate", help="train and evaluate the four stage ablations")
    with_config(p, training=True)
    p.add_argument("--test-data", help="evaluation split (default: the training data)")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, ImageFormatError) as exc:
        print(f"agnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
