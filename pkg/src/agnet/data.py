"""Netpbm image I/O, samples, augmentation, and the synthetic desk dataset."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .layers import resize_array
from .losses import edge_target
from .tensor import Tensor

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".pgm", ".ppm")


class ImageFormatError(ValueError):
    pass


# -- netpbm ---------------------------------------------------------------------

def _header_tokens(buf: bytes, path) -> Tuple[List[Tuple[bytes, int]], int]:
    """Read magic, width, height, maxval; return them and the payload offset."""
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(buf):
            raise ImageFormatError(f"{path}: header truncated at byte {pos}")
        if buf[pos : pos + 1] == b"#":
            nl = buf.find(b"\n", pos)
            pos = len(buf) if nl < 0 else nl + 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        tokens.append((buf[start:pos], start))
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise ImageFormatError(f"{path}: missing whitespace after maxval at byte {pos}")
    return tokens, pos + 1


def read_image(path) -> np.ndarray:
    """Read a binary P5/P6 file with maxval 255 into a (C, H, W) float32 array in [0, 1]."""
    buf = Path(path).read_bytes()
    tokens, offset = _header_tokens(buf, path)
    (magic, _), *fields = tokens
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"{path}: unsupported magic {magic!r} at byte 0")
    values = []
    for tok, at in fields:
        try:
            values.append(int(tok))
        except ValueError:
            raise ImageFormatError(f"{path}: bad header field {tok!r} at byte {at}") from None
    width, height, maxval = values
    if maxval != 255:
        raise ImageFormatError(f"{path}: maxval {maxval} at byte {fields[2][1]} is not 255")
    if width < 1 or height < 1:
        raise ImageFormatError(f"{path}: empty image {width}x{height} at byte {fields[0][1]}")
    channels = 1 if magic == b"P5" else 3
    need = width * height * channels
    payload = buf[offset : offset + need]
    if len(payload) < need:
        raise ImageFormatError(
            f"{path}: payload truncated at byte {offset + len(payload)}, expected {need} bytes from byte {offset}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return (arr.transpose(2, 0, 1) / np.float32(255)).astype(np.float32)


def quantize(x) -> np.ndarray:
    return np.round(np.clip(np.asarray(x, dtype=np.float64), 0, 1) * 255).astype(np.uint8)


def write_image(path, x) -> None:
    """Write a (1|3, H, W) or (H, W) array in [0, 1] as P5/P6."""
    if isinstance(x, Tensor):
        x = x.data
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[0] not in (1, 3):
        raise ValueError(f"cannot write array of shape {x.shape} as netpbm")
    c, h, w = x.shape
    magic = b"P5" if c == 1 else b"P6"
    payload = quantize(x).transpose(1, 2, 0).tobytes()
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode() + payload)


def find_images(directory) -> Dict[str, Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"{directory} is not a directory")
    return {p.stem: p for p in sorted(directory.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


# -- samples --------------------------------------------------------------------

@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) in [0, 1]
    mask: np.ndarray   # (1, H, W) in {0, 1}
    edge: np.ndarray   # (1, H, W) in {0, 1}
    name: str = ""

    @classmethod
    def from_mask(cls, image: np.ndarray, mask: np.ndarray, name: str = "") -> "Sample":
        mask = (np.asarray(mask) > 0.5).astype(np.float32)
        if mask.ndim == 2:
            mask = mask[None]
        if image.shape[1:] != mask.shape[1:]:
            raise ValueError(f"{name}: image {image.shape} and mask {mask.shape} sizes differ")
        return cls(image.astype(np.float32), mask, edge_target(mask), name)


def load_dataset(root) -> List[Sample]:
    """Pair ``root/images/*.ppm`` with ``root/masks/*.pgm`` by stem."""
    root = Path(root)
    images = find_images(root / "images")
    masks = find_images(root / "masks")
    for stem in sorted(images.keys() ^ masks.keys()):
        log.warning("skipping %s: no %s", stem, "mask" if stem in images else "image")
    samples = []
    for stem in sorted(images.keys() & masks.keys()):
        img = read_image(images[stem])
        if img.shape[0] == 1:
            img = np.repeat(img, 3, axis=0)
        samples.append(Sample.from_mask(img, read_image(masks[stem])[:1], stem))
    return samples


def save_dataset(root, samples: Sequence[Sample]) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_image(root / "images" / f"{s.name}.ppm", s.image)
        write_image(root / "masks" / f"{s.name}.pgm", s.mask)


def to_batch(samples: Sequence[Sample]) -> Tuple[Tensor, Tensor, Tensor]:
    return (Tensor(np.stack([s.image for s in samples])),
            Tensor(np.stack([s.mask for s in samples])),
            Tensor(np.stack([s.edge for s in samples])))


# -- augmentation / resizing ------------------------------------------------------

def hflip(a: np.ndarray) -> np.ndarray:
    return a[..., ::-1].copy()


def vflip(a: np.ndarray) -> np.ndarray:
    return a[..., ::-1, :].copy()


def rot90(a: np.ndarray, k: int) -> np.ndarray:
    if k % 2 and a.shape[-1] != a.shape[-2]:
        raise ValueError(f"odd quarter-turn rotation needs a square image, got {a.shape[-2:]}")
    return np.rot90(a, k, axes=(-2, -1)).copy()


def transform(a: np.ndarray, flip_h: bool, flip_v: bool, k: int) -> np.ndarray:
    if flip_h:
        a = hflip(a)
    if flip_v:
        a = vflip(a)
    return rot90(a, k)


def augment(sample: Sample, rng: np.random.Generator) -> Sample:
    """Random horizontal/vertical flips (p=0.5 each) and a random quarter-turn rotation."""
    flip_h, flip_v = rng.random() < 0.5, rng.random() < 0.5
    k = int(rng.integers(0, 4))
    mask = transform(sample.mask, flip_h, flip_v, k)
    return Sample(transform(sample.image, flip_h, flip_v, k), mask, edge_target(mask), sample.name)


def resize_sample(sample: Sample, size: int = 224) -> Sample:
    if sample.image.shape[1:] == (size, size):
        return sample
    image = np.clip(resize_array(sample.image.astype(np.float64), size, size), 0, 1)
    mask = resize_array(sample.mask.astype(np.float64), size, size) >= 0.5
    return Sample.from_mask(image.astype(np.float32), mask, sample.name)


# -- synthetic scenes -------------------------------------------------------------

def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    base = rng.uniform(0.15, 0.45, size=(3, 1, 1))
    waves = np.zeros((3, size, size))
    for _ in range(3):
        fx, fy = rng.uniform(1, 6, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.02, 0.08, size=(3, 1, 1))
        waves += amp * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
    noise = rng.normal(0, 0.03, size=(3, size, size))
    return base + waves + noise


def _shape_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    cy, cx = rng.uniform(0.15, 0.85, size=2) * size
    ry, rx = rng.uniform(0.08, 0.3, size=2) * size
    if rng.random() < 0.5:
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)


def synth_sample(rng: np.random.Generator, size: int, name: str,
                 min_frac: float = 0.02, max_frac: float = 0.6) -> Sample:
    while True:
        mask = np.zeros((size, size), dtype=bool)
        for _ in range(int(rng.integers(1, 5))):
            mask |= _shape_mask(rng, size)
        if min_frac <= mask.mean() <= max_frac:
            break
    image = _texture(rng, size)
    colour = rng.uniform(0.6, 0.95, size=(3, 1, 1))
    shading = 1.0 + 0.05 * rng.normal(size=(1, size, size))
    image = np.where(mask[None], colour * shading, image)
    image = np.clip(image, 0, 1).astype(np.float32)
    return Sample.from_mask(image, mask, name)


def synth_dataset(n: int, size: int = 64, seed: int = 0) -> List[Sample]:
    """Deterministic scenes of 1-4 bright rectangles/ellipses on textured backgrounds."""
    if n < 1:
        raise ValueError("synth_dataset needs n >= 1")
    rng = np.random.default_rng(seed)
    return [synth_sample(rng, size, f"synth_{i:04d}") for i in range(n)]

