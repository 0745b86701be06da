"""Parameterized layers: convolution, batch norm, pooling, bilinear resize, CBR."""

from __future__ import annotations

from collections import OrderedDict
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from .tensor import ShapeError, Tensor, _result, get_default_dtype, relu


# -- functional kernels ---------------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : stride * ho : stride, : stride * wo : stride]
    # (N, C, Ho, Wo, kh, kw) -> (N, C*kh*kw, Ho*Wo)
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, xp_shape, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp_shape[:2]
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros(xp_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    """Grouped 2-D cross-correlation on NCHW input."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input, got {x.shape}")
    n, c_in, h, w = x.shape
    c_out, c_per, kh, kw = weight.shape
    if c_in % groups or c_out % groups:
        raise ShapeError(f"channels ({c_in} in, {c_out} out) not divisible by groups={groups}")
    if c_per * groups != c_in:
        raise ShapeError(f"input has {c_in} channels, weight expects {c_per * groups}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    pointwise = kh == kw == 1 and stride == 1
    og = c_out // groups
    cols, out = [], np.empty((n, c_out, ho * wo), dtype=x.dtype)
    for g in range(groups):
        xg = xp[:, g * c_per : (g + 1) * c_per]
        col = xg.reshape(n, c_per, h * w) if pointwise else _im2col(xg, kh, kw, stride, ho, wo)
        wg = weight.data[g * og : (g + 1) * og].reshape(og, -1)
        out[:, g * og : (g + 1) * og] = wg @ col
        cols.append(col)
    out = out.reshape(n, c_out, ho, wo)
    if bias is not None:
        out += bias.data.reshape(1, c_out, 1, 1)

    def backward(gy):
        gy = gy.reshape(n, c_out, ho * wo)
        gw = np.empty_like(weight.data)
        gxp = np.empty(xp.shape, dtype=x.dtype) if x.requires_grad else None
        for g in range(groups):
            gyg = gy[:, g * og : (g + 1) * og]
            gw[g * og : (g + 1) * og] = np.tensordot(gyg, cols[g], axes=([0, 2], [0, 2])).reshape(og, c_per, kh, kw)
            if gxp is not None:
                wg = weight.data[g * og : (g + 1) * og].reshape(og, -1)
                gcol = wg.T @ gyg
                if pointwise:
                    gxp[:, g * c_per : (g + 1) * c_per] = gcol.reshape(n, c_per, h, w)
                else:
                    gxp[:, g * c_per : (g + 1) * c_per] = _col2im(
                        gcol, (n, c_per) + xp.shape[2:], kh, kw, stride, ho, wo)
        gx = None
        if gxp is not None:
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        grads = (gx, gw)
        if bias is not None:
            grads += (gy.sum(axis=(0, 2)),)
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward, "conv2d")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over (N, H, W).

    In training mode the running statistics are updated in place.
    """
    n, c, h, w = x.shape
    if c != gamma.shape[0]:
        raise ShapeError(f"batch_norm: {c} channels but {gamma.shape[0]} affine parameters")
    g4 = gamma.data.reshape(1, c, 1, 1)
    b4 = beta.data.reshape(1, c, 1, 1)
    if training:
        m = n * h * w
        if m == 1:
            raise ShapeError("batch_norm in train mode needs more than one value per channel")
        mean = x.data.mean(axis=(0, 2, 3), keepdims=True)
        xc = x.data - mean
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv_std
        running_mean *= 1 - momentum
        running_mean += momentum * mean.reshape(c)
        running_var *= 1 - momentum
        running_var += momentum * var.reshape(c) * (m / (m - 1))

        def backward(gy):
            gsum = gy.sum(axis=(0, 2, 3), keepdims=True)
            gxhat_sum = (gy * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = g4 * inv_std / m * (m * gy - gsum - xhat * gxhat_sum)
            return gx, gxhat_sum.reshape(c), gsum.reshape(c)
    else:
        inv_std = (1.0 / np.sqrt(running_var + eps)).reshape(1, c, 1, 1).astype(x.dtype)
        xhat = (x.data - running_mean.reshape(1, c, 1, 1)) * inv_std

        def backward(gy):
            return (gy * g4 * inv_std, (gy * xhat).sum(axis=(0, 2, 3)), gy.sum(axis=(0, 2, 3)))

    out = (g4 * xhat + b4).astype(x.dtype, copy=False)
    return _result(out, (x, gamma, beta), backward, "batch_norm")


def pool(kind: str, x: Tensor) -> Tensor:
    """Global (over H,W) or channel (over C) average/max pooling.

    Max ties resolve to the first index in row-major order.
    """
    n, c, h, w = x.shape
    if kind == "global_avg":
        out = x.data.mean(axis=(2, 3), keepdims=True)

        def backward(g):
            return (np.broadcast_to(g / (h * w), x.shape).astype(x.dtype),)
    elif kind == "channel_avg":
        out = x.data.mean(axis=1, keepdims=True)

        def backward(g):
            return (np.broadcast_to(g / c, x.shape).astype(x.dtype),)
    elif kind == "global_max":
        flat = x.data.reshape(n, c, h * w)
        idx = flat.argmax(axis=2)
        out = np.take_along_axis(flat, idx[..., None], axis=2).reshape(n, c, 1, 1)

        def backward(g):
            gx = np.zeros((n, c, h * w), dtype=x.dtype)
            np.put_along_axis(gx, idx[..., None], g.reshape(n, c, 1), axis=2)
            return (gx.reshape(x.shape),)
    elif kind == "channel_max":
        idx = x.data.argmax(axis=1)[:, None]
        out = np.take_along_axis(x.data, idx, axis=1)

        def backward(g):
            gx = np.zeros_like(x.data)
            np.put_along_axis(gx, idx, g, axis=1)
            return (gx,)
    else:
        raise ValueError(f"unknown pool kind {kind!r}")
    return _result(out, (x,), backward, kind)


def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """(n_out, n_in) linear-interpolation weights with half-pixel centres."""
    if n_out < 1 or n_in < 1:
        raise ValueError("interpolation sizes must be positive")
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    return m.astype(dtype)


def resize_array(a: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of the last two axes of a plain array."""
    ah = interp_matrix(a.shape[-2], out_h, a.dtype)
    aw = interp_matrix(a.shape[-1], out_w, a.dtype)
    return ah @ a @ aw.T


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    n, c, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return x
    ah = interp_matrix(h, out_h, x.dtype)
    aw = interp_matrix(w, out_w, x.dtype)

    def backward(g):
        return (ah.T @ g @ aw,)

    return _result(ah @ x.data @ aw.T, (x,), backward, "upsample")


# -- modules ------------------------------------------------------------------

class Module:
    """Minimal parameter container; attributes that are Tensors or Modules are tracked."""

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[Tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Tensor, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, (Tensor, Module)):
                        yield f"{name}.{i}", v

    def named_tensors(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in self._children():
            full = prefix + name
            if isinstance(value, Module):
                yield from value.named_tensors(full + ".")
            else:
                yield full, value

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        return ((k, t) for k, t in self.named_tensors() if t.requires_grad)

    def parameters(self) -> List[Tensor]:
        return [t for _, t in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def to(self, dtype) -> "Module":
        for _, t in self.named_tensors():
            t.data = t.data.astype(dtype)
            t.zero_grad()
        return self

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, t.data.copy()) for k, t in self.named_tensors())

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_tensors())
        problems = []
        for k in own.keys() - state.keys():
            problems.append(f"missing {k}")
        for k in state.keys() - own.keys():
            problems.append(f"unexpected {k}")
        for k in own.keys() & state.keys():
            if own[k].shape != tuple(state[k].shape):
                problems.append(f"{k}: model {own[k].shape} vs checkpoint {tuple(state[k].shape)}")
        if problems:
            raise ShapeError("state does not match model: " + "; ".join(sorted(problems)))
        for k, t in own.items():
            t.data = np.asarray(state[k], dtype=t.dtype).copy()
            t.zero_grad()


def _param(arr: np.ndarray) -> Tensor:
    return Tensor(arr.astype(get_default_dtype()), requires_grad=True)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel_size: int = 1, stride: int = 1,
                 padding: Optional[int] = None, groups: int = 1, bias: bool = True,
                 rng: Optional[np.random.Generator] = None):
        if c_in % groups or c_out % groups:
            raise ShapeError(f"channels ({c_in}, {c_out}) not divisible by groups={groups}")
        if kernel_size % 2 == 0:
            raise ShapeError("only odd kernel sizes are supported")
        rng = rng if rng is not None else np.random.default_rng()
        fan_in = (c_in // groups) * kernel_size * kernel_size
        bound = np.sqrt(6.0 / fan_in)
        self.weight = _param(rng.uniform(-bound, bound, (c_out, c_in // groups, kernel_size, kernel_size)))
        self.bias = _param(np.zeros(c_out)) if bias else None
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        self.groups = groups

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class GroupConv1d(Conv2d):
    """Kernel-size-1 grouped convolution over a pooled channel vector (N, C, 1, 1).

    Equivalent to multiplying by a block-diagonal (C, C) matrix with
    ``groups`` blocks, so each output only mixes channels of its own group.
    """

    def __init__(self, channels: int, groups: int, bias: bool = True, rng=None):
        super().__init__(channels, channels, 1, groups=groups, bias=bias, rng=rng)

    def forward(self, v: Tensor) -> Tensor:
        if v.ndim != 4 or v.shape[2:] != (1, 1):
            raise ShapeError(f"GroupConv1d expects (N, C, 1, 1), got {v.shape}")
        return super().forward(v)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        dtype = get_default_dtype()
        self.gamma = _param(np.ones(channels))
        self.beta = _param(np.zeros(channels))
        self.running_mean = Tensor(np.zeros(channels, dtype=dtype))
        self.running_var = Tensor(np.ones(channels, dtype=dtype))
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.running_mean.data, self.running_var.data,
                          self.training, self.momentum, self.eps)


class CBR(Module):
    """conv -> batch norm -> relu."""

    def __init__(self, c_in: int, c_out: int, kernel_size: int = 1, stride: int = 1, rng=None):
        self.conv = Conv2d(c_in, c_out, kernel_size, stride, rng=rng)
        self.bn = BatchNorm2d(c_out)

    @property
    def out_channels(self) -> int:
        return self.conv.out_channels

    def forward(self, x: Tensor) -> Tensor:
        return relu(self.bn(self.conv(x)))


def cbr(x: Tensor, block: CBR) -> Tensor:
    return block(x)


class Sequential(Module):
    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x
