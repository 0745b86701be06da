"""AGNet: encoder, position enhancement stage, detail refinement stage, heads."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .layers import CBR, Conv2d, GroupConv1d, Module, Sequential, pool, upsample_bilinear
from .tensor import ShapeError, Tensor, concat_channels, relu, rsub, sigmoid

log = logging.getLogger(__name__)

ABLATIONS = {
    "baseline": (False, False),
    "no-drs": (True, False),
    "no-pes": (False, True),
    "full": (True, True),
}


@dataclass(frozen=True)
class AblationConfig:
    use_pes: bool = True
    use_drs: bool = True

    @classmethod
    def from_name(cls, name: str) -> "AblationConfig":
        try:
            pes, drs = ABLATIONS[name]
        except KeyError:
            raise ValueError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}") from None
        return cls(pes, drs)

    @property
    def label(self) -> str:
        return "Baseline" + ("+PES" if self.use_pes else "") + ("+DRS" if self.use_drs else "")

    @property
    def name(self) -> str:
        return {v: k for k, v in ABLATIONS.items()}[(self.use_pes, self.use_drs)]


@dataclass(frozen=True)
class ModelConfig:
    widths: Tuple[int, ...] = (16, 32, 64, 128, 128)
    channels: int = 128
    groups: int = 8
    decoder_kernel: int = 1
    seed: int = 0

    def __post_init__(self):
        if len(self.widths) != 5:
            raise ValueError("encoder needs exactly five widths")
        if self.channels % self.groups:
            raise ValueError(f"channels={self.channels} not divisible by groups={self.groups}")


@dataclass
class FeaturePyramid:
    raw: List[Tensor]      # f1..f5
    reduced: List[Tensor]  # F1..F5


@dataclass
class ModelOutput:
    P: Tensor
    E: Tensor
    aux: Dict[str, Tensor] = field(default_factory=dict)


class Encoder(Module):
    """Plain strided-conv stand-in backbone; level i runs at stride 2**i."""

    def __init__(self, widths: Sequence[int], in_channels: int = 3, rng=None):
        stages = []
        prev = in_channels
        for w in widths:
            stages.append(Sequential(CBR(prev, w, 3, stride=2, rng=rng), CBR(w, w, 3, rng=rng)))
            prev = w
        self.stages = stages

    def forward(self, x: Tensor) -> List[Tensor]:
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class SAM(Module):
    """Channel attention from pooled descriptors through shared grouped 1-D convs."""

    def __init__(self, channels: int, groups: int = 8, rng=None):
        if channels % groups:
            raise ShapeError(f"SAM: {channels} channels not divisible by {groups} groups")
        self.gconv1 = GroupConv1d(channels, groups, rng=rng)
        self.gconv2 = GroupConv1d(channels, groups, rng=rng)

    def excite(self, v: Tensor) -> Tensor:
        return self.gconv2(relu(self.gconv1(v)))

    def forward(self, x: Tensor, trace: Optional[dict] = None) -> Tensor:
        att = sigmoid(self.excite(pool("global_avg", x)) + self.excite(pool("global_max", x)))
        if trace is not None:
            trace["sam_att"] = att
        return x * att


class CAM(Module):
    """Two single-channel spatial attentions: channel-pooled stats and a local 3x3 conv."""

    def __init__(self, channels: int, kernel_size: int = 1, rng=None):
        self.conv_pooled = Conv2d(2, 1, 3, rng=rng)
        self.conv_local = Conv2d(channels, 1, 3, rng=rng)
        self.fuse = CBR(channels, channels, kernel_size, rng=rng)

    def forward(self, x: Tensor, trace: Optional[dict] = None) -> Tensor:
        stats = concat_channels([pool("channel_max", x), pool("channel_avg", x)])
        att1 = sigmoid(self.conv_pooled(stats))
        att2 = sigmoid(self.conv_local(x))
        if trace is not None:
            trace["cam_att1"] = att1
            trace["cam_att2"] = att2
        return self.fuse(x * att1 + x * att2)


def _up_to(x: Tensor, ref: Tensor) -> Tensor:
    return upsample_bilinear(x, ref.shape[2], ref.shape[3])


class PES(Module):
    """Fuses deep level-4/level-5 features into the decoder seed at level-4 resolution.

    With ``enhance=False`` SAM and CAM are absent and the raw features are fused.
    """

    def __init__(self, channels: int, groups: int = 8, kernel_size: int = 3,
                 enhance: bool = True, rng=None):
        self.enhance = enhance
        if enhance:
            self.sam = SAM(channels, groups, rng=rng)
            self.cam = CAM(channels, kernel_size, rng=rng)
        self.fuse = CBR(2 * channels, channels, kernel_size, rng=rng)

    def forward(self, f4: Tensor, f5: Tensor, trace: Optional[dict] = None) -> Tensor:
        if f4.shape[2] != 2 * f5.shape[2] or f4.shape[3] != 2 * f5.shape[3]:
            raise ShapeError(f"PES needs level 4 at twice level 5's size, got {f4.shape} and {f5.shape}")
        if self.enhance:
            f4 = self.sam(f4, trace)
            f5 = self.cam(f5, trace)
        return self.fuse(concat_channels([f4, _up_to(f5, f4)]))


def reverse_attention(att: Tensor) -> Tensor:
    return rsub(att, 1.0)


class SRM(Module):
    """Attention / reverse-attention refinement of a deep+shallow fusion.

    With ``refine=False`` only the fusion CBR remains.  ``invert`` maps the
    attention map to its reverse; the self-test swaps it to prove the
    inversion check can fail.
    """

    invert = staticmethod(reverse_attention)

    def __init__(self, channels: int, kernel_size: int = 3, refine: bool = True, rng=None):
        self.refine = refine
        self.fuse = CBR(2 * channels, channels, kernel_size, rng=rng)
        if refine:
            self.att_conv = Conv2d(channels, 1, 1, rng=rng)
            self.cbr_att = CBR(channels, channels, kernel_size, rng=rng)
            self.cbr_rev = CBR(channels, channels, kernel_size, rng=rng)
            self.cbr_out = CBR(channels, channels, kernel_size, rng=rng)

    def forward(self, deep: Tensor, shallow: Tensor, trace: Optional[dict] = None,
                tag: str = "srm") -> Tensor:
        if shallow.shape[2] != 2 * deep.shape[2] or shallow.shape[3] != 2 * deep.shape[3]:
            raise ShapeError(f"SRM needs shallow at twice deep's size, got {deep.shape} and {shallow.shape}")
        f = self.fuse(concat_channels([_up_to(deep, shallow), shallow]))
        if not self.refine:
            return f
        att = sigmoid(self.att_conv(f))
        att_r = self.invert(att)
        if trace is not None:
            trace[f"{tag}_f"] = f
            trace[f"{tag}_att"] = att
            trace[f"{tag}_att_r"] = att_r
        return self.cbr_out(self.cbr_att(f * att) + self.cbr_rev(f * att_r))


class AGNet(Module):
    def __init__(self, config: ModelConfig = ModelConfig(),
                 ablation: AblationConfig = AblationConfig()):
        self.config = config
        self.ablation = ablation
        rng = np.random.default_rng(config.seed)
        c, k = config.channels, config.decoder_kernel
        self.encoder = Encoder(config.widths, rng=rng)
        self.reduce = [CBR(w, c, 1, rng=rng) for w in config.widths]
        self.pes = PES(c, config.groups, k, enhance=ablation.use_pes, rng=rng)
        self.srms = [SRM(c, k, refine=ablation.use_drs, rng=rng) for _ in range(3)]
        self.fuse_out = CBR(3 * c, c, k, rng=rng)
        self.head = Conv2d(c, 1, 1, rng=rng)
        self.edge_head = Conv2d(c, 1, 1, rng=rng)
        log.info("AGNet[%s] widths=%s channels=%d: %d parameters", ablation.label,
                 config.widths, c, self.num_parameters())

    def encode(self, image: Tensor) -> FeaturePyramid:
        if image.ndim != 4 or image.shape[1] != 3:
            raise ShapeError(f"expected an N x 3 x H x W image, got {image.shape}")
        if image.shape[2] % 32 or image.shape[3] % 32:
            raise ShapeError(f"input size {image.shape[2:]} is not divisible by 32")
        raw = self.encoder(image)
        return FeaturePyramid(raw, [r(f) for r, f in zip(self.reduce, raw)])

    def forward(self, image: Tensor, trace: Optional[dict] = None) -> ModelOutput:
        aux = {} if trace is None else trace
        feats = self.encode(image).reduced
        deep = self.pes(feats[3], feats[4], aux)
        aux["pes"] = deep
        outs = []
        # levels 3, 2, 1 -> feats[2], feats[1], feats[0]
        for srm, level in zip(self.srms, (3, 2, 1)):
            deep = srm(deep, feats[level - 1], aux, tag=f"srm{level}")
            aux[f"srm{level}_out"] = deep
            outs.append(deep)
        finest = outs[-1]
        fused = self.fuse_out(concat_channels([_up_to(o, finest) for o in outs]))
        h, w = image.shape[2:]
        P = upsample_bilinear(sigmoid(self.head(fused)), h, w)
        E = upsample_bilinear(sigmoid(self.edge_head(finest)), h, w)
        return ModelOutput(P, E, aux)


def encoder_forward(image: Tensor, model: AGNet) -> FeaturePyramid:
    return model.encode(image)


def sam_forward(f4: Tensor, sam: SAM) -> Tensor:
    return sam(f4)


def cam_forward(f5: Tensor, cam: CAM) -> Tensor:
    return cam(f5)


def pes_forward(f4: Tensor, f5: Tensor, pes: PES) -> Tensor:
    return pes(f4, f5)


def srm_forward(deep: Tensor, shallow: Tensor, srm: SRM) -> Tensor:
    return srm(deep, shallow)


def model_forward(image: Tensor, model: AGNet) -> ModelOutput:
    return model(image)
