"""DeepPyram encoder-decoder network and its ablation/alternative variants."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import tensor as T
from .deform import DeformableConvSpec, deformable_block, deformable_conv2d
from .errors import ConfigError, DimensionError
from .nn import BatchNorm2d, Conv2d, ConvBNReLU, Module, Upsample, he_normal, parameter
from .tensor import Tensor

ALTERNATIVES = ("none", "aspp_plus", "ppm")
UPSAMPLE_MODES = ("bilinear", "transposed", "pixel_shuffle")
DESK_WIDTHS = (16, 32, 64, 128, 128)
VGG16_WIDTHS = (64, 128, 256, 512, 512)


@dataclass
class ModelConfig:
    """Architecture description.

    ``decoder_alternative="aspp_plus"`` puts ASPP+ where DPR would sit and
    ``"ppm"`` puts a PSPNet pyramid pooling module where PVF would sit.
    """

    in_channels: int = 3
    num_classes: int = 4
    widths: tuple = DESK_WIDTHS
    convs_per_stage: tuple = (2, 2, 2, 2, 2)
    enable_pvf: bool = True
    enable_dpr: bool = True
    enable_pl: bool = True
    decoder_alternative: str = "none"
    upsample_mode: str = "bilinear"
    pvf_pool_sizes: tuple = (3, 5, 7)
    pvf_bottleneck: Optional[int] = None
    dpr_dilations: tuple = (3, 6)
    ppm_bins: tuple = (1, 3, 4, 6)
    seed: int = 0

    def __post_init__(self):
        for name in ("widths", "convs_per_stage", "pvf_pool_sizes", "dpr_dilations", "ppm_bins"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        if len(self.widths) != 5 or len(self.convs_per_stage) != 5:
            raise ConfigError("encoder must have exactly 5 stages")
        if min(self.widths) < 1 or min(self.convs_per_stage) < 1:
            raise ConfigError("stage widths and conv counts must be positive")
        if self.num_classes < 1 or self.in_channels < 1:
            raise ConfigError("num_classes and in_channels must be positive")
        if any(k % 2 == 0 or k < 1 for k in self.pvf_pool_sizes):
            raise ConfigError(f"pvf_pool_sizes must be odd, got {self.pvf_pool_sizes}")
        if len(self.pvf_pool_sizes) != 3:
            raise ConfigError("PVF uses exactly three local pooling branches")
        if self.pvf_bottleneck is not None and (self.pvf_bottleneck < 4 or self.pvf_bottleneck % 4):
            raise ConfigError(f"pvf_bottleneck must be a positive multiple of 4, got {self.pvf_bottleneck}")
        if self.decoder_alternative not in ALTERNATIVES:
            raise ConfigError(f"decoder_alternative must be one of {ALTERNATIVES}")
        if self.upsample_mode not in UPSAMPLE_MODES:
            raise ConfigError(f"upsample_mode must be one of {UPSAMPLE_MODES}")
        if not self.dpr_dilations or min(self.dpr_dilations) < 1:
            raise ConfigError("dpr_dilations must be positive integers")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def vgg16(cls, **kw) -> "ModelConfig":
        """Full-width VGG16 layout (2, 2, 3, 3, 3 convolutions per stage)."""
        return cls(widths=VGG16_WIDTHS, convs_per_stage=(2, 2, 3, 3, 3), **kw)


@dataclass
class ModelOutput:
    """Class probabilities at full, 1/2, 1/4 and 1/8 resolution.

    Only the full-resolution master branch is present when the pyramid
    loss heads are disabled.
    """

    scales: List[Tensor] = field(default_factory=list)

    @property
    def master(self) -> Tensor:
        return self.scales[0]

    def __len__(self) -> int:
        return len(self.scales)

    def __getitem__(self, i) -> Tensor:
        return self.scales[i]


def pvf_bottleneck_width(cin: int) -> int:
    """Half the input channels rounded to a multiple of 4 (at least 4)."""
    return max(4, int(round(cin / 2 / 4)) * 4)


class PyramidViewFusion(Module):
    """Bottleneck, four stride-1 pooling views, grouped fusion, conv, layer norm."""

    def __init__(self, cin: int, rng, pool_sizes=(3, 5, 7), bottleneck: Optional[int] = None):
        b = bottleneck if bottleneck is not None else pvf_bottleneck_width(cin)
        if b % 4:
            raise ConfigError(f"PVF bottleneck width {b} is not divisible by 4")
        self.pool_sizes = tuple(pool_sizes)
        self.bottleneck = Conv2d(cin, b, 1, rng)
        self.group_fuse = Conv2d(4 * b, b, 3, rng, groups=4)
        self.mix = Conv2d(b, cin, 3, rng)

    def views(self, x: Tensor) -> Tensor:
        z = self.bottleneck(x)
        h, w = z.shape[2:]
        branches = [T.bilinear_upsample(T.global_avg_pool(z), h, w)]
        branches += [T.avg_pool2d(z, k, 1, (k - 1) // 2) for k in self.pool_sizes]
        return T.concat_channels(branches)

    def pre_norm(self, x: Tensor) -> Tensor:
        return self.mix(self.group_fuse(self.views(x)))

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(self.pre_norm(x))


def pvf_forward(x: Tensor, params: PyramidViewFusion) -> Tensor:
    return params(x)


class DeformableBlock(Module):
    """Offset convolution (HardTanh-clipped) feeding a deformable dilated conv."""

    def __init__(self, cin: int, cout: int, dilation: int, rng, kernel: int = 3):
        self.weight = parameter(he_normal(rng, (cout, cin, kernel, kernel), cin * kernel * kernel))
        self.bias = parameter(np.zeros(cout))
        # zero offsets at start: the block begins as a plain dilated conv
        self.offset_weight = parameter(np.zeros((2 * kernel * kernel, cin, kernel, kernel)))
        self.dilation = dilation

    @property
    def spec(self) -> DeformableConvSpec:
        return DeformableConvSpec(self.weight, self.offset_weight, self.dilation, self.bias)

    def forward(self, x: Tensor, deformable: bool = True) -> Tensor:
        if not deformable:
            return T.conv2d(x, self.weight, self.bias, 1, self.dilation, self.dilation)
        return deformable_block(x, self.spec)


class DeformablePyramidReception(Module):
    """Static 3x3 branch plus deformable branches over the concatenated skip/decoder maps."""

    def __init__(self, c_skip: int, c_dec: int, cout: int, rng, dilations=(3, 6)):
        cin = c_skip + c_dec
        self.static = Conv2d(cin, cout, 3, rng)
        self.deform = [DeformableBlock(cin, cout, d, rng) for d in dilations]
        self.reduce = ConvBNReLU((1 + len(dilations)) * cout, cout, rng)
        self.refine = ConvBNReLU(cout, cout, rng)

    def forward(self, enc: Tensor, dec: Tensor, deformable: bool = True) -> Tensor:
        if enc.shape[2:] != dec.shape[2:]:
            raise DimensionError(f"skip {enc.shape} and decoder {dec.shape} maps differ in size")
        x = T.concat_channels([enc, dec])
        if not deformable:
            branches = [self.static(x)] + [blk(x, False) for blk in self.deform]
            return self.refine(self.reduce(T.concat_channels(branches)))
        # the static branch and every offset conv read the same 3x3 windows:
        # run them as one convolution and split the result
        cout = self.static.weight.shape[0]
        k = self.deform[0].offset_weight.shape[0]
        w = T.concat([self.static.weight] + [blk.offset_weight for blk in self.deform], axis=0)
        z = T.conv2d(x, w, None, 1, 1)
        static = T.add(T.narrow(z, 1, 0, cout), T.reshape(self.static.bias, (1, cout, 1, 1)))
        branches = [static]
        for i, blk in enumerate(self.deform):
            offsets = T.hardtanh(T.narrow(z, 1, cout + i * k, cout + (i + 1) * k))
            branches.append(deformable_conv2d(x, offsets, blk.weight, blk.bias, blk.dilation))
        return self.refine(self.reduce(T.concat_channels(branches)))


def dpr_forward(enc_feat: Tensor, dec_feat: Tensor, params: DeformablePyramidReception) -> Tensor:
    return params(enc_feat, dec_feat)


class DoubleConv(Module):
    """Baseline fusion: two conv-BN-ReLU layers over the concatenated maps."""

    def __init__(self, c_skip: int, c_dec: int, cout: int, rng):
        self.first = ConvBNReLU(c_skip + c_dec, cout, rng)
        self.second = ConvBNReLU(cout, cout, rng)

    def forward(self, enc: Tensor, dec: Tensor) -> Tensor:
        if enc.shape[2:] != dec.shape[2:]:
            raise DimensionError(f"skip {enc.shape} and decoder {dec.shape} maps differ in size")
        return self.second(self.first(T.concat_channels([enc, dec])))


class ASPPPlus(Module):
    """3x3 conv and two dilated 3x3 convs in parallel, fused by a 3x3 conv."""

    def __init__(self, c_skip: int, c_dec: int, cout: int, rng, dilations=(3, 6)):
        cin = c_skip + c_dec
        self.branches = [Conv2d(cin, cout, 3, rng)] + [Conv2d(cin, cout, 3, rng, dilation=d) for d in dilations]
        self.fuse = ConvBNReLU(len(self.branches) * cout, cout, rng)

    def forward(self, enc: Tensor, dec: Tensor) -> Tensor:
        if enc.shape[2:] != dec.shape[2:]:
            raise DimensionError(f"skip {enc.shape} and decoder {dec.shape} maps differ in size")
        x = T.concat_channels([enc, dec])
        return self.fuse(T.concat_channels([b(x) for b in self.branches]))


def aspp_plus_forward(enc: Tensor, dec: Tensor, params: ASPPPlus) -> Tensor:
    return params(enc, dec)


class PyramidPooling(Module):
    """PSPNet-style sub-region pooling at several bin counts, upsampled and fused."""

    def __init__(self, cin: int, rng, bins=(1, 3, 4, 6)):
        self.bins = tuple(bins)
        red = max(1, cin // len(self.bins))
        self.reduce = [ConvBNReLU(cin, red, rng, kernel=1) for _ in self.bins]
        self.fuse = ConvBNReLU(cin + red * len(self.bins), cin, rng)

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[2:]
        parts = [x]
        for b, conv in zip(self.bins, self.reduce):
            parts.append(T.bilinear_upsample(conv(T.adaptive_avg_pool2d(x, b)), h, w))
        return self.fuse(T.concat_channels(parts))


def ppm_forward(x: Tensor, params: PyramidPooling) -> Tensor:
    return params(x)


class PLHead(Module):
    """Pixel-wise convolution to class scores followed by softmax (sigmoid if binary)."""

    def __init__(self, cin: int, num_classes: int, rng, zero: bool = False):
        self.conv = Conv2d(cin, num_classes, 1, rng, zero=zero)
        self.num_classes = num_classes

    def forward(self, x: Tensor) -> Tensor:
        z = self.conv(x)
        return T.sigmoid(z) if self.num_classes == 1 else T.softmax_channels(z)


def pl_head(x: Tensor, params: PLHead) -> Tensor:
    return params(x)


class Encoder(Module):
    """VGG-style stages of conv-BN-ReLU with 2x2 max pooling between stages."""

    def __init__(self, cfg: ModelConfig, rng):
        self.stages = []
        cin = cfg.in_channels
        for width, reps in zip(cfg.widths, cfg.convs_per_stage):
            layers = []
            for _ in range(reps):
                layers.append(ConvBNReLU(cin, width, rng))
                cin = width
            self.stages.append(_Sequential(layers))

    def forward(self, image: Tensor) -> list:
        feats = []
        x = image
        for i, stage in enumerate(self.stages):
            if i:
                x = T.max_pool2d(x, 2, 2)
            x = stage(x)
            feats.append(x)
        return feats


def encoder_forward(image: Tensor, params: Encoder) -> list:
    return params(image)


class _Sequential(Module):
    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class DecoderStage(Module):
    def __init__(self, cfg: ModelConfig, c_dec: int, c_skip: int, rng):
        self.context = None
        if cfg.decoder_alternative == "ppm":
            self.context = PyramidPooling(c_dec, rng, cfg.ppm_bins)
        elif cfg.enable_pvf:
            self.context = PyramidViewFusion(c_dec, rng, cfg.pvf_pool_sizes, cfg.pvf_bottleneck)
        self.up = Upsample(c_dec, cfg.upsample_mode, rng)
        if cfg.decoder_alternative == "aspp_plus":
            self.fusion = ASPPPlus(c_skip, c_dec, c_skip, rng, cfg.dpr_dilations)
        elif cfg.enable_dpr:
            self.fusion = DeformablePyramidReception(c_skip, c_dec, c_skip, rng, cfg.dpr_dilations)
        else:
            self.fusion = DoubleConv(c_skip, c_dec, c_skip, rng)

    def forward(self, dec: Tensor, skip: Tensor) -> Tensor:
        if self.context is not None:
            dec = self.context(dec)
        dec = self.up(dec, skip.shape[2:])
        return self.fusion(skip, dec)


class DeepPyram(Module):
    """Encoder-decoder with skip connections; decoder stages run coarse to fine."""

    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        self.encoder = Encoder(cfg, rng)
        w = cfg.widths
        self.decoder = [DecoderStage(cfg, w[4 - d + 1], w[4 - d], rng) for d in range(1, 5)]
        self.head = PLHead(w[0], cfg.num_classes, rng)
        # auxiliary heads for the 1/2, 1/4 and 1/8 decoder outputs
        self.aux_heads = [PLHead(w[s], cfg.num_classes, rng) for s in (1, 2, 3)] if cfg.enable_pl else []

    def forward(self, image: Tensor) -> ModelOutput:
        if image.ndim != 4 or image.shape[1] != self.config.in_channels:
            raise DimensionError(f"expected (N, {self.config.in_channels}, H, W) input, got {image.shape}")
        h, w = image.shape[2:]
        if h % 16 or w % 16:
            raise DimensionError(f"input size {h}x{w} must be divisible by 16")
        feats = self.encoder(image)
        x = feats[4]
        dec_outs = []
        for d, stage in enumerate(self.decoder, start=1):
            x = stage(x, feats[4 - d])
            dec_outs.append(x)  # resolutions 1/8, 1/4, 1/2, 1
        scales = [self.head(dec_outs[3])]
        if self.aux_heads:
            # aux_heads[i] serves resolution 1/2**(i+1), i.e. dec_outs[2 - i]
            scales += [head(dec_outs[2 - i]) for i, head in enumerate(self.aux_heads)]
        return ModelOutput(scales)

    def predict(self, image: Tensor) -> Tensor:
        """Master-branch probabilities only."""
        return self.forward(image).master

    def layer_counts(self) -> dict:
        counts = {"conv": 0, "deformable": 0, "batch_norm": 0}
        for m in self.modules():
            if isinstance(m, Conv2d):
                counts["conv"] += 1
            elif isinstance(m, DeformableBlock):
                counts["deformable"] += 1
            elif isinstance(m, BatchNorm2d):
                counts["batch_norm"] += 1
        return counts


def deeppyram_forward(image: Tensor, config: ModelConfig, model: Optional[DeepPyram] = None) -> ModelOutput:
    return (model or DeepPyram(config))(image)


def count_parameters(config_or_model) -> int:
    model = config_or_model if isinstance(config_or_model, DeepPyram) else DeepPyram(config_or_model)
    return int(sum(p.size for p in model.parameters()))
