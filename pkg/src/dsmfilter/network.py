"""Shared atrous ResNet encoder, interchangeable decoders, conditional PatchGAN.

Channel widths are quoted at width multiplier 1.0; every width is scaled by
``ModelSpec.width`` (rounded, at least 1) for desk-scale models.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

OBJECTIVES = ("l1", "normal", "gan", "seg")
DECODERS = ("unet", "deeplab", "pspnet")
DEPTHS = {50: (3, 4, 6, 3), 101: (3, 4, 23, 3), 152: (3, 8, 36, 3)}

# taps consumed by the UNet decoder, deepest first
UNET_TAPS = ("layer3", "layer2", "layer1", "stem", "input")


class ModelSpecError(ValueError):
    pass


@dataclass
class ModelSpec:
    depth: int = 101
    width: float = 1.0
    output_stride: int = 8
    dsm_decoder: str = "unet"
    seg_decoder: str | None = "deeplab"
    active_objectives: tuple[str, ...] = ("l1", "normal", "gan", "seg")
    seg_classes: int = 3
    residual: bool = True
    discriminator_width: float | None = None  # defaults to ``width``

    def __post_init__(self):
        unknown = set(self.active_objectives) - set(OBJECTIVES)
        if unknown:
            raise ModelSpecError(f"unknown objectives {sorted(unknown)}")
        self.active_objectives = tuple(o for o in OBJECTIVES if o in set(self.active_objectives))
        self.validate()

    def validate(self):
        unknown = set(self.active_objectives) - set(OBJECTIVES)
        if unknown:
            raise ModelSpecError(f"unknown objectives {sorted(unknown)}")
        if "l1" not in self.active_objectives:
            raise ModelSpecError("the l1 objective must always be active")
        if ("seg" in self.active_objectives) != (self.seg_decoder is not None):
            raise ModelSpecError("seg objective must be active exactly when a seg decoder is configured")
        if self.output_stride not in (8, 16):
            raise ModelSpecError(f"output_stride must be 8 or 16, got {self.output_stride}")
        if self.depth not in DEPTHS:
            raise ModelSpecError(f"unsupported encoder depth {self.depth}; choose from {sorted(DEPTHS)}")
        for d in (self.dsm_decoder, self.seg_decoder):
            if d is not None and d not in DECODERS:
                raise ModelSpecError(f"unknown decoder {d!r}")
        if self.width <= 0:
            raise ModelSpecError("width multiplier must be positive")

    @property
    def uses_gan(self) -> bool:
        return "gan" in self.active_objectives

    def to_dict(self) -> dict:
        d = asdict(self)
        d["active_objectives"] = list(self.active_objectives)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelSpec:
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ModelSpecError(f"unknown model fields: {sorted(unknown)}")
        d["active_objectives"] = tuple(d.get("active_objectives", OBJECTIVES))
        return cls(**d)


def scaled(channels: int, width: float) -> int:
    return max(1, int(round(channels * width)))


def count_parameters(module: nn.Module) -> int:
    """Number of learnable scalars."""
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def conv_bn_relu(cin, cout, k=3, dilation=1, stride=1):
    pad = dilation * (k - 1) // 2
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, stride=stride, padding=pad, dilation=dilation, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


def init_weights(module: nn.Module):
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


# ---------------------------------------------------------------------------
# Encoder
# ---------------------------------------------------------------------------


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, cin, mid, stride=1, dilation=1):
        super().__init__()
        cout = mid * self.expansion
        self.conv1 = nn.Conv2d(cin, mid, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(mid)
        self.conv2 = nn.Conv2d(mid, mid, 3, stride=stride, padding=dilation, dilation=dilation, bias=False)
        self.bn2 = nn.BatchNorm2d(mid)
        self.conv3 = nn.Conv2d(mid, cout, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(cout)
        self.relu = nn.ReLU(inplace=True)
        self.downsample = None
        if stride != 1 or cin != cout:
            self.downsample = nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return self.relu(out + identity)


class ResNetEncoder(nn.Module):
    """ResNet with the last down-sampling stages replaced by dilation.

    Output stride 8 runs layer3/layer4 at dilation 2/4; stride 16 keeps the
    layer3 down-sampling and runs layer4 at dilation 2. ``forward`` returns a
    dict of features: ``input`` (stride 1), ``stem`` (2), ``layer1`` (4),
    ``layer2`` (8), ``layer3`` and ``out`` (output stride).
    """

    def __init__(self, depth: int = 101, width: float = 1.0, output_stride: int = 8, in_channels: int = 1):
        super().__init__()
        blocks = DEPTHS[depth]
        self.output_stride = output_stride
        stem_c = scaled(64, width)
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, stem_c, 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(stem_c),
            nn.ReLU(inplace=True),
        )
        self.pool = nn.MaxPool2d(3, stride=2, padding=1)
        mids = [scaled(c, width) for c in (64, 128, 256, 512)]
        if output_stride == 8:
            strides, dilations = (1, 2, 1, 1), (1, 1, 2, 4)
        else:
            strides, dilations = (1, 2, 2, 1), (1, 1, 1, 2)
        cin = stem_c
        layers = []
        for n, mid, s, d in zip(blocks, mids, strides, dilations):
            # first block of a dilated stage uses half the dilation, as in DeepLab
            first_d = max(1, d // 2)
            stage = [Bottleneck(cin, mid, stride=s, dilation=first_d)]
            cin = mid * Bottleneck.expansion
            stage += [Bottleneck(cin, mid, dilation=d) for _ in range(n - 1)]
            layers.append(nn.Sequential(*stage))
        self.layer1, self.layer2, self.layer3, self.layer4 = layers
        self.channels = {
            "input": in_channels,
            "stem": stem_c,
            "layer1": mids[0] * 4,
            "layer2": mids[1] * 4,
            "layer3": mids[2] * 4,
            "out": mids[3] * 4,
        }
        self.strides = {"input": 1, "stem": 2, "layer1": 4, "layer2": 8,
                        "layer3": 8 if output_stride == 8 else 16, "out": output_stride}
        init_weights(self)

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % self.output_stride or w % self.output_stride:
            raise ValueError(f"input {h}x{w} is not divisible by output stride {self.output_stride}")
        feats = {"input": x}
        x = self.stem(x)
        feats["stem"] = x
        x = self.layer1(self.pool(x))
        feats["layer1"] = x
        x = self.layer2(x)
        feats["layer2"] = x
        x = self.layer3(x)
        feats["layer3"] = x
        feats["out"] = self.layer4(x)
        return feats


def build_encoder(spec: ModelSpec) -> ResNetEncoder:
    return ResNetEncoder(spec.depth, spec.width, spec.output_stride)


# ---------------------------------------------------------------------------
# Decoders
# ---------------------------------------------------------------------------


class UNetDecoder(nn.Module):
    """Bottleneck block followed by one block per skip tap (deepest first).

    A tap at the current resolution gets a skip block (plain 3x3 conv entry);
    a finer tap gets an up-sampling block (2x2 transposed conv entry). With the
    stride-8 encoder this yields two skip blocks and three up-sampling blocks.
    """

    def __init__(self, in_channels: int, out_channels: int, taps: dict[str, tuple[int, int]], width: float,
                 bottleneck_stride: int):
        super().__init__()
        missing = [t for t in UNET_TAPS if t not in taps]
        if missing:
            raise ValueError(f"unet decoder needs 5 skip taps, missing {missing}")
        c = in_channels
        self.bottleneck = nn.Sequential(conv_bn_relu(c, c), conv_bn_relu(c, c))
        self.tap_names = list(UNET_TAPS)
        self.entries = nn.ModuleList()
        self.fuses = nn.ModuleList()
        stride = bottleneck_stride
        for name, full_out in zip(UNET_TAPS, (1024, 512, 256, 128, 64)):
            tap_c, tap_stride = taps[name]
            out = scaled(full_out, width)
            if tap_stride == stride:
                entry = conv_bn_relu(c, out)
            elif tap_stride * 2 == stride:
                entry = nn.Sequential(nn.ConvTranspose2d(c, out, 2, stride=2, bias=False), nn.BatchNorm2d(out), nn.ReLU(inplace=True))
            else:
                raise ValueError(f"tap {name} at stride {tap_stride} cannot follow stride {stride}")
            self.entries.append(entry)
            self.fuses.append(nn.Sequential(conv_bn_relu(out + tap_c, out), conv_bn_relu(out, out)))
            c, stride = out, tap_stride
        if stride != 1:
            raise ValueError("unet taps must reach full resolution")
        self.head = nn.Conv2d(c, out_channels, 1)
        init_weights(self)

    def forward(self, feats, size):
        x = self.bottleneck(feats["out"])
        for name, entry, fuse in zip(self.tap_names, self.entries, self.fuses):
            x = entry(x)
            skip = feats[name]
            if x.shape[-2:] != skip.shape[-2:]:
                x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            x = fuse(torch.cat([x, skip], dim=1))
        return self.head(x)


class ASPP(nn.Module):
    def __init__(self, cin, cout, rates):
        super().__init__()
        self.branches = nn.ModuleList([conv_bn_relu(cin, cout, k=1)] + [conv_bn_relu(cin, cout, dilation=r) for r in rates])
        # no batch norm on the pooled branch: a 1x1 map cannot be normalized at batch size 1
        self.pool_branch = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Conv2d(cin, cout, 1), nn.ReLU(inplace=True))
        self.project = conv_bn_relu(cout * (len(rates) + 2), cout, k=1)

    def forward(self, x):
        outs = [b(x) for b in self.branches]
        outs.append(self.pool_branch(x).expand(-1, -1, *x.shape[-2:]))
        return self.project(torch.cat(outs, dim=1))


class DeepLabDecoder(nn.Module):
    """Atrous spatial pyramid pooling plus one low-level skip (``layer1``)."""

    def __init__(self, in_channels, out_channels, taps, width, output_stride):
        super().__init__()
        if "layer1" not in taps:
            raise ValueError("deeplab decoder needs the layer1 skip tap")
        rates = (12, 24, 36) if output_stride == 8 else (6, 12, 18)
        c = scaled(256, width)
        self.aspp = ASPP(in_channels, c, rates)
        low_c = scaled(48, width)
        self.low = conv_bn_relu(taps["layer1"][0], low_c, k=1)
        self.fuse = nn.Sequential(conv_bn_relu(c + low_c, c), conv_bn_relu(c, c))
        self.head = nn.Conv2d(c, out_channels, 1)
        init_weights(self)

    def forward(self, feats, size):
        x = self.aspp(feats["out"])
        low = self.low(feats["layer1"])
        x = F.interpolate(x, size=low.shape[-2:], mode="bilinear", align_corners=False)
        x = self.fuse(torch.cat([x, low], dim=1))
        x = self.head(x)
        return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class PSPDecoder(nn.Module):
    """Pyramid pooling over bins (1, 2, 3, 6); uses no skip taps."""

    def __init__(self, in_channels, out_channels, width, bins=(1, 2, 3, 6), dropout=0.1):
        super().__init__()
        c = scaled(512, width)
        self.stages = nn.ModuleList(
            nn.Sequential(nn.AdaptiveAvgPool2d(b), nn.Conv2d(in_channels, c, 1), nn.ReLU(inplace=True)) for b in bins
        )
        self.bottleneck = conv_bn_relu(in_channels + len(bins) * c, c)
        self.dropout = nn.Dropout2d(dropout)
        self.head = nn.Conv2d(c, out_channels, 1)
        init_weights(self)

    def forward(self, feats, size):
        x = feats["out"]
        pyramid = [x] + [F.interpolate(s(x), size=x.shape[-2:], mode="bilinear", align_corners=False) for s in self.stages]
        x = self.dropout(self.bottleneck(torch.cat(pyramid, dim=1)))
        x = self.head(x)
        return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def build_decoder(kind: str, out_channels: int, taps: dict[str, tuple[int, int]] | None, in_channels: int = 2048,
                  width: float = 1.0, output_stride: int = 8) -> nn.Module:
    """Construct a decoder.

    ``taps`` maps skip names to ``(channels, stride)``; pass the encoder's
    :func:`encoder_taps`. ``pspnet`` accepts ``None``/empty taps.
    """
    taps = taps or {}
    if kind == "unet":
        return UNetDecoder(in_channels, out_channels, taps, width, output_stride)
    if kind == "deeplab":
        return DeepLabDecoder(in_channels, out_channels, taps, width, output_stride)
    if kind == "pspnet":
        return PSPDecoder(in_channels, out_channels, width)
    raise ValueError(f"unknown decoder {kind!r}")


def encoder_taps(encoder: ResNetEncoder) -> dict[str, tuple[int, int]]:
    return {k: (encoder.channels[k], encoder.strides[k]) for k in encoder.channels if k != "out"}


# ---------------------------------------------------------------------------
# Discriminator
# ---------------------------------------------------------------------------


class PatchDiscriminator(nn.Module):
    """Conditional PatchGAN scoring (stereo, candidate) pairs patch-wise."""

    # (kernel, stride) of the convolution stack, used by receptive_field()
    LAYERS = ((4, 2), (4, 2), (4, 2), (4, 1), (4, 1))

    def __init__(self, width: float = 1.0, in_channels: int = 2):
        super().__init__()
        chans = [in_channels] + [scaled(c, width) for c in (64, 128, 256, 512)]
        layers = []
        for i, ((k, s), cin, cout) in enumerate(zip(self.LAYERS[:-1], chans[:-1], chans[1:])):
            layers.append(nn.Conv2d(cin, cout, k, stride=s, padding=1, bias=(i == 0)))
            if i > 0:
                layers.append(nn.BatchNorm2d(cout))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
        k, s = self.LAYERS[-1]
        layers.append(nn.Conv2d(chans[-1], 1, k, stride=s, padding=1))
        self.net = nn.Sequential(*layers)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.normal_(m.weight, 0.0, 0.02)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)

    def forward(self, condition, candidate):
        return self.net(torch.cat([condition, candidate], dim=1))

    @classmethod
    def receptive_field(cls) -> int:
        rf = 1
        for k, s in reversed(cls.LAYERS):
            rf = (rf - 1) * s + k
        return rf


def build_discriminator(width: float = 1.0) -> PatchDiscriminator:
    return PatchDiscriminator(width)


# ---------------------------------------------------------------------------
# Generator bundle
# ---------------------------------------------------------------------------


class Generator(nn.Module):
    """Shared encoder feeding a DSM head and an optional segmentation head."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        self.encoder = build_encoder(spec)
        taps = encoder_taps(self.encoder)
        cin = self.encoder.channels["out"]
        self.dsm_head = build_decoder(spec.dsm_decoder, 1, taps, cin, spec.width, spec.output_stride)
        if spec.residual:
            # the untrained model starts as the identity on its input
            last = self.dsm_head.head
            nn.init.zeros_(last.weight)
            nn.init.zeros_(last.bias)
        self.seg_head = None
        if spec.seg_decoder is not None:
            self.seg_head = build_decoder(spec.seg_decoder, spec.seg_classes, taps, cin, spec.width, spec.output_stride)
            if spec.residual:
                # uniform class probabilities at start, so neither head dominates the shared encoder early on
                nn.init.zeros_(self.seg_head.head.weight)
                nn.init.zeros_(self.seg_head.head.bias)

    def forward(self, x):
        feats = self.encoder(x)
        size = x.shape[-2:]
        dsm = self.dsm_head(feats, size)
        if self.spec.residual:
            dsm = dsm + x
        seg = self.seg_head(feats, size) if self.seg_head is not None else None
        return dsm, seg


@dataclass
class NetworkBundle:
    generator: Generator
    discriminator: PatchDiscriminator | None = None
    parameter_counts: dict = field(default_factory=dict)

    @property
    def encoder(self):
        return self.generator.encoder

    @property
    def dsm_head(self):
        return self.generator.dsm_head

    @property
    def seg_head(self):
        return self.generator.seg_head


def build_bundle(spec: ModelSpec) -> NetworkBundle:
    gen = Generator(spec)
    disc = None
    if spec.uses_gan:
        disc = build_discriminator(spec.discriminator_width or spec.width)
    counts = {"encoder": count_parameters(gen.encoder), "dsm_head": count_parameters(gen.dsm_head)}
    if gen.seg_head is not None:
        counts["seg_head"] = count_parameters(gen.seg_head)
    if disc is not None:
        counts["discriminator"] = count_parameters(disc)
    return NetworkBundle(gen, disc, counts)


def forward_generator(bundle: NetworkBundle | Generator, x: torch.Tensor):
    """``(dsm, seg_logits or None)`` for an ``(N, 1, H, W)`` batch."""
    gen = bundle.generator if isinstance(bundle, NetworkBundle) else bundle
    if x.ndim != 4 or x.shape[1] != 1:
        raise ValueError(f"expected an (N, 1, H, W) input, got {tuple(x.shape)}")
    return gen(x)
