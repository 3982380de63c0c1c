"""Network architectures.

A generator is an attention module (lite U-Net emitting N softmax-normalized
spatial attention maps), a synthesis module (conv encoder + attention-modulated
residual decoder) and a one-convolution auxiliary segmentation head over the
attention maps. Discriminators are patch-based; the detached evaluator is a
standard 4-level U-Net. All forwards are differentiable w.r.t. inputs and
parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractError

INSTANCE_NORM_EPS = 1e-5
MAP_RENORM_EPS = 1e-8
LEAKY_SLOPE = 0.2


@dataclass
class GeneratorConfig:
    in_channels: int = 1
    out_channels: int = 1
    image_size: int = 64
    num_attention: int = 8
    encoder_channels: tuple[int, ...] = (32, 64, 128, 128)
    encoder_kernels: tuple[int, ...] = (7, 3, 3, 3)
    encoder_strides: tuple[int, ...] = (1, 2, 2, 1)
    encoder_paddings: tuple[int, ...] = (3, 1, 1, 1)
    decoder_in_channels: tuple[int, ...] = (128, 128, 64)
    decoder_out_channels: tuple[int, ...] = (128, 64, 32)
    tail_channels: int = 16
    sasan_hidden: int = 128

    def validate(self):
        if self.image_size % 4 != 0:
            raise ContractError(f"image size {self.image_size} not divisible by 4")
        if self.num_attention < 2:
            raise ContractError("need at least 2 attention maps")

    @property
    def attention_resolutions(self) -> tuple[int, int, int]:
        s = self.image_size
        return (s // 4, s // 2, s)


@dataclass
class DiscriminatorConfig:
    in_channels: int = 1
    channels: tuple[int, ...] = (32, 64, 128)
    kernel: int = 4
    leaky_slope: float = LEAKY_SLOPE

    @classmethod
    def for_segmentation(cls, num_classes: int) -> "DiscriminatorConfig":
        # middle widths 32 instead of 64/128
        return cls(in_channels=num_classes, channels=(32, 32, 32))


@dataclass
class UNetConfig:
    in_channels: int = 1
    num_classes: int = 4
    base_channels: int = 32
    depth: int = 4


def init_gan_weights(module: nn.Module):
    """Zero-mean normal(0, 0.02) conv init used by this family of models."""
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.normal_(m.weight, 0.0, 0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class ConvBlock(nn.Module):
    """Reflection pad -> conv -> ReLU."""

    def __init__(self, in_ch, out_ch, kernel, stride=1, padding=0):
        super().__init__()
        self.pad = nn.ReflectionPad2d(padding)
        self.conv = nn.Conv2d(in_ch, out_ch, kernel, stride=stride)

    def forward(self, x):
        return F.relu(self.conv(self.pad(x)))


# ---------------------------------------------------------------------------
# attention-conditioned normalization

class SasanNorm(nn.Module):
    """Instance normalization whose affine parameters are spatial tensors
    convolved from the attention maps: gamma(m) * (x - mu) / sqrt(var + eps) + beta(m)."""

    def __init__(self, feature_channels, attn_channels, hidden=128, eps=INSTANCE_NORM_EPS):
        super().__init__()
        if eps <= 0:
            raise ContractError("instance-norm epsilon must be positive")
        self.eps = eps
        self.embed = nn.Conv2d(attn_channels, hidden, 3, padding=1)
        self.gamma = nn.Conv2d(hidden, feature_channels, 3, padding=1)
        self.beta = nn.Conv2d(hidden, feature_channels, 3, padding=1)

    def forward(self, x, maps):
        if x.shape[-2:] != maps.shape[-2:]:
            raise ContractError(
                f"attention maps {tuple(maps.shape)} do not spatially match features {tuple(x.shape)}"
            )
        if x.shape[0] != maps.shape[0]:
            raise ContractError("batch size mismatch between features and attention maps")
        mu = x.mean(dim=(2, 3), keepdim=True)
        var = x.var(dim=(2, 3), keepdim=True, unbiased=False)
        normed = (x - mu) / torch.sqrt(var + self.eps)
        h = F.relu(self.embed(maps))
        return self.gamma(h) * normed + self.beta(h)


def resize_maps(maps: torch.Tensor, target: tuple[int, int] | int) -> torch.Tensor:
    """Bilinear resampling of an attention stack followed by per-pixel
    renormalization back onto the simplex."""
    if isinstance(target, int):
        target = (target, target)
    if tuple(maps.shape[-2:]) == tuple(target):
        return maps
    out = F.interpolate(maps, size=target, mode="bilinear", align_corners=False)
    return out / out.sum(dim=1, keepdim=True).clamp_min(MAP_RENORM_EPS)


class SpadeResBlock(nn.Module):
    """Residual decoder block, both paths modulated by the attention maps."""

    def __init__(self, in_ch, out_ch, attn_channels, hidden=128):
        super().__init__()
        self.norm1 = SasanNorm(in_ch, attn_channels, hidden)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm2 = SasanNorm(out_ch, attn_channels, hidden)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        if in_ch != out_ch:
            self.norm_skip = SasanNorm(in_ch, attn_channels, hidden)
            self.conv_skip = nn.Conv2d(in_ch, out_ch, 1)
        else:
            self.norm_skip = None
            self.conv_skip = None

    def forward(self, x, maps):
        h = self.conv1(F.leaky_relu(self.norm1(x, maps), LEAKY_SLOPE))
        h = self.conv2(F.leaky_relu(self.norm2(h, maps), LEAKY_SLOPE))
        if self.conv_skip is not None:
            skip = self.conv_skip(self.norm_skip(x, maps))
        else:
            skip = x
        return h + skip


# ---------------------------------------------------------------------------
# attention module (lite U-Net, depth 3)

class _DoubleConvIN(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            nn.InstanceNorm2d(out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            nn.InstanceNorm2d(out_ch),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class AttentionModule(nn.Module):
    """Maps an image to N spatial attention maps on the per-pixel simplex."""

    DEPTH = 3
    CHANNELS = (16, 32, 64)

    def __init__(self, in_channels=1, num_attention=8):
        super().__init__()
        c1, c2, c3 = self.CHANNELS
        self.num_attention = num_attention
        self.stem = _DoubleConvIN(in_channels, c1)
        self.down1 = _DoubleConvIN(c1, c2)
        self.down2 = _DoubleConvIN(c2, c3)
        self.down3 = _DoubleConvIN(c3, c3)
        self.up1 = _DoubleConvIN(c3 + c3, c2)
        self.up2 = _DoubleConvIN(c2 + c2, c1)
        self.up3 = _DoubleConvIN(c1 + c1, c1)
        self.head = nn.Conv2d(c1, num_attention, 1)
        # start from uniform maps
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, image):
        side = image.shape[-1]
        if image.shape[-2] != side or side % (2**self.DEPTH) != 0:
            raise ContractError(
                f"attention module needs a square side divisible by {2**self.DEPTH}, got {tuple(image.shape[-2:])}"
            )
        e0 = self.stem(image)
        e1 = self.down1(F.max_pool2d(e0, 2))
        e2 = self.down2(F.max_pool2d(e1, 2))
        e3 = self.down3(F.max_pool2d(e2, 2))
        d1 = self.up1(torch.cat([_up2(e3), e2], dim=1))
        d2 = self.up2(torch.cat([_up2(d1), e1], dim=1))
        d3 = self.up3(torch.cat([_up2(d2), e0], dim=1))
        return torch.softmax(self.head(d3), dim=1)


def _up2(x):
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


class AuxClassifier(nn.Module):
    """One 1x1 convolution from attention maps to per-pixel class probabilities."""

    def __init__(self, num_attention, num_classes):
        super().__init__()
        self.conv = nn.Conv2d(num_attention, num_classes, 1)

    def forward(self, maps):
        return torch.softmax(self.conv(maps), dim=1)


# ---------------------------------------------------------------------------
# synthesis module

class SynthesisModule(nn.Module):
    """Conv encoder followed by three attention-modulated residual blocks with
    two bilinear x2 upsamples, two tail convs and tanh."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        enc = []
        in_ch = cfg.in_channels
        for ch, k, s, p in zip(
            cfg.encoder_channels, cfg.encoder_kernels, cfg.encoder_strides, cfg.encoder_paddings
        ):
            enc.append(ConvBlock(in_ch, ch, k, stride=s, padding=p))
            in_ch = ch
        self.encoder = nn.Sequential(*enc)
        blocks = []
        for bin_ch, bout_ch in zip(cfg.decoder_in_channels, cfg.decoder_out_channels):
            blocks.append(SpadeResBlock(bin_ch, bout_ch, cfg.num_attention, cfg.sasan_hidden))
        self.blocks = nn.ModuleList(blocks)
        self.tail = ConvBlock(cfg.decoder_out_channels[-1], cfg.tail_channels, 3, padding=1)
        self.out_pad = nn.ReflectionPad2d(1)
        self.out_conv = nn.Conv2d(cfg.tail_channels, cfg.out_channels, 3)

    def encode(self, image):
        return self.encoder(image)

    def forward(self, image, maps):
        side = image.shape[-1]
        if image.shape[-2] != side or side % 4 != 0:
            raise ContractError(f"generator needs a square side divisible by 4, got {tuple(image.shape[-2:])}")
        h = self.encoder(image)
        for i, block in enumerate(self.blocks):
            h = block(h, resize_maps(maps, h.shape[-2:]))
            if i < len(self.blocks) - 1:
                h = _up2(h)
        h = self.tail(h)
        return torch.tanh(self.out_conv(self.out_pad(h)))


class Generator(nn.Module):
    """Attention module + synthesis module + auxiliary classifier."""

    def __init__(self, cfg: GeneratorConfig, num_classes: int):
        super().__init__()
        self.cfg = cfg
        self.attention = AttentionModule(cfg.in_channels, cfg.num_attention)
        self.synthesis = SynthesisModule(cfg)
        self.aux = AuxClassifier(cfg.num_attention, num_classes)
        init_gan_weights(self.synthesis)
        init_gan_weights(self.attention)
        init_gan_weights(self.aux)
        # re-zero the attention head after the global GAN init
        nn.init.zeros_(self.attention.head.weight)
        nn.init.zeros_(self.attention.head.bias)
        # start gamma near 1 so the modulation is initially a passthrough
        for m in self.synthesis.modules():
            if isinstance(m, SasanNorm):
                nn.init.ones_(m.gamma.bias)

    def forward(self, image, maps=None):
        if maps is None:
            maps = self.attention(image)
        return self.synthesis(image, maps), maps


# ---------------------------------------------------------------------------
# discriminators

class PatchDiscriminator(nn.Module):
    """Patch-based least-squares discriminator emitting a raw score grid."""

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        c1, c2, c3 = cfg.channels
        k = cfg.kernel
        self.net = nn.Sequential(
            nn.Conv2d(cfg.in_channels, c1, k, stride=2, padding=1),
            nn.LeakyReLU(cfg.leaky_slope, inplace=True),
            nn.Conv2d(c1, c2, k, stride=2, padding=1),
            nn.InstanceNorm2d(c2),
            nn.LeakyReLU(cfg.leaky_slope, inplace=True),
            nn.Conv2d(c2, c3, k, stride=2, padding=1),
            nn.InstanceNorm2d(c3),
            nn.LeakyReLU(cfg.leaky_slope, inplace=True),
            nn.Conv2d(c3, 1, k, stride=1, padding=1),
        )
        init_gan_weights(self)

    def forward(self, x):
        return self.net(x)


# ---------------------------------------------------------------------------
# detached evaluator U-Net

class _DoubleConvBN(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class UNet(nn.Module):
    """4-down / 4-up segmentation U-Net (maxpool down, bilinear x2 up)."""

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.base_channels
        chans = [c * (2**i) for i in range(cfg.depth + 1)]  # e.g. 32..512
        self.inc = _DoubleConvBN(cfg.in_channels, chans[0])
        self.downs = nn.ModuleList(
            [_DoubleConvBN(chans[i], chans[i + 1]) for i in range(cfg.depth)]
        )
        self.ups = nn.ModuleList(
            [_DoubleConvBN(chans[i + 1] + chans[i], chans[i]) for i in reversed(range(cfg.depth))]
        )
        self.outc = nn.Conv2d(chans[0], cfg.num_classes, 1)

    def logits(self, image):
        side = image.shape[-1]
        if image.shape[-2] != side or side % (2**self.cfg.depth) != 0:
            raise ContractError(
                f"evaluator needs a square side divisible by {2**self.cfg.depth}, got {tuple(image.shape[-2:])}"
            )
        feats = [self.inc(image)]
        for down in self.downs:
            feats.append(down(F.max_pool2d(feats[-1], 2)))
        h = feats[-1]
        for i, up in enumerate(self.ups):
            skip = feats[-2 - i]
            h = up(torch.cat([_up2(h), skip], dim=1))
        return self.outc(h)

    def forward(self, image):
        return torch.softmax(self.logits(image), dim=1)


# ---------------------------------------------------------------------------
# model bundle

@dataclass
class ModelBundle:
    """The trainable networks of one adaptation run plus the detached evaluator.

    ``gen_ab`` translates domain A images to B (its attention module and aux
    head act on A-side inputs); ``gen_ba`` the reverse.
    """

    gen_ab: Generator
    gen_ba: Generator
    disc_a: PatchDiscriminator
    disc_b: PatchDiscriminator
    disc_seg: PatchDiscriminator
    num_classes: int
    evaluator: UNet | None = None

    def generator_parameters(self):
        for gen in (self.gen_ab, self.gen_ba):
            yield from gen.parameters()

    def discriminator_parameters(self, include_seg=True):
        yield from self.disc_a.parameters()
        yield from self.disc_b.parameters()
        if include_seg:
            yield from self.disc_seg.parameters()

    def adaptation_modules(self) -> dict[str, nn.Module]:
        return {
            "gen_ab": self.gen_ab,
            "gen_ba": self.gen_ba,
            "disc_a": self.disc_a,
            "disc_b": self.disc_b,
            "disc_seg": self.disc_seg,
        }

    def train_mode(self):
        for m in self.adaptation_modules().values():
            m.train()

    def eval_mode(self):
        for m in self.adaptation_modules().values():
            m.eval()


def build_models(
    image_size: int = 64,
    num_attention: int = 8,
    num_classes: int = 4,
    in_channels: int = 1,
    with_evaluator: bool = False,
    seed: int | None = None,
) -> ModelBundle:
    if seed is not None:
        torch.manual_seed(seed)
    gcfg = GeneratorConfig(
        in_channels=in_channels,
        out_channels=in_channels,
        image_size=image_size,
        num_attention=num_attention,
    )
    bundle = ModelBundle(
        gen_ab=Generator(gcfg, num_classes),
        gen_ba=Generator(gcfg, num_classes),
        disc_a=PatchDiscriminator(DiscriminatorConfig(in_channels=in_channels)),
        disc_b=PatchDiscriminator(DiscriminatorConfig(in_channels=in_channels)),
        disc_seg=PatchDiscriminator(DiscriminatorConfig.for_segmentation(num_classes)),
        num_classes=num_classes,
        evaluator=UNet(UNetConfig(in_channels=in_channels, num_classes=num_classes))
        if with_evaluator
        else None,
    )
    return bundle
