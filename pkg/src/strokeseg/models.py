"""Residual SUMNet-style segmenter and the three relativistic discriminators."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidConfig, ShapeError

VGG11_WIDTHS = (64, 128, 256, 256, 512, 512, 512, 512)
# convs per pooling stage in the VGG11 layout
_STAGE_CONVS = (1, 1, 2, 2, 2)
HEAD_CHANNELS = {"core": (2,), "pen": (1,), "pair": (1, 2)}


@dataclass
class SegmenterConfig:
    in_channels: int = 3
    num_classes: int = 3
    encoder_widths: tuple = VGG11_WIDTHS
    residual: bool = True
    batch_norm: bool = True

    def __post_init__(self):
        self.encoder_widths = tuple(int(w) for w in self.encoder_widths)
        if len(self.encoder_widths) != sum(_STAGE_CONVS):
            raise InvalidConfig(f"encoder_widths needs {sum(_STAGE_CONVS)} entries, "
                                f"got {len(self.encoder_widths)}")
        if any(w < 1 for w in self.encoder_widths) or self.in_channels < 1:
            raise InvalidConfig("channel counts must be positive")
        if self.num_classes != 3:
            raise InvalidConfig(f"num_classes must be 3, got {self.num_classes}")

    @property
    def stage_widths(self):
        """Per pooling stage, the list of conv output widths."""
        out, i = [], 0
        for n in _STAGE_CONVS:
            out.append(self.encoder_widths[i : i + n])
            i += n
        return out


@dataclass
class DiscriminatorConfig:
    in_channels: int = 4
    base_width: int = 64
    num_downsamples: int = 4

    def __post_init__(self):
        if self.in_channels < 1 or self.base_width < 1 or self.num_downsamples < 1:
            raise InvalidConfig(f"invalid discriminator config {self}")


def _init_weights(module):
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class ConvBNReLU(nn.Module):
    def __init__(self, cin, cout, batch_norm=True, residual=False):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1, bias=not batch_norm)
        self.bn = nn.BatchNorm2d(cout) if batch_norm else nn.Identity()
        if not residual:
            self.shortcut = None
        elif cin == cout:
            self.shortcut = nn.Identity()
        else:
            self.shortcut = nn.Conv2d(cin, cout, 1, bias=False)

    def forward(self, x):
        y = F.relu(self.bn(self.conv(x)))
        if self.shortcut is not None:
            y = y + self.shortcut(x)
        return y


class EncoderStage(nn.Module):
    def __init__(self, cin, widths, batch_norm, residual):
        super().__init__()
        for j, w in enumerate(widths, start=1):
            self.add_module(f"conv{j}", ConvBNReLU(cin, w, batch_norm, residual))
            cin = w

    def forward(self, x):
        for layer in self.children():
            x = layer(x)
        return x


class DecoderStage(nn.Module):
    def __init__(self, widths, batch_norm):
        super().__init__()
        for j, (cin, cout) in enumerate(zip(widths[:-1], widths[1:]), start=1):
            self.add_module(f"conv{j}", ConvBNReLU(cin, cout, batch_norm))

    def forward(self, x):
        for layer in self.children():
            x = layer(x)
        return x


class Encoder(nn.Module):
    def __init__(self, cfg: SegmenterConfig):
        super().__init__()
        cin = cfg.in_channels
        for i, widths in enumerate(cfg.stage_widths, start=1):
            self.add_module(f"block{i}", EncoderStage(cin, widths, cfg.batch_norm, cfg.residual))
            cin = widths[-1]


class Decoder(nn.Module):
    """Mirror of the encoder: unpool, concatenate the skip feature map, convolve.

    Stage i consumes ``2 * skip_width_i`` channels and narrows toward the width
    of stage i-1; the shallowest stage ends at half the first encoder width.
    """

    def __init__(self, cfg: SegmenterConfig):
        super().__init__()
        stages = cfg.stage_widths
        n = len(stages)
        for i in range(n, 0, -1):
            skip = stages[i - 1][-1]
            target = stages[i - 2][-1] if i > 1 else max(1, stages[0][-1] // 2)
            n_convs = len(stages[i - 1])
            widths = [2 * skip] + [skip] * (n_convs - 1) + [target]
            self.add_module(f"block{i}", DecoderStage(widths, cfg.batch_norm))
        self.out_width = max(1, stages[0][-1] // 2)


class Segmenter(nn.Module):
    def __init__(self, cfg: SegmenterConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.head = nn.Conv2d(self.decoder.out_width, cfg.num_classes, 1)
        self.n_stages = len(cfg.stage_widths)
        _init_weights(self)

    @property
    def divisor(self):
        return 2 ** self.n_stages

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"expected (B, {self.cfg.in_channels}, H, W), got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % self.divisor or w % self.divisor:
            raise ShapeError(f"spatial size {(h, w)} is not a multiple of {self.divisor}")
        skips, indices = [], []
        for i in range(1, self.n_stages + 1):
            x = getattr(self.encoder, f"block{i}")(x)
            skips.append(x)
            x, idx = F.max_pool2d(x, 2, 2, return_indices=True)
            indices.append(idx)
        for i in range(self.n_stages, 0, -1):
            x = F.max_unpool2d(x, indices[i - 1], 2, 2, output_size=skips[i - 1].shape[-2:])
            x = torch.cat([x, skips[i - 1]], dim=1)
            x = getattr(self.decoder, f"block{i}")(x)
        return self.head(x)


def build_segmenter(cfg: SegmenterConfig | None = None) -> Segmenter:
    return Segmenter(cfg or SegmenterConfig())


def forward_segmenter(model: Segmenter, x):
    if not torch.isfinite(x).all():
        raise ShapeError("non-finite input")
    return model(x)


class Discriminator(nn.Module):
    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.cfg = cfg
        layers = []
        cin, width = cfg.in_channels, cfg.base_width
        for i in range(cfg.num_downsamples):
            layers.append(nn.Conv2d(cin, width, 4, stride=2, padding=1, bias=(i == 0)))
            if i > 0:
                layers.append(nn.BatchNorm2d(width))
            layers.append(nn.LeakyReLU(0.2))
            cin, width = width, width * 2
        self.features = nn.Sequential(*layers)
        self.fc = nn.Linear(cin, 1)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_uniform_(m.weight, a=0.2, nonlinearity="leaky_relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"expected (B, {self.cfg.in_channels}, H, W), got {tuple(x.shape)}")
        f = self.features(x)
        return self.fc(f.mean(dim=(2, 3)))


def build_discriminator(cfg: DiscriminatorConfig | None = None) -> Discriminator:
    return Discriminator(cfg or DiscriminatorConfig())


def build_discriminators(in_channels=3, base_width=64, num_downsamples=4) -> nn.ModuleDict:
    return nn.ModuleDict({
        name: build_discriminator(DiscriminatorConfig(in_channels + len(chans), base_width,
                                                      num_downsamples))
        for name, chans in HEAD_CHANNELS.items()
    })


def discriminator_inputs(probs, labels_onehot, inputs):
    """Per head, the ``(real, fake)`` batches: image channels plus the head's class maps."""
    if not (probs.shape == labels_onehot.shape and probs.shape[0] == inputs.shape[0]
            and probs.shape[-2:] == inputs.shape[-2:] and probs.dim() == 4):
        raise ShapeError(f"incompatible shapes: probs {tuple(probs.shape)}, "
                         f"onehot {tuple(labels_onehot.shape)}, inputs {tuple(inputs.shape)}")
    pairs = {}
    for name, chans in HEAD_CHANNELS.items():
        sl = slice(chans[0], chans[-1] + 1)
        real = torch.cat([inputs, labels_onehot[:, sl]], dim=1)
        fake = torch.cat([inputs, probs[:, sl]], dim=1)
        pairs[name] = (real, fake)
    return pairs


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def unpool_roundtrip(x):
    """Pool with indices then unpool back to the input size."""
    pooled, idx = F.max_pool2d(x, 2, 2, return_indices=True)
    return pooled, idx, F.max_unpool2d(pooled, idx, 2, 2, output_size=x.shape[-2:])
