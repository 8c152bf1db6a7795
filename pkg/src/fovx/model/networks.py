"""Slab-to-slice ResNet generator and patch discriminator."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ValidationError


@dataclass
class GeneratorConfig:
    n: int = 7
    base_width: int = 64
    n_res_blocks: int = 9
    n_downsampling: int = 2
    outer_kernel: int = 7
    out_channels: int = 1

    @property
    def in_channels(self) -> int:
        return 2 * (2 * self.n + 1)

    def validate(self):
        if self.n < 1:
            raise ValidationError(f"n must be >= 1, got {self.n}")
        if self.n_res_blocks < 1:
            raise ValidationError("n_res_blocks must be >= 1")
        if self.base_width < 1 or self.n_downsampling < 0:
            raise ValidationError("base_width must be >= 1 and n_downsampling >= 0")
        if self.outer_kernel < 1 or self.outer_kernel % 2 == 0:
            raise ValidationError("outer_kernel must be odd")
        if self.out_channels != 1:
            raise ValidationError("generators predict a single slice")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def desk(cls, **kw) -> "GeneratorConfig":
        """Small configuration used for 64^3 CPU runs."""
        base = dict(n=7, base_width=16, n_res_blocks=3)
        base.update(kw)
        return cls(**base)


@dataclass
class DiscriminatorConfig:
    base_width: int = 64
    n_layers: int = 3
    conditional_on_input: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


class ResnetBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(width, width, 3), nn.InstanceNorm2d(width), nn.ReLU(True),
            nn.ReflectionPad2d(1), nn.Conv2d(width, width, 3), nn.InstanceNorm2d(width),
        )

    def forward(self, x):
        return x + self.body(x)


class ResnetGenerator(nn.Module):
    """Encoder / residual blocks / decoder, sigmoid output in [0, 1].

    Input ``(B, 2(2n+1), H, W)``; output ``(B, 1, H, W)``.  Inputs whose
    sides are not multiples of ``2**n_downsampling`` are edge-padded and the
    output cropped back.
    """

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        config.validate()
        self.config = config
        w, k = config.base_width, config.outer_kernel
        layers = [nn.ReflectionPad2d(k // 2), nn.Conv2d(config.in_channels, w, k),
                  nn.InstanceNorm2d(w), nn.ReLU(True)]
        for i in range(config.n_downsampling):
            c = w * 2 ** i
            layers += [nn.Conv2d(c, 2 * c, 3, stride=2, padding=1), nn.InstanceNorm2d(2 * c), nn.ReLU(True)]
        c = w * 2 ** config.n_downsampling
        layers += [ResnetBlock(c) for _ in range(config.n_res_blocks)]
        for i in range(config.n_downsampling):
            layers += [nn.ConvTranspose2d(c, c // 2, 3, stride=2, padding=1, output_padding=1),
                       nn.InstanceNorm2d(c // 2), nn.ReLU(True)]
            c //= 2
        layers += [nn.ReflectionPad2d(k // 2), nn.Conv2d(c, config.out_channels, k), nn.Sigmoid()]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ValidationError(
                f"expected (B, {self.config.in_channels}, H, W) slabs, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        mult = 2 ** self.config.n_downsampling
        ph, pw = (-h) % mult, (-w) % mult
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph), mode="replicate")
        return self.net(x)[..., :h, :w]


class PatchDiscriminator(nn.Module):
    """Fully convolutional classifier emitting a grid of patch logits."""

    def __init__(self, config: DiscriminatorConfig, in_channels: int = 1):
        super().__init__()
        self.config = config
        w = config.base_width
        layers = [nn.Conv2d(in_channels, w, 4, stride=2, padding=1), nn.LeakyReLU(0.2, True)]
        c = w
        for i in range(1, config.n_layers):
            stride = 2 if i < config.n_layers - 1 else 1
            nxt = min(c * 2, w * 8)
            layers += [nn.Conv2d(c, nxt, 4, stride=stride, padding=1), nn.InstanceNorm2d(nxt),
                       nn.LeakyReLU(0.2, True)]
            c = nxt
        layers += [nn.Conv2d(c, 1, 4, stride=1, padding=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class TinyGenerator(nn.Module):
    """Two-convolution generator used for gradient checks."""

    def __init__(self, in_channels: int, hidden: int = 4):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, 1, 3, padding=1)

    def forward(self, x):
        return torch.sigmoid(self.conv2(torch.tanh(self.conv1(x))))
