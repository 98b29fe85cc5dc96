"""Generators, discriminators and the frozen feature encoder.

All networks are 2D convolutional and treat the N slices of a window as
input channels.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class NetConfig:
    n_slices: int = 3
    gen_depth: int = 3
    gen_width: int = 16
    disc_widths: tuple[int, ...] = (16, 32, 64, 64)
    enc_widths: tuple[int, ...] = (16, 32, 32)
    enc_layer: int = 3  # take features after this many encoder blocks
    enc_seed: int = 1234

    def __post_init__(self):
        if self.n_slices < 1:
            raise ValueError("n_slices must be >= 1")
        if not 1 <= self.enc_layer <= len(self.enc_widths):
            raise ValueError("enc_layer must index one of the encoder blocks")

    def hash(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


def _conv_block(c_in, c_out):
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, padding=1, padding_mode="reflect"),
        nn.LeakyReLU(0.2),
        nn.Conv2d(c_out, c_out, 3, padding=1, padding_mode="reflect"),
        nn.LeakyReLU(0.2),
    )


class UNetGenerator(nn.Module):
    """U-Net with skip connections predicting a bounded correction of its input.

    The output is ``clamp(x + residual, -1, 1)``. No normalization layers, so
    a network trained on crops behaves the same on full slices.
    """

    def __init__(self, n_channels: int, depth: int = 3, width: int = 16):
        super().__init__()
        self.n_channels = n_channels
        self.depth = depth
        widths = [width * 2 ** i for i in range(depth)]
        self.down = nn.ModuleList()
        c = n_channels
        for w in widths:
            self.down.append(_conv_block(c, w))
            c = w
        self.bottom = _conv_block(c, c)
        self.up = nn.ModuleList()
        for w in reversed(widths):
            self.up.append(_conv_block(c + w, w))
            c = w
        self.head = nn.Conv2d(c, n_channels, 1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x):
        if x.shape[1] != self.n_channels:
            raise ValueError(f"generator expects {self.n_channels} channels, got {x.shape[1]}")
        h, w = x.shape[-2:]
        pad_h, pad_w = (-h) % 2 ** self.depth, (-w) % 2 ** self.depth
        z = F.pad(x, (0, pad_w, 0, pad_h), mode="replicate") if pad_h or pad_w else x
        skips = []
        for block in self.down:
            z = block(z)
            skips.append(z)
            z = F.avg_pool2d(z, 2)
        z = self.bottom(z)
        for block in self.up:
            z = F.interpolate(z, scale_factor=2, mode="nearest")
            z = block(torch.cat([z, skips.pop()], dim=1))
        residual = self.head(z)[..., :h, :w]
        return torch.clamp(x + residual, -1.0, 1.0)


class Discriminator(nn.Module):
    """Strided conv classifier emitting one probability per window."""

    def __init__(self, n_channels: int, widths=(16, 32, 64, 64)):
        super().__init__()
        self.n_channels = n_channels
        layers = []
        c = n_channels
        for w in widths:
            layers += [nn.Conv2d(c, w, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            c = w
        self.features = nn.Sequential(*layers)
        self.classifier = nn.Linear(c, 1)

    def logits(self, x):
        if x.shape[1] != self.n_channels:
            raise ValueError(f"discriminator expects {self.n_channels} channels, got {x.shape[1]}")
        z = self.features(x).mean(dim=(2, 3))
        return self.classifier(z).squeeze(1)

    def forward(self, x):
        return torch.sigmoid(self.logits(x))


class FeatureEncoder(nn.Module):
    """Frozen conv stack with seeded random weights.

    Uses leaky activations and average pooling so distinct inputs do not
    collapse onto the same features.
    """

    def __init__(self, n_channels: int, widths=(16, 32, 32), layer: int = 3, seed: int = 1234):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        blocks = []
        c = n_channels
        for w in widths[:layer]:
            conv = nn.Conv2d(c, w, 3, padding=1)
            bound = (6.0 / (9 * c)) ** 0.5
            with torch.no_grad():
                conv.weight.uniform_(-bound, bound, generator=gen)
                conv.bias.uniform_(-0.1, 0.1, generator=gen)
            blocks += [conv, nn.LeakyReLU(0.2), nn.AvgPool2d(2)]
            c = w
        self.net = nn.Sequential(*blocks)
        self.n_channels = n_channels
        self.requires_grad_(False)

    def train(self, mode: bool = True):
        return super().train(False)

    def forward(self, x):
        if x.shape[1] != self.n_channels:
            raise ValueError(f"encoder expects {self.n_channels} channels, got {x.shape[1]}")
        return self.net(x)


@dataclass
class Networks:
    """The four trainable networks plus the frozen encoder."""

    G_X: UNetGenerator  # Y -> X, adds artifacts
    G_Y: UNetGenerator  # X -> Y, removes artifacts
    D_X: Discriminator
    D_Y: Discriminator
    f: FeatureEncoder
    config: NetConfig = field(default_factory=NetConfig)

    def generators(self):
        return list(self.G_X.parameters()) + list(self.G_Y.parameters())

    def discriminators(self):
        return list(self.D_X.parameters()) + list(self.D_Y.parameters())


def build_networks(config: NetConfig, seed: int = 0, dtype=torch.float32) -> Networks:
    """Independently initialized networks; identical seeds give identical weights."""
    n = config.n_slices
    nets = []
    for k, make in enumerate([
        lambda: UNetGenerator(n, config.gen_depth, config.gen_width),
        lambda: UNetGenerator(n, config.gen_depth, config.gen_width),
        lambda: Discriminator(n, config.disc_widths),
        lambda: Discriminator(n, config.disc_widths),
    ]):
        with torch.random.fork_rng():
            torch.manual_seed(seed * 1000 + k)
            nets.append(make().to(dtype))
    f = FeatureEncoder(n, config.enc_widths, config.enc_layer, config.enc_seed).to(dtype)
    return Networks(*nets, f=f, config=config)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
