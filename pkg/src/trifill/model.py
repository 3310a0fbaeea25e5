"""Full model: generator (encoder + three-branch decoder) and the
spectral-normalized patch discriminator that judges edge maps."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import nn
from .decoder import Decoder
from .encoder import Encoder

DISCRIMINATOR_CHANNELS = (64, 128, 256, 256, 1)


def _rng(seed, key):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(key,)))


class Generator(nn.Module):
    def __init__(self, cfg, seed=0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        # separate stream for biased-prior extras: switching that flag on
        # must not shift the init of the shared trunk
        self.encoder = Encoder(cfg, _rng(seed, 0))
        self.decoder = Decoder(cfg, _rng(seed, 1), _rng(seed, 2))
        if cfg.precision == "float32":
            self.cast(np.float32)  # init draws stay float64, then round once

    def forward(self, corrupted, mask):
        bottleneck, skips = self.encoder(corrupted, mask)
        return self.decoder(bottleneck, skips, corrupted, mask)


class EdgeDiscriminator(nn.Module):
    """Five stride-2 spectral-normalized convs over a 1-channel edge map,
    leaky-ReLU between layers, raw patch scores out (no final activation)."""

    def __init__(self, seed=0, in_channels=1):
        super().__init__()
        rng = _rng(seed, 3)
        channels = (in_channels,) + DISCRIMINATOR_CHANNELS
        self.convs = nn.ModuleList([
            nn.SpectralNormConv(channels[i], channels[i + 1], 4, rng, stride=2, padding=1)
            for i in range(len(DISCRIMINATOR_CHANNELS))
        ])

    def forward(self, edge_map, update=False):
        x = edge_map
        for i, conv in enumerate(self.convs):
            x = conv(x, update=update)
            if i < len(self.convs) - 1:
                x = ad.leaky_relu(x, 0.2)
        return x

    def refresh(self, iterations=1):
        for conv in self.convs:
            conv.refresh(iterations)
