"""Encoder: gated-conv stem (full -> 1/2 -> 1/4 resolution) followed by a
stack of residual blocks that mix parallel dilated pathways through learned
per-channel gate attention.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import autodiff as ad
from . import nn


@dataclass
class EncoderState:
    """Features plus the gate maps threading through the block stack."""

    features: object  # Tensor, N x C x H/4 x W/4
    gate: object  # most recent gate map, values in (0,1)
    gate_prev: object  # one block older (stem duplicates its own gate)
    layer: int = 0


class PooledGateMlp(nn.Module):
    """Per-channel attention score from a gate map: a shared bottleneck MLP
    applied to global average- and max-pooled statistics, summed, squashed."""

    def __init__(self, channels, rng, reduction=4):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.fc1 = nn.Linear(channels, hidden, rng)
        self.fc2 = nn.Linear(hidden, channels, rng)

    def _branch(self, pooled):
        return self.fc2(ad.relu(self.fc1(pooled)))

    def forward(self, gate_map):
        avg = self._branch(ad.avg_pool_global(gate_map))
        mx = self._branch(ad.max_pool_global(gate_map))
        return ad.sigmoid(avg + mx)  # (N, C)


class AdaptiveDilationBlock(nn.Module):
    """Residual block over parallel dilated 3x3 pathways.

    Each pathway r gets a gate map from [pathway features; current gate;
    previous gate]; pooled gate statistics feed a per-pathway MLP, and the
    resulting per-channel scores are softmaxed across pathways so the
    mixture weights sum to one for every (sample, channel).
    """

    def __init__(self, channels, dilations, rng, reduction=4):
        super().__init__()
        if not dilations:
            raise ValueError("dilation set must be non-empty")
        self.dilations = tuple(dilations)
        self.gate_conv = nn.GatedConv(channels, channels, 3, rng, activation="sigmoid")
        self.pathways = nn.ModuleList(
            [nn.Conv2d(channels, channels, 3, rng, dilation=r) for r in self.dilations])
        self.pathway_gates = nn.ModuleList(
            [nn.Conv2d(3 * channels, channels, 3, rng) for _ in self.dilations])
        self.pathway_attn = nn.ModuleList(
            [PooledGateMlp(channels, rng, reduction) for _ in self.dilations])

    def mixture(self, features, gate_prev):
        """Returns (pathway feature list, mixture weights (N, R, C), new gate)."""
        gate_cur = self.gate_conv(features)
        n, c = features.shape[0], features.shape[1]
        pathway_feats, scores = [], []
        for conv_r, gate_r, attn_r in zip(self.pathways, self.pathway_gates, self.pathway_attn):
            f_r = ad.elu(conv_r(features))
            g_r = gate_r(ad.concat([f_r, gate_cur, gate_prev], axis=1))
            pathway_feats.append(f_r)
            scores.append(ad.reshape(attn_r(g_r), (n, 1, c)))
        weights = ad.softmax(ad.concat(scores, axis=1), axis=1)
        return pathway_feats, weights, gate_cur

    def forward(self, state):
        pathway_feats, weights, gate_cur = self.mixture(state.features, state.gate_prev)
        n, c = state.features.shape[0], state.features.shape[1]
        out = state.features
        for i, f_r in enumerate(pathway_feats):
            w = ad.reshape(ad.narrow(weights, 1, i, 1), (n, c, 1, 1))
            out = out + w * f_r
        return EncoderState(features=out, gate=gate_cur, gate_prev=gate_cur,
                            layer=state.layer + 1)


class Encoder(nn.Module):
    """Stem + block stack. Returns 1/4-resolution features and the two
    higher-resolution stem outputs for decoder skip connections."""

    def __init__(self, cfg, rng):
        super().__init__()
        b = cfg.base_channels
        self.stem_full = nn.GatedConv(4, b, 5, rng)
        self.stem_half = nn.GatedConv(b, 2 * b, 3, rng, stride=2, padding=1)
        self.stem_quarter = nn.GatedConv(2 * b, 4 * b, 3, rng, stride=2, padding=1)
        self.blocks = nn.ModuleList(
            [AdaptiveDilationBlock(4 * b, cfg.dilations, rng) for _ in range(cfg.acb_depth)])

    def stem(self, corrupted, mask):
        n, c, h, w = corrupted.shape
        if c != 3 or mask.shape != (n, 1, h, w):
            raise ValueError(f"expected image (N,3,H,W) and mask (N,1,H,W), "
                             f"got {corrupted.shape} and {mask.shape}")
        if h % 4 != 0 or w % 4 != 0:
            raise ValueError(f"spatial dims must be divisible by 4, got {h}x{w}")
        x = ad.concat([corrupted, mask], axis=1)
        skip_full = self.stem_full(x)
        skip_half = self.stem_half(skip_full)
        features, gate = self.stem_quarter.forward_with_gate(skip_half)
        state = EncoderState(features=features, gate=gate, gate_prev=gate, layer=0)
        return state, [skip_full, skip_half]

    def forward(self, corrupted, mask):
        state, skips = self.stem(corrupted, mask)
        for block in self.blocks:
            state = block(state)
        return state.features, skips
