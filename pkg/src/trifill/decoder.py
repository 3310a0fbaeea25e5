"""Three-branch decoder (image / edge / segmentation) coupled per stage by
patch attention over fused features, plus a gated feed-forward and a
channel-split exchange back into the branches.

Feature fusion ahead of the attention is pluggable (`fusion` config):
norm-and-modulate variants (adn / spade / adain), concatenation variants
(concat / conv), or plain summation (add). With no auxiliary branches the
fusion degenerates to identity.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import autodiff as ad
from . import nn

_STAT_EPS = 1e-5


class AdnMerge(nn.Module):
    """Per-location channel normalization of the target, then a spatially
    varying affine whose gamma/beta come from convs over the conditioning."""

    def __init__(self, channels, cond_channels, rng):
        super().__init__()
        self.gamma = nn.Conv2d(cond_channels, channels, 3, rng)
        self.beta = nn.Conv2d(cond_channels, channels, 3, rng)

    def forward(self, x, cond):
        return self.gamma(cond) * ad.layer_norm(x, axes=1, eps=_STAT_EPS) + self.beta(cond)


class SpadeMerge(nn.Module):
    """Batch-statistics normalization (per channel over batch and space,
    recomputed every forward) with conv-predicted spatial gamma/beta."""

    def __init__(self, channels, cond_channels, rng):
        super().__init__()
        self.gamma = nn.Conv2d(cond_channels, channels, 3, rng)
        self.beta = nn.Conv2d(cond_channels, channels, 3, rng)

    def forward(self, x, cond):
        normalized = ad.layer_norm(x, axes=(0, 2, 3), eps=_STAT_EPS)
        return self.gamma(cond) * normalized + self.beta(cond)


class AdainMerge(nn.Module):
    """Projects the conditioning to the target width, then transfers its
    per-(sample, channel) spatial mean/std onto the target features."""

    def __init__(self, channels, cond_channels, rng):
        super().__init__()
        self.proj = nn.Conv2d(cond_channels, channels, 1, rng)

    def forward(self, x, cond):
        c = self.proj(cond)
        mu_x = ad.mean(x, axis=(2, 3), keepdims=True)
        var_x = ad.mean((x - mu_x) * (x - mu_x), axis=(2, 3), keepdims=True)
        mu_c = ad.mean(c, axis=(2, 3), keepdims=True)
        var_c = ad.mean((c - mu_c) * (c - mu_c), axis=(2, 3), keepdims=True)
        # same eps on both std terms so matching statistics give an exact fixed point
        return (ad.sqrt(var_c + _STAT_EPS) * (x - mu_x) / ad.sqrt(var_x + _STAT_EPS)
                + mu_c)


class ConcatMerge(nn.Module):
    def __init__(self, channels, cond_channels, rng):
        super().__init__()
        self.fuse = nn.Conv2d(channels + cond_channels, channels, 3, rng)

    def forward(self, x, cond):
        return self.fuse(ad.concat([x, cond], axis=1))


class ConvMerge(nn.Module):
    """Concatenation fused back down by two convolutions."""

    def __init__(self, channels, cond_channels, rng):
        super().__init__()
        self.fuse1 = nn.Conv2d(channels + cond_channels, channels, 3, rng)
        self.fuse2 = nn.Conv2d(channels, channels, 3, rng)

    def forward(self, x, cond):
        return self.fuse2(ad.elu(self.fuse1(ad.concat([x, cond], axis=1))))


class AddMerge(nn.Module):
    """Plain summation; conditioning maps must match the target width."""

    def __init__(self, channels, cond_channels, rng):
        super().__init__()
        if cond_channels % channels != 0:
            raise ValueError(
                f"add fusion needs channel-matched conditioning, got {cond_channels} "
                f"conditioning channels against {channels}")
        self.channels = channels

    def forward(self, x, cond):
        out = x
        for part in ad.split(cond, 1, cond.shape[1] // self.channels):
            out = out + part
        return out


_MERGES = {
    "adn": AdnMerge,
    "spade": SpadeMerge,
    "adain": AdainMerge,
    "concat": ConcatMerge,
    "conv": ConvMerge,
    "add": AddMerge,
}


def make_merge(variant, channels, cond_channels, rng):
    if variant not in _MERGES:
        raise ValueError(f"unknown fusion variant {variant!r}")
    return _MERGES[variant](channels, cond_channels, rng)


class PatchAttentionBlock(nn.Module):
    """Fuse -> 1x1 Q/K/V embeddings -> per-head scaled dot-product attention
    across non-overlapping patches -> merge patches back. No residual or
    output projection: with a single patch the output is exactly the V map."""

    def __init__(self, channels, cond_channels, patch, heads, fusion, rng):
        super().__init__()
        if channels % heads != 0:
            raise ValueError(f"{channels} channels not divisible by {heads} heads")
        self.patch, self.heads = patch, heads
        self.merge = make_merge(fusion, channels, cond_channels, rng) if cond_channels else None
        self.q = nn.Conv2d(channels, channels, 1, rng)
        self.k = nn.Conv2d(channels, channels, 1, rng)
        self.v = nn.Conv2d(channels, channels, 1, rng)

    def fused(self, x, cond):
        return self.merge(x, cond) if self.merge is not None else x

    def attend(self, merged, return_attention=False):
        c_head = merged.shape[1] // self.heads
        # Single fused 1x1 conv for all three embeddings (one GEMM, not three).
        w = ad.concat([self.q.weight, self.k.weight, self.v.weight], axis=0)
        b = ad.concat([self.q.bias, self.k.bias, self.v.bias], axis=0)
        q_map, k_map, v_map = ad.split(ad.conv2d(merged, w, b), axis=1, parts=3)
        scale = 1.0 / (self.patch * self.patch * c_head) ** 0.5
        outs, alphas = [], []
        for h in range(self.heads):
            qh = ad.narrow(q_map, 1, h * c_head, c_head)
            kh = ad.narrow(k_map, 1, h * c_head, c_head)
            vh = ad.narrow(v_map, 1, h * c_head, c_head)
            qp, grid = nn.patch_split_packed(qh, self.patch, self.patch)
            kp, _ = nn.patch_split_packed(kh, self.patch, self.patch)
            vp, _ = nn.patch_split_packed(vh, self.patch, self.patch)
            logits = ad.matmul(qp, ad.transpose(kp, (0, 2, 1))) * scale
            alpha = ad.softmax(logits, axis=2)
            outs.append(nn.patch_merge_packed(ad.matmul(alpha, vp), grid))
            alphas.append(alpha)
        out = ad.concat(outs, axis=1)
        return (out, alphas) if return_attention else out

    def forward(self, x, cond, return_attention=False):
        return self.attend(self.fused(x, cond), return_attention)


class GatedFeedForward(nn.Module):
    """Residual two-layer gated-conv MLP: expand x2, project back, add."""

    def __init__(self, channels, rng):
        super().__init__()
        self.expand = nn.GatedConv(channels, 2 * channels, 3, rng)
        self.project = nn.GatedConv(2 * channels, channels, 3, rng)

    def forward(self, x):
        return x + self.project(self.expand(x))


@dataclass
class DecoderOutputs:
    image: object  # Tensor (N,3,H,W) in [0,1]
    edge: object  # Tensor (N,1,H,W) in (0,1), or None if branch disabled
    seg_logits: object  # Tensor (N,K,H,W), or None if branch disabled
    composite: object  # corrupted + image*mask — known pixels pass through


class DecoderStage(nn.Module):
    """One decoder resolution: attention-coupled exchange across branches,
    branch-wise recombination with the encoder skip, optional 2x upsample."""

    def __init__(self, channels, branches, skip_channels, patch, heads, fusion,
                 k_classes, biased, upsample, rng, rng_biased):
        super().__init__()
        self.branches = tuple(branches)  # e.g. ("image", "edge", "seg")
        self.biased = biased
        aux = [b for b in self.branches if b != "image"]
        if biased:
            cond_channels = 1 + k_classes  # edge probability + class probabilities
            self.prior_edge = nn.Conv2d(channels, 1, 3, rng_biased)
            self.prior_seg = nn.Conv2d(channels, k_classes, 3, rng_biased)
        else:
            cond_channels = channels * len(aux)
        self.attention = PatchAttentionBlock(channels, cond_channels, patch, heads,
                                             fusion, rng)
        self.feed_forward = GatedFeedForward(channels, rng)
        self.exchange = nn.Conv2d(channels, len(self.branches) * channels, 1, rng)
        combine_in = 2 * channels + skip_channels
        self.combine = nn.ModuleList(
            [nn.Conv2d(combine_in, channels, 3, rng) for _ in self.branches])
        self.upsample = upsample
        if upsample:
            self.up = nn.ModuleList(
                [nn.Conv2d(channels, channels // 2, 3, rng) for _ in self.branches])

    def conditioning(self, features):
        aux = [features[b] for b in self.branches if b != "image"]
        if not aux:
            return None
        if self.biased:
            edge_prob = ad.sigmoid(self.prior_edge(features["edge"]))
            seg_prob = ad.softmax(self.prior_seg(features["seg"]), axis=1)
            return ad.concat([edge_prob, seg_prob], axis=1)
        return ad.concat(aux, axis=1) if len(aux) > 1 else aux[0]

    def forward(self, features, skip):
        cond = self.conditioning(features)
        enhanced = self.feed_forward(self.attention(features["image"], cond))
        parts = ad.split(self.exchange(enhanced), 1, len(self.branches))
        out = {}
        for name, part, conv in zip(self.branches, parts, self.combine):
            pieces = [part, features[name]]
            if skip is not None:
                pieces.append(skip)
            out[name] = ad.elu(conv(ad.concat(pieces, axis=1)))
        if self.upsample:
            out = {name: ad.elu(up(ad.upsample_nearest(out[name], 2)))
                   for name, up in zip(self.branches, self.up)}
        return out


class Decoder(nn.Module):
    def __init__(self, cfg, rng, rng_biased):
        super().__init__()
        self.cfg = cfg
        branches = ["image"]
        if cfg.use_edge_branch:
            branches.append("edge")
        if cfg.use_seg_branch:
            branches.append("seg")
        self.branches = tuple(branches)
        c0 = cfg.stage_channels[0]
        self.init_proj = nn.ModuleList(
            [nn.Conv2d(c0, c0, 1, rng) for _ in self.branches])
        skip_channels = (0, 2 * cfg.base_channels, cfg.base_channels)
        self.stages = nn.ModuleList()
        for s, channels in enumerate(cfg.stage_channels):
            self.stages.append(DecoderStage(
                channels=channels,
                branches=self.branches,
                skip_channels=skip_channels[s],
                patch=cfg.patch_size * (2**s),
                heads=cfg.heads,
                fusion=cfg.fusion,
                k_classes=cfg.k_classes,
                biased=cfg.biased_prior,
                upsample=s < 2,
                rng=rng,
                rng_biased=rng_biased,
            ))
        b = cfg.base_channels
        self.head_image = nn.Conv2d(b, 3, 3, rng)
        if cfg.use_edge_branch:
            self.head_edge = nn.Conv2d(b, 1, 3, rng)
        if cfg.use_seg_branch:
            self.head_seg = nn.Conv2d(b, cfg.k_classes, 3, rng)

    def forward(self, bottleneck, skips, corrupted, mask):
        features = {name: ad.elu(proj(bottleneck))
                    for name, proj in zip(self.branches, self.init_proj)}
        stage_skips = (None, skips[1], skips[0])  # none at 1/4, then 1/2, then full
        for stage, skip in zip(self.stages, stage_skips):
            features = stage(features, skip)
        image = ad.sigmoid(self.head_image(features["image"]))
        edge = ad.sigmoid(self.head_edge(features["edge"])) if "edge" in features else None
        seg = self.head_seg(features["seg"]) if "seg" in features else None
        composite = corrupted + image * mask
        return DecoderOutputs(image=image, edge=edge, seg_logits=seg, composite=composite)
