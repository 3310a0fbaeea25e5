"""Finite-difference audit of every differentiable op and composite block.

Each entry perturbs one input tensor coordinate-by-coordinate and compares
central differences against the recorded backward pass. Elementwise ops get
a tight bound; deep composites accumulate more roundoff and get a looser
one. Inputs are chosen to stay away from kinks (relu/clamp corners, hinge
margins) so the finite differences measure the right thing.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import losses, nn
from .autodiff import Tensor, tensor
from .config import LossWeights
from .decoder import AdnMerge, GatedFeedForward, PatchAttentionBlock
from .encoder import AdaptiveDilationBlock, EncoderState

OP_TOL = 1e-6
BLOCK_TOL = 1e-4


def _rng(seed):
    return np.random.default_rng(seed)


def _probe(rng, shape):
    return rng.normal(size=shape)


def _check(f, x, h=1e-5):
    return ad.grad_check(f, tensor(np.asarray(x, dtype=np.float64), requires_grad=True), h=h)


def _weighted_sum(t, probe):
    return ad.sum_(t * tensor(probe))


def op_entries():
    """(name, callable) pairs; each callable returns the max relative error."""
    rng = _rng(0)
    x = _probe(rng, (3, 4))
    y = _probe(rng, (3, 4)) + 3.0  # keep divisors and logs away from zero
    pos = np.abs(_probe(rng, (3, 4))) + 0.5
    p34 = _probe(rng, (3, 4))
    entries = [
        ("add", lambda: _check(lambda t: _weighted_sum(t + tensor(y), p34), x)),
        ("sub", lambda: _check(lambda t: _weighted_sum(tensor(y) - t, p34), x)),
        ("mul", lambda: _check(lambda t: _weighted_sum(t * tensor(y), p34), x)),
        ("div", lambda: _check(lambda t: _weighted_sum(t / tensor(y), p34), x)),
        ("neg", lambda: _check(lambda t: _weighted_sum(-t, p34), x)),
        ("pow_scalar", lambda: _check(lambda t: _weighted_sum(ad.pow_scalar(t, 3), p34), x)),
        ("exp", lambda: _check(lambda t: _weighted_sum(ad.exp(t), p34), x)),
        ("log", lambda: _check(lambda t: _weighted_sum(ad.log(t), p34), pos)),
        ("sqrt", lambda: _check(lambda t: _weighted_sum(ad.sqrt(t), p34), pos)),
        ("absolute", lambda: _check(lambda t: _weighted_sum(ad.absolute(t), p34), y)),
        ("clamp", lambda: _check(lambda t: _weighted_sum(ad.clamp(t, -0.5, 0.5), p34),
                                 x * 10 + 5)),  # all coordinates beyond the hi bound
        ("sigmoid", lambda: _check(lambda t: _weighted_sum(ad.sigmoid(t), p34), x)),
        ("tanh", lambda: _check(lambda t: _weighted_sum(ad.tanh(t), p34), x)),
        ("relu", lambda: _check(lambda t: _weighted_sum(ad.relu(t), p34), y)),
        ("leaky_relu", lambda: _check(lambda t: _weighted_sum(ad.leaky_relu(t, 0.2), p34), y)),
        ("elu", lambda: _check(lambda t: _weighted_sum(ad.elu(t), p34), y)),
        ("sum", lambda: _check(lambda t: ad.sum_(t), x)),
        ("sum_axis", lambda: _check(lambda t: _weighted_sum(ad.sum_(t, axis=1, keepdims=True),
                                                            p34[:, :1]), x)),
        ("mean", lambda: _check(lambda t: _weighted_sum(ad.mean(t, axis=0), p34[0]), x)),
        ("max", lambda: _check(lambda t: _weighted_sum(ad.max_(t, axis=1), p34[:, 0]), x)),
        ("matmul", lambda: _check(
            lambda t: _weighted_sum(ad.matmul(t, tensor(_rng(1).normal(size=(4, 5)))),
                                    _probe(_rng(2), (3, 5))), x)),
        ("matmul_batched", lambda: _check(
            lambda t: _weighted_sum(ad.matmul(t, tensor(_rng(3).normal(size=(2, 4, 5)))),
                                    _probe(_rng(4), (2, 3, 5))), _probe(_rng(5), (2, 3, 4)))),
        ("fully_connected", lambda: _check(
            lambda t: _weighted_sum(ad.fully_connected(t, tensor(_rng(6).normal(size=(4, 2))),
                                                       tensor(_rng(7).normal(size=2))),
                                    _probe(_rng(8), (3, 2))), x)),
        ("reshape", lambda: _check(lambda t: _weighted_sum(ad.reshape(t, (4, 3)),
                                                           p34.reshape(4, 3)), x)),
        ("transpose", lambda: _check(lambda t: _weighted_sum(ad.transpose(t, (1, 0)),
                                                             p34.T), x)),
        ("concat", lambda: _check(lambda t: _weighted_sum(
            ad.concat([t, tensor(y)], axis=1), _probe(_rng(9), (3, 8))), x)),
        ("narrow", lambda: _check(lambda t: _weighted_sum(ad.narrow(t, 1, 1, 2),
                                                          p34[:, 1:3]), x)),
        ("split", lambda: _check(lambda t: _weighted_sum(ad.split(t, 1, 2)[1],
                                                         p34[:, 2:]), x)),
        ("softmax", lambda: _check(lambda t: _weighted_sum(ad.softmax(t, 1), p34), x)),
        ("log_softmax", lambda: _check(lambda t: _weighted_sum(ad.log_softmax(t, 1), p34), x)),
        ("layer_norm", lambda: _check(lambda t: _weighted_sum(ad.layer_norm(t, 1), p34), x)),
    ]
    x4 = _probe(_rng(10), (2, 3, 6, 6))
    w_exp = _rng(12).normal(size=(5, 3, 3, 3))
    w_con = _rng(13).normal(size=(2, 3, 3, 3))
    w_pt = _rng(14).normal(size=(4, 3, 1, 1))
    # conv outputs are linear in each input, so central differences carry no
    # truncation error; a large step drowns the float64 cancellation noise
    H = 1e-2
    entries += [
        ("conv2d_expanding", lambda: _check(
            lambda t: _weighted_sum(ad.conv2d(t, tensor(w_exp), padding=1),
                                    _probe(_rng(15), (2, 5, 6, 6))), x4, h=H)),
        ("conv2d_contracting", lambda: _check(
            lambda t: _weighted_sum(ad.conv2d(t, tensor(w_con), padding=1),
                                    _probe(_rng(16), (2, 2, 6, 6))), x4, h=H)),
        ("conv2d_strided", lambda: _check(
            lambda t: _weighted_sum(ad.conv2d(t, tensor(w_exp), stride=2, padding=1),
                                    _probe(_rng(17), (2, 5, 3, 3))), x4, h=H)),
        ("conv2d_dilated", lambda: _check(
            lambda t: _weighted_sum(ad.conv2d(t, tensor(w_con), padding=2, dilation=2),
                                    _probe(_rng(18), (2, 2, 6, 6))), x4, h=H)),
        ("conv2d_pointwise", lambda: _check(
            lambda t: _weighted_sum(ad.conv2d(t, tensor(w_pt)),
                                    _probe(_rng(19), (2, 4, 6, 6))), x4, h=H)),
        ("conv2d_weight", lambda: _check(
            lambda t: _weighted_sum(ad.conv2d(tensor(x4), t, padding=1),
                                    _probe(_rng(20), (2, 2, 6, 6))), w_con, h=H)),
        ("upsample_nearest", lambda: _check(
            lambda t: _weighted_sum(ad.upsample_nearest(t, 2),
                                    _probe(_rng(21), (2, 3, 12, 12))), x4, h=H)),
        ("avg_pool_global", lambda: _check(
            lambda t: _weighted_sum(ad.avg_pool_global(t), _probe(_rng(22), (2, 3))), x4)),
        ("max_pool_global", lambda: _check(
            lambda t: _weighted_sum(ad.max_pool_global(t), _probe(_rng(23), (2, 3))), x4)),
    ]
    return entries


def block_entries():
    rng = _rng(100)
    x = rng.normal(size=(1, 4, 6, 6))
    gate = rng.uniform(0.1, 0.9, size=(1, 4, 6, 6))
    probe = np.cos(x)
    gc = nn.GatedConv(4, 4, 3, _rng(101))
    acb = AdaptiveDilationBlock(4, (1, 2), _rng(102))
    adn = AdnMerge(4, 4, _rng(103))
    cond = rng.normal(size=(1, 4, 6, 6))
    attn = PatchAttentionBlock(4, 0, 2, 2, "adn", _rng(104))
    gff = GatedFeedForward(4, _rng(105))

    x_att = rng.normal(size=(1, 4, 4, 4))
    probe_att = np.sin(x_att)

    def acb_f(t):
        state = EncoderState(features=t, gate=tensor(gate), gate_prev=tensor(gate))
        return _weighted_sum(acb(state).features, probe)

    entries = [
        ("gated_conv", lambda: _check(lambda t: _weighted_sum(gc(t), probe), x)),
        ("adaptive_dilation_block", lambda: _check(acb_f, x)),
        ("adn_merge", lambda: _check(lambda t: _weighted_sum(adn(t, tensor(cond)), probe), x)),
        ("adn_merge_cond", lambda: _check(
            lambda t: _weighted_sum(adn(tensor(x), t), probe), cond)),
        ("patch_attention", lambda: _check(
            lambda t: _weighted_sum(attn.attend(t), probe_att), x_att)),
        ("gated_feed_forward", lambda: _check(lambda t: _weighted_sum(gff(t), probe), x)),
    ]
    return entries


def loss_entries():
    rng = _rng(200)
    n, h, w = 1, 6, 6
    target = rng.uniform(0, 1, size=(n, 3, h, w))
    pred = rng.uniform(0.2, 0.8, size=(n, 3, h, w))
    mask = np.zeros((n, 1, h, w))
    mask[:, :, 2:4, 2:4] = 1.0
    weights = LossWeights()
    gt_edge = (rng.uniform(size=(n, 1, h, w)) < 0.3).astype(float)
    pred_edge = rng.uniform(0.2, 0.8, size=(n, 1, h, w))
    labels = rng.integers(0, 3, size=(n, h, w))
    logits = rng.normal(size=(n, 3, h, w))
    disc = _LinearDisc(_rng(201))
    real_edge = rng.uniform(0.2, 0.8, size=(n, 1, h, w))

    entries = [
        ("inpaint_loss", lambda: _check(
            lambda t: losses.inpaint_loss(t, tensor(target), tensor(mask), weights), pred)),
        ("edge_bce", lambda: _check(
            lambda t: losses.edge_bce(t, tensor(gt_edge)), pred_edge)),
        ("edge_adv_generator", lambda: _check(
            lambda t: losses.edge_adv_g(t, disc), pred_edge)),
        ("edge_adv_discriminator", lambda: _check(
            lambda t: losses.edge_adv_d(tensor(pred_edge), t, disc), real_edge)),
        ("seg_cross_entropy", lambda: _check(
            lambda t: losses.seg_ce(t, labels), logits)),
    ]
    return entries


class _LinearDisc:
    """Stand-in critic: one smooth conv, no hinge-corner or SN update effects."""

    def __init__(self, rng):
        self.conv = nn.Conv2d(1, 1, 3, rng)
        self.conv.weight.data *= 0.3  # keep hinge margins strictly active

    def __call__(self, x, update=False):
        return ad.tanh(self.conv(x))


def run_suite():
    """Returns [(name, max_rel_err, tolerance)] over all ops, blocks, losses."""
    results = []
    for name, fn in op_entries():
        results.append((name, fn(), OP_TOL))
    for name, fn in block_entries():
        results.append((name, fn(), BLOCK_TOL))
    for name, fn in loss_entries():
        results.append((name, fn(), BLOCK_TOL))
    return results


def format_results(results):
    lines = []
    for name, err, tol in results:
        status = "ok" if err < tol else "FAIL"
        lines.append(f"{name:28s} {err:12.3e}  (tol {tol:.0e})  {status}")
    worst_ops = max(err for name, err, tol in results if tol == OP_TOL)
    worst_blocks = max(err for name, err, tol in results if tol == BLOCK_TOL)
    lines.append(f"worst op {worst_ops:.3e}, worst block {worst_blocks:.3e}")
    return "\n".join(lines)
