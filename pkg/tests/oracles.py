"""Straight-line numpy re-implementations used as test oracles.

Everything here is written directly off the layer definitions with plain
numpy (einsum over kernel taps, explicit loops over heads and patches) so a
mismatch implicates the library code, not the test.
"""

import numpy as np


def np_conv2d(x, w, b=None, stride=1, padding=0, dilation=1):
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    assert ci == c
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    ow = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    y = np.zeros((n, o, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            win = xp[:, :, i * dilation: i * dilation + stride * oh: stride,
                     j * dilation: j * dilation + stride * ow: stride]
            y += np.einsum("nchw,oc->nohw", win, w[:, :, i, j])
    if b is not None:
        y += b.reshape(1, -1, 1, 1)
    return y


def np_sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def np_elu(z, alpha=1.0):
    return np.where(z > 0, z, alpha * (np.exp(np.minimum(z, 0.0)) - 1.0))


def np_softmax(z, axis):
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def np_layer_norm(x, axes, eps=1e-5):
    mu = x.mean(axis=axes, keepdims=True)
    var = x.var(axis=axes, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def np_linear(x, lin):
    return x @ lin.weight.data + lin.bias.data


def np_conv_module(x, conv):
    return np_conv2d(x, conv.weight.data, conv.bias.data,
                     stride=conv.stride, padding=conv.padding,
                     dilation=conv.dilation)


def np_gated(x, gc):
    acts = {"elu": np_elu, "sigmoid": np_sigmoid, "tanh": np.tanh,
            "linear": lambda t: t}
    feat = np_conv_module(x, gc.feature)
    gate = np_conv_module(x, gc.gate)
    return acts[gc.activation](feat) * np_sigmoid(gate)


def np_pooled_gate_mlp(gate_map, mlp):
    avg = np_linear(np.maximum(np_linear(gate_map.mean(axis=(2, 3)), mlp.fc1), 0), mlp.fc2)
    mx = np_linear(np.maximum(np_linear(gate_map.max(axis=(2, 3)), mlp.fc1), 0), mlp.fc2)
    return np_sigmoid(avg + mx)


def acb_forward_np(block, x, gate_prev):
    """Mirror of the adaptive dilation block: parallel dilated pathways mixed
    by softmaxed per-channel gate-attention scores, residual into the input."""
    n, c = x.shape[0], x.shape[1]
    gate_cur = np_gated(x, block.gate_conv)
    feats, scores = [], []
    for conv_r, gate_r, attn_r in zip(block.pathways, block.pathway_gates,
                                      block.pathway_attn):
        f_r = np_elu(np_conv_module(x, conv_r))
        g_r = np_conv_module(np.concatenate([f_r, gate_cur, gate_prev], axis=1), gate_r)
        feats.append(f_r)
        scores.append(np_pooled_gate_mlp(g_r, attn_r))
    weights = np_softmax(np.stack(scores, axis=1), axis=1)  # (n, R, c)
    out = x.copy()
    for i, f_r in enumerate(feats):
        out += weights[:, i].reshape(n, c, 1, 1) * f_r
    return out, weights, gate_cur


def attention_forward_np(block, merged):
    """Brute-force patch attention: explicit loops over heads and patch pairs."""
    n, c, hh, ww = merged.shape
    p = block.patch
    heads = block.heads
    c_head = c // heads
    q = np_conv_module(merged, block.q)
    k = np_conv_module(merged, block.k)
    v = np_conv_module(merged, block.v)
    scale = 1.0 / np.sqrt(p * p * c_head)
    rows, cols = hh // p, ww // p
    out = np.zeros_like(merged)
    for ni in range(n):
        for h in range(heads):
            sl = slice(h * c_head, (h + 1) * c_head)
            tok = lambda m, r, cc: (
                m[ni, sl, r * p:(r + 1) * p, cc * p:(cc + 1) * p]
                .transpose(1, 2, 0).ravel())  # (h, w, C) layout
            qs = [tok(q, r, cc) for r in range(rows) for cc in range(cols)]
            ks = [tok(k, r, cc) for r in range(rows) for cc in range(cols)]
            vs = [tok(v, r, cc) for r in range(rows) for cc in range(cols)]
            logits = np.array([[np.dot(a, b) * scale for b in ks] for a in qs])
            alpha = np_softmax(logits, axis=1)
            for pi in range(rows * cols):
                mix = sum(alpha[pi, pj] * vs[pj] for pj in range(rows * cols))
                r, cc = divmod(pi, cols)
                out[ni, sl, r * p:(r + 1) * p, cc * p:(cc + 1) * p] = (
                    mix.reshape(p, p, c_head).transpose(2, 0, 1))
    return out
