"""Slow, loop-based numpy references for the attention layers.

They read weights out of the torch modules but recompute everything with
explicit per-head, per-row loops. Nothing here is shared with mtfm.hta.
"""

from __future__ import annotations

import math

import numpy as np


def _silu(x):
    return x / (1.0 + np.exp(-x))


def _np(t):
    return t.detach().cpu().double().numpy()


def ref_gln(x, group_idx, gain, bias, eps):
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        row = x[i]
        mu = sum(row) / len(row)
        var = sum((v - mu) ** 2 for v in row) / len(row)
        g = group_idx[i]
        out[i] = (row - mu) / math.sqrt(var + eps) * gain[g] + bias[g]
    return out


def _norm_denominator(mask_row, n_tokens, mode):
    if mode == "valid":
        return max(1.0, float(sum(mask_row)))
    if mode == "seq_len":
        return float(n_tokens)
    return 1.0


def _head_attention(q_rows, k, v, mask_rows, n_tokens, mode):
    """Per-row, per-key accumulation for one head."""
    out = np.zeros((q_rows.shape[0], v.shape[1]))
    for i in range(q_rows.shape[0]):
        denom = _norm_denominator(mask_rows[i], n_tokens, mode)
        for j in range(k.shape[0]):
            s = float(np.dot(q_rows[i], k[j])) * mask_rows[i][j]
            out[i] += _silu(s) / denom * v[j]
    return out


def ref_full_layer(layer, x, mask, group_idx):
    """Loop reference of a FullAttentionLayer on one (N, d) sequence."""
    cfg = layer.cfg
    h_n, g_n, dh = cfg.heads, cfg.kv_heads, cfg.head_dim
    r = h_n // g_n
    x = np.asarray(x, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    n = x.shape[0]
    xn = ref_gln(x, group_idx, _np(layer.norm_in.gain), _np(layer.norm_in.bias), cfg.norm_eps)
    proj = _silu(xn @ _np(layer.f1.weight).T + _np(layer.f1.bias))
    u = proj[:, : h_n * dh]
    q = proj[:, h_n * dh : 2 * h_n * dh]
    k = proj[:, 2 * h_n * dh : 2 * h_n * dh + g_n * dh]
    v = proj[:, 2 * h_n * dh + g_n * dh :]
    heads = []
    for h in range(1, h_n + 1):
        g = math.ceil(h / r)
        qh = q[:, (h - 1) * dh : h * dh]
        kg = k[:, (g - 1) * dh : g * dh]
        vg = v[:, (g - 1) * dh : g * dh]
        heads.append(_head_attention(qh, kg, vg, mask, n, cfg.attn_norm))
    a = np.concatenate(heads, axis=1)
    an = ref_gln(a, group_idx, _np(layer.norm_attn.gain), _np(layer.norm_attn.bias), cfg.norm_eps)
    return (an * u) @ _np(layer.f2.weight).T + _np(layer.f2.bias) + x


def ref_mha_layer(layer, x, mask, group_idx):
    """Multi-head reference with one K/V per query head (requires kv_heads == heads)."""
    cfg = layer.cfg
    if cfg.kv_heads != cfg.heads:
        raise ValueError("MHA reference needs kv_heads == heads")
    h_n, dh = cfg.heads, cfg.head_dim
    x = np.asarray(x, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    n = x.shape[0]
    w = _np(layer.f1.weight)
    b = _np(layer.f1.bias)
    xn = ref_gln(x, group_idx, _np(layer.norm_in.gain), _np(layer.norm_in.bias), cfg.norm_eps)
    blocks = {}
    for name, offset in (("u", 0), ("q", 1), ("k", 2), ("v", 3)):
        for h in range(h_n):
            lo = offset * h_n * dh + h * dh
            blocks[name, h] = _silu(xn @ w[lo : lo + dh].T + b[lo : lo + dh])
    a = np.concatenate(
        [_head_attention(blocks["q", h], blocks["k", h], blocks["v", h], mask, n, cfg.attn_norm) for h in range(h_n)],
        axis=1,
    )
    u = np.concatenate([blocks["u", h] for h in range(h_n)], axis=1)
    an = ref_gln(a, group_idx, _np(layer.norm_attn.gain), _np(layer.norm_attn.bias), cfg.norm_eps)
    return (an * u) @ _np(layer.f2.weight).T + _np(layer.f2.bias) + x


def ref_bce(probs, labels, eps=1e-7):
    total = 0.0
    for p, y in zip(probs, labels):
        p = min(max(p, eps), 1 - eps)
        total += -(y * math.log(p) + (1 - y) * math.log(1 - p))
    return total / len(probs)


def ref_auc_pairs(labels, scores):
    """All positive/negative pairs: 1 for a correct order, 1/2 for a tie."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    if not pos or not neg:
        return None
    hits = 0.0
    for a in pos:
        for b in neg:
            hits += 1.0 if a > b else 0.5 if a == b else 0.0
    return hits / (len(pos) * len(neg))


def ref_adam(theta, grad_fn, steps, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Scalar Adam trajectory for a 1-D problem with gradient ``grad_fn``."""
    m = v = 0.0
    path = []
    for t in range(1, steps + 1):
        g = grad_fn(theta)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        theta = theta - lr * (m / (1 - beta1**t)) / (math.sqrt(v / (1 - beta2**t)) + eps)
        path.append(theta)
    return path
