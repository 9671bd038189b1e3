import dataclasses

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from torch.nn import functional as F

from mtfm.config import REFERENCE_MODEL, ModelConfig
from mtfm.errors import ConfigurationError
from mtfm.hta import (
    AttentionContext,
    FullAttentionLayer,
    GroupIndex,
    HTAStack,
    TargetAttentionLayer,
    attend,
    count_parameters,
    dump_trace,
    full_attention_layer,
    gln,
    load_trace,
    stack_param_count,
    target_attention_layer,
)
from mtfm.mask import build_mask
from mtfm.reference import ref_full_layer, ref_gln
from mtfm.tokenizer import TokenKind, TokenMeta
from mtfm.verify import MICRO_MODEL, micro_space, random_layer_instance, random_metas

H, R, T = TokenKind.H, TokenKind.R, TokenKind.T
F64 = torch.float64


def _layer(cfg=MICRO_MODEL, seed=0):
    groups = GroupIndex(micro_space())
    torch.manual_seed(seed)
    layer = FullAttentionLayer(cfg, len(groups)).double()
    with torch.no_grad():
        for norm in (layer.norm_in, layer.norm_attn):
            norm.gain.add_(0.3 * torch.randn_like(norm.gain))
            norm.bias.add_(0.3 * torch.randn_like(norm.bias))
    return groups, layer


def test_gln_identity_affine_is_layer_norm():
    x = torch.randn(7, 16, dtype=F64)
    idx = torch.zeros(7, dtype=torch.long)
    out = gln(x, idx, torch.ones(1, 16, dtype=F64), torch.zeros(1, 16, dtype=F64), 1e-6)
    assert torch.allclose(out, F.layer_norm(x, (16,), eps=1e-6), atol=1e-12)


def test_gln_matches_loop_reference():
    x = torch.randn(9, 6, dtype=F64)
    idx = torch.tensor([0, 1, 2, 0, 1, 2, 2, 1, 0])
    gain, bias = torch.randn(3, 6, dtype=F64), torch.randn(3, 6, dtype=F64)
    ref = ref_gln(x.numpy(), idx.numpy(), gain.numpy(), bias.numpy(), 1e-6)
    assert np.allclose(gln(x, idx, gain, bias).numpy(), ref, atol=1e-12)


def test_gln_constant_row():
    x = torch.full((1, 8), 3.5, dtype=F64)
    out = gln(x, torch.zeros(1, dtype=torch.long), torch.ones(1, 8, dtype=F64), torch.zeros(1, 8, dtype=F64))
    assert torch.equal(out, torch.zeros_like(out))


def test_gln_groups_use_own_affine():
    x = torch.randn(1, 8, dtype=F64).repeat(2, 1)
    gain = torch.stack([torch.ones(8), 2 * torch.ones(8)]).double()
    out = gln(x, torch.tensor([0, 1]), gain, torch.zeros(2, 8, dtype=F64))
    assert not torch.allclose(out[0], out[1])
    assert torch.allclose(2 * out[0], out[1])


def test_unknown_group():
    with pytest.raises(ConfigurationError):
        GroupIndex(micro_space()).index(T, 42)


def test_dense_oracle_all_ones_mask():
    groups, layer = _layer()
    metas = [TokenMeta(H, 0, 1), TokenMeta(H, 1, 2), TokenMeta(R, 0, 3), TokenMeta(T, 0, 9, 0)]
    x = torch.randn(4, 16, dtype=F64)
    ones = np.ones((4, 4))
    with torch.no_grad():
        y = full_attention_layer(x, metas, layer, groups, mask=ones)
    ref = ref_full_layer(layer, x.numpy(), ones, groups.indices(metas).numpy())
    assert np.abs(y.numpy() - ref).max() <= 1e-12


@pytest.mark.parametrize("norm", ["valid", "seq_len", "none"])
@pytest.mark.parametrize("kv", [1, 2])
def test_layer_matches_loop_reference(norm, kv):
    cfg = dataclasses.replace(MICRO_MODEL, attn_norm=norm, heads=4, kv_heads=kv)
    rng = np.random.default_rng(5)
    for _ in range(5):
        groups, layer, metas, x = random_layer_instance(rng, cfg, micro_space())
        with torch.no_grad():
            y = full_attention_layer(x, metas, layer, groups).numpy()
        ref = ref_full_layer(layer, x.numpy(), build_mask(metas), groups.indices(metas).numpy())
        assert np.abs(y - ref).max() <= 1e-12


def test_target_row_single_visible_key():
    # one T row seeing only itself: silu(q . k_self) * v_self / N under seq_len normalization
    n, dh = 5, 3
    q, k, v = (torch.randn(1, n, 1, dh, dtype=F64) for _ in range(3))
    mask = torch.zeros(1, n, n, dtype=F64)
    mask[0, 4, 4] = 1
    out, _ = attend(q, k, v, mask, attn_norm="seq_len", lengths=torch.tensor([float(n)], dtype=F64))
    expected = F.silu((q[0, 4, 0] * k[0, 4, 0]).sum()) * v[0, 4, 0] / n
    assert torch.allclose(out[0, 4], expected, atol=1e-15)
    assert torch.count_nonzero(out[0, :4]) == 0


def test_target_equals_full_when_all_tokens_are_targets():
    groups, full = _layer()
    target = TargetAttentionLayer.from_full(full, len(groups))
    metas = [TokenMeta(T, i % 2, 3 + i, i) for i in range(5)]
    x = torch.randn(5, 16, dtype=F64)
    with torch.no_grad():
        assert torch.allclose(full_attention_layer(x, metas, full, groups), target_attention_layer(x, metas, target, groups), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_target_restriction_and_passthrough(seed):
    rng = np.random.default_rng(seed)
    groups, full, metas, x = random_layer_instance(rng, MICRO_MODEL, micro_space())
    target = TargetAttentionLayer.from_full(full, len(groups))
    with torch.no_grad():
        yf = full_attention_layer(x, metas, full, groups)
        yt = target_attention_layer(x, metas, target, groups)
    is_t = torch.tensor([m.kind is T for m in metas])
    assert torch.allclose(yf[is_t], yt[is_t], atol=1e-10)
    assert torch.equal(yt[~is_t], x[~is_t])


def test_zero_init_output_is_identity():
    cfg = dataclasses.replace(MICRO_MODEL, zero_init_output=True)
    groups = GroupIndex(micro_space())
    stack = HTAStack(cfg, len(groups)).double()
    metas = random_metas(np.random.default_rng(1), 12)
    x = torch.randn(1, 12, 16, dtype=F64)
    ctx = AttentionContext.build([metas], groups, F64)
    with torch.no_grad():
        assert torch.equal(stack(x, ctx), x)


def _stack_out(stack, groups, metas, x):
    ctx = AttentionContext.build([metas], groups, F64)
    with torch.no_grad():
        return stack(x[None], ctx)[0]


def test_permuting_targets_permutes_outputs():
    groups = GroupIndex(micro_space())
    torch.manual_seed(3)
    stack = HTAStack(MICRO_MODEL, len(groups)).double()
    ctx_metas = [TokenMeta(H, 0, 1), TokenMeta(R, 0, 2)]
    t = [TokenMeta(T, i % 2, 5, i) for i in range(4)]
    x = torch.randn(6, 16, dtype=F64)
    perm = [2, 0, 3, 1]
    y = _stack_out(stack, groups, ctx_metas + t, x)
    xp = torch.cat([x[:2], x[2:][perm]])
    yp = _stack_out(stack, groups, ctx_metas + [t[i] for i in perm], xp)
    assert torch.allclose(y[2:][perm], yp[2:], atol=1e-12)


def test_targets_are_isolated_from_each_other():
    groups = GroupIndex(micro_space())
    torch.manual_seed(4)
    stack = HTAStack(dataclasses.replace(MICRO_MODEL, blocks=2), len(groups)).double()
    metas = [TokenMeta(H, 0, 1), TokenMeta(H, 1, 2), TokenMeta(R, 0, 6), TokenMeta(T, 0, 5, 0), TokenMeta(T, 1, 9, 1)]
    x = torch.randn(5, 16, dtype=F64)
    both = _stack_out(stack, groups, metas, x)
    alone = _stack_out(stack, groups, metas[:4], x[:4])
    assert torch.allclose(both[3], alone[3], atol=1e-12)


@pytest.mark.parametrize(
    "k,p,b,kinds",
    [(0, 1, 4, ["full"] * 4), (1, 0, 2, ["target"] * 2), (3, 1, 1, ["target"] * 3 + ["full"])],
)
def test_stack_layout(k, p, b, kinds):
    cfg = dataclasses.replace(MICRO_MODEL, target_layers=k, full_layers=p, blocks=b)
    stack = HTAStack(cfg, 3)
    assert [layer.kind for layer in stack.layers] == kinds
    if p == 0:
        assert cfg.label.endswith("lazy decoder")


def test_param_count_closed_form():
    for cfg in (MICRO_MODEL, ModelConfig(), dataclasses.replace(ModelConfig(), kv_heads=4)):
        assert count_parameters(HTAStack(cfg, 6)) == stack_param_count(cfg, 6)


def test_reference_scale_param_count():
    n_groups = 6
    d, h = REFERENCE_MODEL.d_model, REFERENCE_MODEL.heads
    assert (REFERENCE_MODEL.blocks, REFERENCE_MODEL.target_layers, REFERENCE_MODEL.full_layers, h, REFERENCE_MODEL.kv_heads) == (4, 3, 1, 3, 1)
    assert count_parameters(HTAStack(REFERENCE_MODEL, n_groups)) == stack_param_count(REFERENCE_MODEL, n_groups)


def test_gqa_shrinks_kv_projection():
    h = MICRO_MODEL.heads
    mha = FullAttentionLayer(dataclasses.replace(MICRO_MODEL, kv_heads=h), 3)
    gqa = FullAttentionLayer(dataclasses.replace(MICRO_MODEL, kv_heads=1), 3)
    dh = MICRO_MODEL.head_dim
    assert mha.split[2:] == (h * dh, h * dh) and gqa.split[2:] == (dh, dh)


def test_gradient_reaches_both_branches():
    groups, layer = _layer()
    metas = random_metas(np.random.default_rng(2), 10)
    x = torch.randn(10, 16, dtype=F64)
    full_attention_layer(x, metas, layer, groups).pow(2).sum().backward()
    g = layer.f1.weight.grad
    hd = MICRO_MODEL.heads * MICRO_MODEL.head_dim
    assert g[:hd].abs().sum() > 0  # U
    assert g[hd : 2 * hd].abs().sum() > 0  # Q (through A)


def test_padded_batch_matches_single():
    groups = GroupIndex(micro_space())
    torch.manual_seed(7)
    stack = HTAStack(MICRO_MODEL, len(groups)).double()
    rng = np.random.default_rng(0)
    seqs = [random_metas(rng, n) for n in (3, 11, 7)]
    xs = [torch.randn(len(m), 16, dtype=F64) for m in seqs]
    xb = torch.zeros(3, 11, 16, dtype=F64)
    for i, x in enumerate(xs):
        xb[i, : len(x)] = x
    with torch.no_grad():
        yb = stack(xb, AttentionContext.build(seqs, groups, F64))
    for i, (m, x) in enumerate(zip(seqs, xs)):
        assert torch.allclose(yb[i, : len(m)], _stack_out(stack, groups, m, x), atol=1e-12)


def test_trace_export_round_trip():
    groups = GroupIndex(micro_space())
    stack = HTAStack(MICRO_MODEL, len(groups)).double()
    metas = random_metas(np.random.default_rng(3), 8)
    trace = []
    with torch.no_grad():
        stack(torch.randn(1, 8, 16, dtype=F64), AttentionContext.build([metas], groups, F64), trace)
    loaded = load_trace(dump_trace(trace))
    assert [k for k, _ in loaded] == [k for k, _ in trace]
    for (_, a), (_, b) in zip(loaded, trace):
        assert a.shape == tuple(b[0].shape)
        assert np.allclose(a, b[0].numpy(), rtol=1e-7, atol=1e-12)
