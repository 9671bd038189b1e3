"""Hybrid target attention: group layer norm, GQA full and target layers, the stack.

Tensors are batched and right-padded: ``x`` is (B, N, d_model) and the mask
is (B, N, N) with zero rows/columns on padding. Padding never leaks into real
tokens because every masked score is multiplied by zero before SiLU and
SiLU(0) = 0.
"""

from __future__ import annotations

import contextlib
import contextvars
from functools import cached_property
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from mtfm.config import ModelConfig
from mtfm.data import FeatureSpace
from mtfm.errors import ConfigurationError, DimensionError
from mtfm.mask import build_mask_batch
from mtfm.tokenizer import TokenKind, TokenMeta


class GroupIndex:
    """Maps (token kind, group id) to a row of the GLN parameter tables.

    One group per historical sequence, per realtime sequence and per scenario.
    """

    def __init__(self, space: FeatureSpace):
        keys = [(TokenKind.H, s.seq_id) for s in space.hist_schemas]
        keys += [(TokenKind.R, s.seq_id) for s in space.rt_schemas]
        keys += [(TokenKind.T, s.scenario_id) for s in space.scenarios]
        self.keys = keys
        self._index = {k: i for i, k in enumerate(keys)}

    def __len__(self):
        return len(self.keys)

    def index(self, kind: TokenKind, group_id: int) -> int:
        try:
            return self._index[(kind, group_id)]
        except KeyError:
            raise ConfigurationError(f"no GLN group for {kind.value}-tokens of group {group_id}") from None

    def indices(self, metas: Sequence[TokenMeta]) -> torch.Tensor:
        return torch.tensor([self.index(m.kind, m.group_id) for m in metas], dtype=torch.long)


def gln(x: torch.Tensor, group_idx: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = 1e-6):
    """Per-token standardization followed by a per-group affine map."""
    xc = x - x.mean(dim=-1, keepdim=True)
    var = (xc * xc).mean(dim=-1, keepdim=True)
    return xc * torch.rsqrt(var + eps) * gain[group_idx] + bias[group_idx]


class GroupLayerNorm(nn.Module):
    def __init__(self, n_groups: int, dim: int, eps: float = 1e-6):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(n_groups, dim))
        self.bias = nn.Parameter(torch.zeros(n_groups, dim))
        self.eps = eps

    def forward(self, x, group_idx):
        if group_idx.numel() and int(group_idx.max()) >= self.gain.shape[0]:
            raise ConfigurationError("token group outside the GLN parameter table")
        return gln(x, group_idx, self.gain, self.bias, self.eps)


# --------------------------------------------------------------------------
# MAC instrumentation

_COUNTER: contextvars.ContextVar[MacCounter | None] = contextvars.ContextVar("mtfm_mac_counter", default=None)


@dataclass
class LayerMacs:
    kind: str
    attention: int = 0
    projection: int = 0
    live_bytes: int = 0


@dataclass
class MacCounter:
    """Multiply-accumulate tally of the attention stack, filled in by the layers."""

    layers: list[LayerMacs] = field(default_factory=list)

    def begin(self, kind: str) -> LayerMacs:
        self.layers.append(LayerMacs(kind))
        return self.layers[-1]

    @property
    def attention(self) -> int:
        return sum(layer.attention for layer in self.layers)

    @property
    def projection(self) -> int:
        return sum(layer.projection for layer in self.layers)

    @property
    def peak_bytes(self) -> int:
        return max((layer.live_bytes for layer in self.layers), default=0)


@contextlib.contextmanager
def counting_macs():
    counter = MacCounter()
    token = _COUNTER.set(counter)
    try:
        yield counter
    finally:
        _COUNTER.reset(token)


def _project(linear: nn.Linear, x: torch.Tensor, tally: LayerMacs | None) -> torch.Tensor:
    y = linear(x)
    if tally is not None:
        rows = x.numel() // x.shape[-1]
        tally.projection += rows * linear.in_features * linear.out_features
        tally.live_bytes += y.numel() * y.element_size()
    return y


# --------------------------------------------------------------------------
# attention core


@dataclass
class AttentionContext:
    """Per-batch tensors shared by every layer of the stack."""

    mask: torch.Tensor  # (B, N, N), 0/1 in the compute dtype
    group_idx: torch.Tensor  # (B, N)
    lengths: torch.Tensor  # (B,)
    t_index: torch.Tensor  # (B, L_T_max) positions of T tokens, 0 on padding
    t_valid: torch.Tensor  # (B, L_T_max) bool
    attn_norm: str = "valid"

    @cached_property
    def mask_t(self) -> torch.Tensor:
        return torch.gather(self.mask, 1, self.t_index[..., None].expand(-1, -1, self.mask.shape[-1])) * self.t_valid[..., None]

    @cached_property
    def t_group_idx(self) -> torch.Tensor:
        return torch.gather(self.group_idx, 1, self.t_index)

    def gather_t(self, x: torch.Tensor) -> torch.Tensor:
        return torch.gather(x, 1, self.t_index[..., None].expand(-1, -1, x.shape[-1]))

    def scatter_t(self, x: torch.Tensor, x_t: torch.Tensor) -> torch.Tensor:
        """Replace the T rows of ``x`` by ``x_t``; other rows are passed through untouched."""
        b, j = self.t_valid.nonzero(as_tuple=True)
        return x.index_put((b, self.t_index[b, j]), x_t[b, j])

    @classmethod
    def build(cls, metas: Sequence[Sequence[TokenMeta]], groups: GroupIndex, dtype=torch.float32, attn_norm="valid"):
        n_max = max((len(m) for m in metas), default=0)
        mask = build_mask_batch(metas, n_max).to(dtype)
        group_idx = torch.zeros(len(metas), n_max, dtype=torch.long)
        t_pos = []
        for b, m in enumerate(metas):
            if m:
                group_idx[b, : len(m)] = groups.indices(m)
            t_pos.append([i for i, meta in enumerate(m) if meta.kind is TokenKind.T])
        lt_max = max((len(p) for p in t_pos), default=0)
        t_index = torch.zeros(len(metas), lt_max, dtype=torch.long)
        t_valid = torch.zeros(len(metas), lt_max, dtype=torch.bool)
        for b, p in enumerate(t_pos):
            t_index[b, : len(p)] = torch.tensor(p, dtype=torch.long)
            t_valid[b, : len(p)] = True
        lengths = torch.tensor([len(m) for m in metas], dtype=dtype)
        return cls(mask, group_idx, lengths, t_index, t_valid, attn_norm)


def attend(q, k, v, mask, *, attn_norm: str, lengths=None, tally: LayerMacs | None = None):
    """Pointwise (SiLU) grouped-query attention.

    q: (B, Nq, H, dh); k, v: (B, Nk, G, dh); mask: (B, Nq, Nk).
    Query head h reads key/value head h // (H / G).
    Returns the concatenated head outputs (B, Nq, H*dh) and the weights (B, H, Nq, Nk).
    """
    bsz, nq, n_heads, dh = q.shape
    nk, n_kv = k.shape[1], k.shape[2]
    if n_heads % n_kv:
        raise DimensionError(f"{n_heads} query heads cannot share {n_kv} key/value heads")
    r = n_heads // n_kv
    qg = q.reshape(bsz, nq, n_kv, r, dh).permute(0, 2, 3, 1, 4)  # (B, G, r, Nq, dh)
    kg = k.permute(0, 2, 1, 3)[:, :, None]  # (B, G, 1, Nk, dh)
    vg = v.permute(0, 2, 1, 3)[:, :, None]
    scores = qg @ kg.transpose(-1, -2)
    weights = F.silu(scores * mask[:, None, None])
    if attn_norm == "valid":
        denom = mask.sum(dim=-1).clamp(min=1.0)[:, None, None, :, None]
        weights = weights / denom
    elif attn_norm == "seq_len":
        weights = weights / lengths.to(weights.dtype)[:, None, None, None, None]
    elif attn_norm != "none":
        raise ConfigurationError(f"unknown attention normalization {attn_norm!r}")
    out = weights @ vg  # (B, G, r, Nq, dh)
    if tally is not None:
        tally.attention += 2 * bsz * n_heads * nq * nk * dh
        tally.live_bytes += 2 * scores.numel() * scores.element_size() + out.numel() * out.element_size()
    out = out.permute(0, 3, 1, 2, 4).reshape(bsz, nq, n_heads * dh)
    return out, weights.reshape(bsz, n_heads, nq, nk)


# --------------------------------------------------------------------------
# layers


class FullAttentionLayer(nn.Module):
    """Every token attends under the full mask and every row is updated."""

    kind = "full"

    def __init__(self, cfg: ModelConfig, n_groups: int):
        super().__init__()
        self.cfg = cfg
        h, g, dh = cfg.heads, cfg.kv_heads, cfg.head_dim
        self.split = (h * dh, h * dh, g * dh, g * dh)  # U, Q, K, V
        self.f1 = nn.Linear(cfg.d_model, sum(self.split))
        self.f2 = nn.Linear(h * dh, cfg.d_model)
        self.norm_in = GroupLayerNorm(n_groups, cfg.d_model, cfg.norm_eps)
        self.norm_attn = GroupLayerNorm(n_groups, h * dh, cfg.norm_eps)
        if cfg.zero_init_output:
            nn.init.zeros_(self.f2.weight)
            nn.init.zeros_(self.f2.bias)

    def forward(self, x: torch.Tensor, ctx: AttentionContext, trace: list | None = None):
        counter = _COUNTER.get()
        tally = counter.begin(self.kind) if counter is not None else None
        cfg = self.cfg
        bsz, n, _ = x.shape
        xn = self.norm_in(x, ctx.group_idx)
        u, q, k, v = torch.split(F.silu(_project(self.f1, xn, tally)), self.split, dim=-1)
        a, w = attend(
            q.reshape(bsz, n, cfg.heads, cfg.head_dim),
            k.reshape(bsz, n, cfg.kv_heads, cfg.head_dim),
            v.reshape(bsz, n, cfg.kv_heads, cfg.head_dim),
            ctx.mask,
            attn_norm=ctx.attn_norm,
            lengths=ctx.lengths,
            tally=tally,
        )
        if trace is not None:
            trace.append((self.kind, w.detach()))
        return _project(self.f2, self.norm_attn(a, ctx.group_idx) * u, tally) + x


class TargetAttentionLayer(nn.Module):
    """Only T rows are queried and updated; keys/values come from every token."""

    kind = "target"

    def __init__(self, cfg: ModelConfig, n_groups: int):
        super().__init__()
        self.cfg = cfg
        h, g, dh = cfg.heads, cfg.kv_heads, cfg.head_dim
        self.split_uq = (h * dh, h * dh)
        self.split_kv = (g * dh, g * dh)
        self.f_uq = nn.Linear(cfg.d_model, 2 * h * dh)
        self.f_kv = nn.Linear(cfg.d_model, 2 * g * dh)
        self.f2 = nn.Linear(h * dh, cfg.d_model)
        self.norm_in = GroupLayerNorm(n_groups, cfg.d_model, cfg.norm_eps)
        self.norm_attn = GroupLayerNorm(n_groups, h * dh, cfg.norm_eps)
        if cfg.zero_init_output:
            nn.init.zeros_(self.f2.weight)
            nn.init.zeros_(self.f2.bias)

    @classmethod
    @torch.no_grad()
    def from_full(cls, full: FullAttentionLayer, n_groups: int) -> TargetAttentionLayer:
        """Target layer sharing every weight with ``full`` (f1 rows split into f_uq / f_kv)."""
        layer = cls(full.cfg, n_groups).to(full.f1.weight.dtype)
        cut = sum(full.split[:2])
        layer.f_uq.weight.copy_(full.f1.weight[:cut])
        layer.f_uq.bias.copy_(full.f1.bias[:cut])
        layer.f_kv.weight.copy_(full.f1.weight[cut:])
        layer.f_kv.bias.copy_(full.f1.bias[cut:])
        layer.f2.load_state_dict(full.f2.state_dict())
        layer.norm_in.load_state_dict(full.norm_in.state_dict())
        layer.norm_attn.load_state_dict(full.norm_attn.state_dict())
        return layer

    def forward(self, x: torch.Tensor, ctx: AttentionContext, trace: list | None = None):
        counter = _COUNTER.get()
        tally = counter.begin(self.kind) if counter is not None else None
        cfg = self.cfg
        bsz, n, _ = x.shape
        lt = ctx.t_index.shape[1]
        xn = self.norm_in(x, ctx.group_idx)
        x_t = ctx.gather_t(x)
        u, q = torch.split(F.silu(_project(self.f_uq, ctx.gather_t(xn), tally)), self.split_uq, dim=-1)
        k, v = torch.split(F.silu(_project(self.f_kv, xn, tally)), self.split_kv, dim=-1)
        a, w = attend(
            q.reshape(bsz, lt, cfg.heads, cfg.head_dim),
            k.reshape(bsz, n, cfg.kv_heads, cfg.head_dim),
            v.reshape(bsz, n, cfg.kv_heads, cfg.head_dim),
            ctx.mask_t,
            attn_norm=ctx.attn_norm,
            lengths=ctx.lengths,
            tally=tally,
        )
        if trace is not None:
            trace.append((self.kind, w.detach()))
        new_t = _project(self.f2, self.norm_attn(a, ctx.t_group_idx) * u, tally) + x_t
        return ctx.scatter_t(x, new_t)


class HTAStack(nn.Module):
    """``blocks`` repetitions of (target_layers target layers, then full_layers full layers)."""

    def __init__(self, cfg: ModelConfig, n_groups: int):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        make = {"target": TargetAttentionLayer, "full": FullAttentionLayer}
        self.layers = nn.ModuleList(make[kind](cfg, n_groups) for kind in cfg.layer_kinds())

    def forward(self, x: torch.Tensor, ctx: AttentionContext, trace: list | None = None) -> torch.Tensor:
        for layer in self.layers:
            x = layer(x, ctx, trace)
        return x


# --------------------------------------------------------------------------
# single-sequence conveniences


def _single_ctx(metas, groups, mask, dtype, attn_norm):
    ctx = AttentionContext.build([metas], groups, dtype, attn_norm)
    if mask is not None:
        mask = torch.as_tensor(np.asarray(mask), dtype=dtype)
        if mask.shape != ctx.mask.shape[1:]:
            raise DimensionError(f"mask shape {tuple(mask.shape)} does not match {len(metas)} tokens")
        ctx.mask = mask[None]
    return ctx


def full_attention_layer(x, metas, layer: FullAttentionLayer, groups: GroupIndex, mask=None):
    """Apply a full layer to one (N, d_model) sequence. ``mask`` defaults to the dynamic mask."""
    ctx = _single_ctx(metas, groups, mask, x.dtype, layer.cfg.attn_norm)
    return layer(x[None], ctx)[0]


def target_attention_layer(x, metas, layer: TargetAttentionLayer, groups: GroupIndex, mask=None):
    ctx = _single_ctx(metas, groups, mask, x.dtype, layer.cfg.attn_norm)
    return layer(x[None], ctx)[0]


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def stack_param_count(cfg: ModelConfig, n_groups: int) -> int:
    """Closed-form parameter count of an HTAStack."""
    d, h, g, dh = cfg.d_model, cfg.heads, cfg.kv_heads, cfg.head_dim
    norms = 2 * n_groups * d + 2 * n_groups * h * dh
    out = h * dh * d + d
    full = d * (2 * h * dh + 2 * g * dh) + (2 * h * dh + 2 * g * dh) + out + norms
    target = d * 2 * h * dh + 2 * h * dh + d * 2 * g * dh + 2 * g * dh + out + norms
    return cfg.blocks * (cfg.target_layers * target + cfg.full_layers * full)


def dump_trace(trace: Sequence[tuple[str, torch.Tensor]], sample: int = 0) -> str:
    """Text dump of traced attention weights for one sequence of the batch.

    Per layer: a ``# layer <i> <kind> shape <H> <rows> <cols>`` header, then
    one line per (head, row) of space-separated values in row-major order.
    """
    lines = []
    for i, (kind, w) in enumerate(trace):
        w = w[sample]
        lines.append(f"# layer {i} {kind} shape {' '.join(str(s) for s in w.shape)}")
        for row in w.reshape(-1, w.shape[-1]).tolist():
            lines.append(" ".join(f"{v:.8g}" for v in row))
    return "\n".join(lines) + "\n"


def load_trace(text: str) -> list[tuple[str, np.ndarray]]:
    out, kind, shape, rows = [], None, None, []

    def flush():
        if kind is not None:
            out.append((kind, np.array(rows, dtype=np.float64).reshape(shape)))

    for line in text.splitlines():
        if line.startswith("# layer"):
            flush()
            parts = line.split()
            kind, shape, rows = parts[3], tuple(int(s) for s in parts[5:]), []
        elif line.strip():
            rows.append([float(v) for v in line.split()])
    flush()
    return out
