"""Inference-side tooling: scenario subgraphs, request-level inference, MAC
accounting for the hybrid stack, 2:4 structured pruning and the throughput bench.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import torch
from torch import nn

from mtfm.config import ModelConfig, parse_layout
from mtfm.data import FeatureSpace, InferenceRequest, default_space, validate_request
from mtfm.errors import ConfigurationError, IntegrityError
from mtfm.heads import PredictionRecord, evaluation_table
from mtfm.hta import (
    AttentionContext,
    FullAttentionLayer,
    GroupIndex,
    GroupLayerNorm,
    HTAStack,
    LayerMacs,
    TargetAttentionLayer,
    count_parameters,
    counting_macs,
)
from mtfm.model import MTFM
from mtfm.tokenizer import TokenKind, TokenMeta

# --------------------------------------------------------------------------
# scenario subgraphs


@dataclass
class ScenarioSubgraph:
    scenario_id: int
    model: MTFM

    def parameter_count(self) -> int:
        return count_parameters(self.model)


@torch.no_grad()
def extract_subgraph(full: MTFM, scenario_id: int) -> ScenarioSubgraph:
    """Copy of ``full`` keeping shared weights plus only ``scenario_id``'s own parameters."""
    if scenario_id not in full.space.scenario_ids:
        raise ConfigurationError(f"scenario {scenario_id} is not part of the model")
    sub = MTFM(full.space.restricted(scenario_id), full.cfg).to(full.dtype)
    src = dict(full.named_parameters())
    norm_names = {name for name, mod in sub.named_modules() if isinstance(mod, GroupLayerNorm)}
    rows = torch.tensor([full.groups.index(kind, gid) for kind, gid in sub.groups.keys])
    for name, p in sub.named_parameters():
        owner = name.rsplit(".", 1)[0]
        p.copy_(src[name][rows] if owner in norm_names else src[name])
    sub.eval()
    return ScenarioSubgraph(scenario_id, sub)


@torch.no_grad()
def infer_request(request: InferenceRequest, subgraph: ScenarioSubgraph) -> list[PredictionRecord]:
    """Score every candidate of a request in one packed forward pass."""
    if request.scenario_id != subgraph.scenario_id:
        raise IntegrityError(
            f"request for scenario {request.scenario_id} sent to the scenario {subgraph.scenario_id} subgraph"
        )
    validate_request(request, subgraph.model.space)
    sample = request.as_sample()
    return subgraph.model([sample]).records([sample])


# --------------------------------------------------------------------------
# MAC accounting


@dataclass
class MacReport:
    layers: list[LayerMacs]
    n_tokens: int
    n_targets: int
    measured: list[LayerMacs] | None = None

    @property
    def attention(self) -> int:
        return sum(layer.attention for layer in self.layers)

    @property
    def projection(self) -> int:
        return sum(layer.projection for layer in self.layers)

    @property
    def total(self) -> int:
        return self.attention + self.projection

    @property
    def exact(self) -> bool | None:
        """Whether instrumented counts equal the analytic ones (None if not measured)."""
        if self.measured is None:
            return None
        return [(m.kind, m.attention, m.projection) for m in self.measured] == [
            (a.kind, a.attention, a.projection) for a in self.layers
        ]

    @property
    def measured_over_predicted(self) -> float | None:
        if self.measured is None:
            return None
        return sum(m.attention + m.projection for m in self.measured) / self.total


def layer_macs(kind: str, cfg: ModelConfig, n: int, l_t: int) -> LayerMacs:
    """Analytic MACs of one layer over a sequence of ``n`` tokens with ``l_t`` targets."""
    d, h, g, dh = cfg.d_model, cfg.heads, cfg.kv_heads, cfg.head_dim
    if kind == "full":
        attention = 2 * h * n * n * dh  # scores + weighted sum
        projection = n * d * (2 * h * dh + 2 * g * dh) + n * h * dh * d
    elif kind == "target":
        attention = 2 * h * l_t * n * dh
        projection = l_t * d * 2 * h * dh + n * d * 2 * g * dh + l_t * h * dh * d
    else:
        raise ValueError(kind)
    return LayerMacs(kind, attention, projection)


def count_macs(cfg: ModelConfig, n: int, l_t: int) -> MacReport:
    if n < 1 or not 0 <= l_t <= n:
        raise ValueError("need n >= 1 and 0 <= l_t <= n")
    return MacReport([layer_macs(k, cfg, n, l_t) for k in cfg.layer_kinds()], n, l_t)


def synthetic_tokens(n: int, l_t: int, d_model: int, seed: int = 0, dtype=torch.float32):
    """Random token sequence with ``l_t`` T tokens, the rest split 2:1 into H and R."""
    rng = np.random.default_rng(seed)
    n_ctx = n - l_t
    l_h = (2 * n_ctx) // 3
    l_r = n_ctx - l_h
    metas = [TokenMeta(TokenKind.H, int(rng.integers(0, 2)), t) for t in np.sort(rng.integers(0, 1000, size=l_h))]
    metas += [TokenMeta(TokenKind.R, 0, t) for t in np.sort(rng.integers(900, 1100, size=l_r))]
    metas += [TokenMeta(TokenKind.T, 0, 1000, i) for i in range(l_t)]
    x = torch.from_numpy(rng.normal(size=(n, d_model))).to(dtype)
    return metas, x


def _synthetic_groups() -> GroupIndex:
    return GroupIndex(default_space(1, 4))


@torch.no_grad()
def instrumented_macs(cfg: ModelConfig, n: int, l_t: int, seed: int = 0) -> MacReport:
    """Analytic report with the counts observed while running the stack attached."""
    report = count_macs(cfg, n, l_t)
    groups = _synthetic_groups()
    torch.manual_seed(seed)
    stack = HTAStack(cfg, len(groups))
    metas, x = synthetic_tokens(n, l_t, cfg.d_model, seed)
    ctx = AttentionContext.build([metas], groups, x.dtype, cfg.attn_norm)
    with counting_macs() as counter:
        stack(x[None], ctx)
    report.measured = counter.layers
    return report


def hybrid_ratio_formula(k: int, n: int, l_t: int) -> float:
    """Per-layer attention cost of a (K:1) block relative to K+1 full layers."""
    return (k * n * l_t + n * n) / ((k + 1) * n * n)


@dataclass
class ComplexityCheck:
    k: int
    n: int
    l_t: int
    predicted: float
    measured: float
    exact_counts: bool

    @property
    def rel_error(self) -> float:
        return abs(self.measured - self.predicted) / self.predicted

    def passed(self, tol: float = 0.10) -> bool:
        return self.exact_counts and self.rel_error <= tol


def verify_complexity(
    base: ModelConfig, sizes: Sequence[tuple[int, int]], ks: Sequence[int] = (1, 3, 5), blocks: int = 1
) -> list[ComplexityCheck]:
    """Instrumented hybrid/full attention-MAC ratios against the closed form."""
    out = []
    for k in ks:
        hybrid = replace(base, target_layers=k, full_layers=1, blocks=blocks)
        full = replace(base, target_layers=0, full_layers=1, blocks=blocks * (k + 1))
        for n, l_t in sizes:
            rh = instrumented_macs(hybrid, n, l_t)
            rf = instrumented_macs(full, n, l_t)
            measured = sum(m.attention for m in rh.measured) / sum(m.attention for m in rf.measured)
            out.append(ComplexityCheck(k, n, l_t, hybrid_ratio_formula(k, n, l_t), measured, bool(rh.exact and rf.exact)))
    return out


# --------------------------------------------------------------------------
# 2:4 structured pruning


@dataclass
class PrunePattern:
    keep: torch.Tensor  # bool, same shape as the weight
    covered_cols: int  # columns inside complete groups of 4
    exempt_cols: int  # trailing columns left dense

    @property
    def covered_sparsity(self) -> float:
        covered = self.keep[:, : self.covered_cols]
        return 1.0 - covered.float().mean().item() if covered.numel() else 0.0


def prune_2_4(weight: torch.Tensor) -> tuple[torch.Tensor, PrunePattern]:
    """Zero the 2 smallest-magnitude entries of every contiguous group of 4
    along the input (reduction) dimension. Trailing columns that do not fill
    a group are left dense and reported as exempt.
    """
    if weight.numel() == 0:
        warnings.warn("prune_2_4 on an empty matrix is a no-op", stacklevel=2)
        return weight.clone(), PrunePattern(torch.ones_like(weight, dtype=torch.bool), 0, weight.shape[-1] if weight.ndim else 0)
    if weight.ndim != 2:
        raise ValueError("prune_2_4 expects a 2-D (out, in) weight")
    rows, cols = weight.shape
    covered = cols - cols % 4
    keep = torch.ones_like(weight, dtype=torch.bool)
    if covered:
        groups = weight[:, :covered].detach().abs().reshape(rows, covered // 4, 4)
        # stable sort: among equal magnitudes the earlier entries are pruned first
        order = torch.sort(groups, dim=-1, stable=True).indices
        group_keep = torch.ones_like(groups, dtype=torch.bool)
        group_keep.scatter_(-1, order[..., :2], False)
        keep[:, :covered] = group_keep.reshape(rows, covered)
    return weight * keep, PrunePattern(keep, covered, cols - covered)


def projection_layers(model: nn.Module) -> dict[str, nn.Linear]:
    """UVQK and output projections of every attention layer."""
    out = {}
    for name, mod in model.named_modules():
        if isinstance(mod, FullAttentionLayer):
            out[f"{name}.f1"] = mod.f1
            out[f"{name}.f2"] = mod.f2
        elif isinstance(mod, TargetAttentionLayer):
            out[f"{name}.f_uq"] = mod.f_uq
            out[f"{name}.f_kv"] = mod.f_kv
            out[f"{name}.f2"] = mod.f2
    return out


@torch.no_grad()
def prune_model(model: nn.Module) -> dict[str, PrunePattern]:
    """Apply 2:4 pruning in place to every attention projection; returns the patterns."""
    patterns = {}
    for name, linear in projection_layers(model).items():
        pruned, pattern = prune_2_4(linear.weight)
        linear.weight.copy_(pruned)
        patterns[name] = pattern
    return patterns


def check_2_4(weight: torch.Tensor) -> bool:
    """Every complete group of 4 along the input dimension holds exactly 2 zeros."""
    cols = weight.shape[1] - weight.shape[1] % 4
    zeros = (weight[:, :cols] == 0).reshape(weight.shape[0], -1, 4).sum(-1)
    return bool((zeros == 2).all())


def pruning_report(model: MTFM, samples) -> dict:
    """Prune a copy of ``model`` and compare held-out AUCs before and after."""
    import copy

    before = evaluation_table(model.predict(samples))
    pruned = copy.deepcopy(model)
    patterns = prune_model(pruned)
    after = evaluation_table(pruned.predict(samples))
    rows = []
    for b, a in zip(before, after):
        delta = None if a["auc"] is None or b["auc"] is None else a["auc"] - b["auc"]
        rows.append({"scenario": b["scenario"], "task": b["task"], "auc_dense": b["auc"], "auc_pruned": a["auc"], "delta": delta})
    return {
        "layers": len(patterns),
        "valid_2_4": all(check_2_4(lin.weight) for lin in projection_layers(pruned).values()),
        "covered_sparsity": min(p.covered_sparsity for p in patterns.values()),
        "rows": rows,
        "model": pruned,
    }


# --------------------------------------------------------------------------
# benchmark

BENCH_COLUMNS = (
    "config",
    "kv",
    "layers",
    "N",
    "L_T",
    "attention_MACs",
    "attention_MACs_per_layer",
    "projection_MACs",
    "kv_params",
    "tokens_per_sec",
    "peak_bytes",
    "threads",
)


def kv_param_count(cfg: ModelConfig) -> int:
    """Parameters of the K/V projections (weights and biases) across the stack."""
    per_layer = (cfg.d_model + 1) * 2 * cfg.kv_heads * cfg.head_dim
    return per_layer * cfg.blocks * (cfg.target_layers + cfg.full_layers)


@dataclass
class BenchResult:
    rows: list[dict] = field(default_factory=list)
    monotone: bool = True

    def to_tsv(self) -> str:
        lines = ["\t".join(BENCH_COLUMNS)]
        for r in self.rows:
            lines.append("\t".join(f"{r[c]:.1f}" if isinstance(r[c], float) else str(r[c]) for c in BENCH_COLUMNS))
        return "\n".join(lines) + "\n"


def bench_config(layout: str, kv: str, base: ModelConfig) -> ModelConfig:
    k, p, b = parse_layout(layout)
    kv_heads = base.heads if kv == "G=H" else 1
    return replace(base, target_layers=k, full_layers=p, blocks=b, kv_heads=kv_heads)


def bench(
    layouts: Sequence[str],
    sizes: Sequence[Sequence[int]],
    kv_variants: Sequence[str] = ("G=H", "G=1"),
    base: ModelConfig | None = None,
    repeats: int = 2,
    threads: int = 1,
    dtype=torch.float32,
) -> BenchResult:
    """Throughput (forward + backward) and instrumented MACs for each configuration."""
    base = base or ModelConfig()
    torch.set_num_threads(threads)
    groups = _synthetic_groups()
    result = BenchResult()
    for kv in kv_variants:
        for n, l_t in sizes:
            for layout in layouts:
                cfg = bench_config(layout, kv, base)
                torch.manual_seed(0)
                stack = HTAStack(cfg, len(groups)).to(dtype)
                metas, x = synthetic_tokens(n, l_t, cfg.d_model, dtype=dtype)
                ctx = AttentionContext.build([metas], groups, dtype, cfg.attn_norm)
                with torch.no_grad(), counting_macs() as counter:
                    stack(x[None], ctx)
                timings = []
                for _ in range(repeats):
                    xi = x[None].clone().requires_grad_(True)
                    t0 = time.perf_counter()
                    stack(xi, ctx).sum().backward()
                    timings.append(time.perf_counter() - t0)
                n_layers = len(cfg.layer_kinds())
                label = layout + (" lazy decoder" if cfg.full_layers == 0 else "")
                result.rows.append(
                    {
                        "config": label,
                        "kv": kv,
                        "layers": n_layers,
                        "N": n,
                        "L_T": l_t,
                        "attention_MACs": counter.attention,
                        "attention_MACs_per_layer": counter.attention // n_layers,
                        "projection_MACs": counter.projection,
                        "kv_params": kv_param_count(cfg),
                        "tokens_per_sec": n / min(timings),
                        "peak_bytes": counter.peak_bytes,
                        "threads": threads,
                    }
                )
    result.monotone = check_monotone(result.rows)
    return result


def _sparsity(label: str) -> float:
    k, p, _ = parse_layout(label.split()[0])
    return float("inf") if p == 0 else k / p


def check_monotone(rows: Sequence[dict]) -> bool:
    """Per-layer attention MACs strictly fall as K:P grows, at fixed blocks, kv and size."""
    by_key: dict[tuple, list[tuple[float, int]]] = {}
    for r in rows:
        _, _, b = parse_layout(r["config"].split()[0])
        by_key.setdefault((r["kv"], r["N"], r["L_T"], b), []).append((_sparsity(r["config"]), r["attention_MACs_per_layer"]))
    for entries in by_key.values():
        entries.sort()
        for (s0, m0), (s1, m1) in zip(entries, entries[1:]):
            if s1 > s0 and not m1 < m0:
                return False
    return True
