"""End-to-end model: tokenizer -> hybrid attention stack -> MMoE head."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

from mtfm.config import ModelConfig
from mtfm.data import FeatureSpace, UserSample
from mtfm.heads import MMoE, PredictionRecord
from mtfm.hta import AttentionContext, GroupIndex, HTAStack
from mtfm.tokenizer import TokenBatch, Tokenizer


@dataclass
class Predictions:
    """Flat logits, one per (exposure, task of its scenario), in token order per sample."""

    logits: torch.Tensor
    sample_index: list[int]
    exposure_index: list[int]
    scenario: list[int]
    task: list[str]
    labels: torch.Tensor | None

    def records(self, samples: Sequence[UserSample]) -> list[PredictionRecord]:
        probs = torch.sigmoid(self.logits.detach()).tolist()
        out = []
        for k, p in enumerate(probs):
            sample = samples[self.sample_index[k]]
            label = sample.exposures[self.exposure_index[k]].labels.get(self.task[k])
            out.append(PredictionRecord(sample.user_id, self.scenario[k], self.exposure_index[k], self.task[k], p, label))
        return out


class MTFM(nn.Module):
    def __init__(self, space: FeatureSpace, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.space = space
        self.cfg = cfg
        self.groups = GroupIndex(space)
        self.tokenizer = Tokenizer(space, cfg.d_model, cfg.d_emb)
        self.stack = HTAStack(cfg, len(self.groups))
        self.head = MMoE(space, cfg.d_model, cfg.n_experts, cfg.expert_dim)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def encode(self, samples: Sequence[UserSample], trace: list | None = None):
        """Final token embeddings; returns (token batch, attention context, (B, N, d) output)."""
        batch: TokenBatch = self.tokenizer.assemble_batch(samples)
        ctx = AttentionContext.build(batch.metas, self.groups, self.dtype, self.cfg.attn_norm)
        return batch, ctx, self.stack(batch.embeddings, ctx, trace)

    def forward(self, samples: Sequence[UserSample], trace: list | None = None) -> Predictions:
        batch, ctx, x = self.encode(samples, trace)
        x_t = ctx.gather_t(x)[ctx.t_valid]
        b_idx, j_idx = ctx.t_valid.nonzero(as_tuple=True)
        metas = [batch.metas[b][int(ctx.t_index[b, j])] for b, j in zip(b_idx.tolist(), j_idx.tolist())]
        logits, index = self.head(x_t, [m.group_id for m in metas])
        sample_index = [int(b_idx[r]) for r, _ in index]
        exposure_index = [metas[r].exposure_ref for r, _ in index]
        scenario = [metas[r].group_id for r, _ in index]
        task = [t for _, t in index]
        raw = [samples[b].exposures[e].labels.get(t) for b, e, t in zip(sample_index, exposure_index, task)]
        labels = None
        if raw and all(y is not None for y in raw):
            labels = torch.tensor(raw, dtype=logits.dtype)
        return Predictions(logits, sample_index, exposure_index, scenario, task, labels)

    @torch.no_grad()
    def predict(self, samples: Sequence[UserSample], batch_size: int = 128) -> list[PredictionRecord]:
        out = []
        for i in range(0, len(samples), batch_size):
            chunk = samples[i : i + batch_size]
            out.extend(self(chunk).records(chunk))
        return out
