"""MMoE prediction head, multi-task BCE loss, AUC and GAUC."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch
from scipy.stats import rankdata
from torch import nn
from torch.nn import functional as F

from mtfm.data import FeatureSpace
from mtfm.errors import ConfigurationError, MTFMError

PROB_EPS = 1e-7


@dataclass(frozen=True)
class PredictionRecord:
    user_id: int
    scenario_id: int
    exposure_index: int
    task: str
    probability: float
    label: int | None = None


def head_key(scenario_id: int, task: str) -> str:
    return f"s{scenario_id}_{task}"


class MMoE(nn.Module):
    """Shared experts mixed by a softmax gate per (scenario, task), one logit tower each."""

    def __init__(self, space: FeatureSpace, d_model: int, n_experts: int = 4, d_expert: int | None = None):
        super().__init__()
        d_expert = d_model if d_expert is None else d_expert
        self.tasks = {s.scenario_id: s.tasks for s in space.scenarios}
        self.experts = nn.ModuleList(nn.Sequential(nn.Linear(d_model, d_expert), nn.SiLU()) for _ in range(n_experts))
        keys = [head_key(s, t) for s, tasks in self.tasks.items() for t in tasks]
        self.gates = nn.ModuleDict({k: nn.Linear(d_model, n_experts) for k in keys})
        self.towers = nn.ModuleDict({k: nn.Linear(d_expert, 1) for k in keys})

    def gate(self, key: str, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.gates[key](x), dim=-1)

    def forward(self, x: torch.Tensor, scenarios: Sequence[int]) -> tuple[torch.Tensor, list[tuple[int, str]]]:
        """Logits for every (token, task of the token's scenario).

        Returns the flat logits ordered by token then task, and the matching
        (token row, task) index.
        """
        scen = torch.as_tensor(list(scenarios), dtype=torch.long)
        unknown = set(scen.tolist()) - set(self.tasks)
        if unknown:
            raise ConfigurationError(f"no heads for scenario(s) {sorted(unknown)}")
        if len(scen) == 0:
            return x.new_zeros(0), []
        expert_out = torch.stack([e(x) for e in self.experts], dim=1)  # (n, E, d_expert)
        pieces, positions, index = [], [], []
        offsets = _record_offsets(scen.tolist(), self.tasks)
        for s in sorted(set(scen.tolist())):
            rows = (scen == s).nonzero(as_tuple=True)[0]
            for j, task in enumerate(self.tasks[s]):
                key = head_key(s, task)
                mix = (self.gate(key, x[rows])[..., None] * expert_out[rows]).sum(dim=1)
                pieces.append(self.towers[key](mix)[:, 0])
                positions.extend(offsets[r] + j for r in rows.tolist())
        logits = torch.cat(pieces)
        order = torch.argsort(torch.tensor(positions))
        for r, s in enumerate(scen.tolist()):
            index.extend((r, t) for t in self.tasks[s])
        return logits[order], index


def _record_offsets(scenarios, tasks):
    out, acc = [], 0
    for s in scenarios:
        out.append(acc)
        acc += len(tasks[s])
    return out


def mmoe_forward(t_embeddings: torch.Tensor, t_metas, head: MMoE, user_id: int = -1) -> list[PredictionRecord]:
    logits, index = head(t_embeddings, [m.group_id for m in t_metas])
    probs = torch.sigmoid(logits).tolist()
    return [
        PredictionRecord(user_id, t_metas[r].group_id, t_metas[r].exposure_ref, task, p)
        for (r, task), p in zip(index, probs)
    ]


# --------------------------------------------------------------------------
# loss


class UndefinedLoss(MTFMError):
    pass


def bce_from_logits(logits: torch.Tensor, labels: torch.Tensor, weights: torch.Tensor | None = None) -> torch.Tensor:
    """Mean binary cross-entropy with probabilities clamped to [eps, 1 - eps]."""
    if logits.numel() == 0:
        raise UndefinedLoss("loss over an empty record set")
    p = torch.sigmoid(logits).clamp(PROB_EPS, 1 - PROB_EPS)
    per = -(labels * torch.log(p) + (1 - labels) * torch.log1p(-p))
    if weights is None:
        return per.mean()
    return (per * weights).sum() / weights.sum()


def multitask_loss(records: Sequence[PredictionRecord], task_weights: dict[str, float] | None = None) -> float:
    if not records:
        raise UndefinedLoss("loss over an empty record set")
    if any(r.label is None for r in records):
        raise UndefinedLoss("records without labels")
    probs = torch.tensor([r.probability for r in records], dtype=torch.float64)
    logits = torch.logit(probs.clamp(PROB_EPS, 1 - PROB_EPS))
    labels = torch.tensor([float(r.label) for r in records], dtype=torch.float64)
    weights = None
    if task_weights is not None:
        weights = torch.tensor([task_weights.get(r.task, 1.0) for r in records], dtype=torch.float64)
    return float(bce_from_logits(logits, labels, weights))


# --------------------------------------------------------------------------
# metrics


def auc(labels: Sequence[int], scores: Sequence[float]) -> float | None:
    """Rank-statistic AUC with midranks for ties; None when a class is missing."""
    y = np.asarray(labels, dtype=bool)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(np.asarray(scores, dtype=np.float64), method="average")
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def gauc(groups: Sequence[int], labels: Sequence[int], scores: Sequence[float]) -> float | None:
    """Exposure-count weighted mean of per-group AUC over groups holding both classes."""
    by_group: dict[int, list[int]] = defaultdict(list)
    for i, g in enumerate(groups):
        by_group[g].append(i)
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    num = den = 0.0
    for idx in by_group.values():
        a = auc(labels[idx], scores[idx])
        if a is not None:
            num += len(idx) * a
            den += len(idx)
    return num / den if den else None


def records_auc(records: Iterable[PredictionRecord]) -> float | None:
    records = list(records)
    return auc([r.label for r in records], [r.probability for r in records])


def records_gauc(records: Iterable[PredictionRecord]) -> float | None:
    records = list(records)
    return gauc([r.user_id for r in records], [r.label for r in records], [r.probability for r in records])


def evaluation_table(records: Sequence[PredictionRecord]) -> list[dict]:
    """Per-scenario, per-task AUC/GAUC rows (plus pooled rows per task, scenario 'all')."""
    groups: dict[tuple, list[PredictionRecord]] = defaultdict(list)
    for r in records:
        if r.label is None:
            continue
        groups[(r.scenario_id, r.task)].append(r)
        groups[("all", r.task)].append(r)
    rows = []
    for (s, task), recs in sorted(groups.items(), key=lambda kv: (str(kv[0][0]), kv[0][1])):
        rows.append(
            {
                "scenario": s,
                "task": task,
                "n": len(recs),
                "positives": sum(r.label for r in recs),
                "auc": records_auc(recs),
                "gauc": records_gauc(recs),
            }
        )
    return rows


def format_table(rows: Sequence[dict]) -> str:
    def fmt(v):
        if v is None:
            return "n/a"
        if isinstance(v, float):
            return f"{v:.4f}" if math.isfinite(v) else "nan"
        return str(v)

    cols = list(rows[0]) if rows else ["scenario", "task", "n", "positives", "auc", "gauc"]
    lines = ["\t".join(cols)]
    lines += ["\t".join(fmt(r[c]) for c in cols) for r in rows]
    return "\n".join(lines)
