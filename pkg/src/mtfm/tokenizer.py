"""Heterogeneous tokenization of a UserSample into an H/R/T token matrix.

Every source (each historical sequence, each realtime sequence, each
scenario) owns per-slot embedding tables and an MLP mapping the concatenated
slot embeddings to ``d_model``. Scenarios with different slot counts need no
padding or alignment: each goes through its own MLP.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import torch
from torch import nn

from mtfm.data import BehaviorEvent, Exposure, FeatureSpace, UserSample
from mtfm.errors import IntegrityError, VocabularyError


class TokenKind(str, Enum):
    H = "H"
    R = "R"
    T = "T"


@dataclass(frozen=True)
class TokenMeta:
    kind: TokenKind
    group_id: int  # sequence index for H/R, scenario id for T
    timestamp: int
    exposure_ref: int | None = None

    def __post_init__(self):
        if (self.kind is TokenKind.T) != (self.exposure_ref is not None):
            raise ValueError("exposure_ref is required for T tokens and forbidden otherwise")


@dataclass
class TokenSequence:
    metas: list[TokenMeta]
    embeddings: torch.Tensor  # (N, d_model)
    boundaries: tuple[int, int, int]  # (L_H, L_R, L_T)

    def __len__(self):
        return len(self.metas)


@dataclass
class TokenBatch:
    """Several token sequences right-padded to a common length."""

    metas: list[list[TokenMeta]]
    embeddings: torch.Tensor  # (B, N_max, d_model), zeros on padding
    boundaries: list[tuple[int, int, int]]

    @property
    def lengths(self) -> list[int]:
        return [sum(b) for b in self.boundaries]

    def sequence(self, i: int) -> TokenSequence:
        n = self.lengths[i]
        return TokenSequence(self.metas[i], self.embeddings[i, :n], self.boundaries[i])


class TokenizerMLP(nn.Module):
    """Linear -> SiLU -> Linear, hidden width ``2 * d_model``."""

    def __init__(self, d_in: int, d_model: int):
        super().__init__()
        self.fc1 = nn.Linear(d_in, 2 * d_model)
        self.fc2 = nn.Linear(2 * d_model, d_model)
        self.act = nn.SiLU()

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


def source_key(kind: TokenKind, group_id: int) -> str:
    return {TokenKind.H: "h", TokenKind.R: "r", TokenKind.T: "s"}[kind] + str(group_id)


def layout(sample: UserSample) -> tuple[list[TokenMeta], list[tuple[int, ...]], tuple[int, int, int]]:
    """Canonical token order for a sample, with each token's raw feature ids.

    H and R tokens are merged across their sequences chronologically
    (ties: sequence id, then position). T tokens are ordered by
    (timestamp, scenario id, original exposure index).
    """
    metas: list[TokenMeta] = []
    feats: list[tuple[int, ...]] = []
    counts = []
    for kind, seqs in ((TokenKind.H, sample.historical_sequences), (TokenKind.R, sample.realtime_sequences)):
        events = sorted(
            ((ev.timestamp, sid, j, ev) for sid, evs in seqs for j, ev in enumerate(evs)),
            key=lambda x: x[:3],
        )
        for ts, sid, _, ev in events:
            metas.append(TokenMeta(kind, sid, ts))
            feats.append(ev.item_features)
        counts.append(len(events))
    order = sorted(range(len(sample.exposures)), key=lambda i: (sample.exposures[i].timestamp, sample.exposures[i].scenario_id, i))
    for i in order:
        e = sample.exposures[i]
        metas.append(TokenMeta(TokenKind.T, e.scenario_id, e.timestamp, i))
        feats.append(e.user_features + e.cross_features + e.item_features)
    return metas, feats, (counts[0], counts[1], len(order))


class Tokenizer(nn.Module):
    def __init__(self, space: FeatureSpace, d_model: int, d_emb: int = 16):
        super().__init__()
        self.space = space
        self.d_model = d_model
        self.d_emb = d_emb
        self.vocabs: dict[str, tuple[int, ...]] = {}
        for s in space.hist_schemas:
            self.vocabs[source_key(TokenKind.H, s.seq_id)] = s.feature_vocabs
        for s in space.rt_schemas:
            self.vocabs[source_key(TokenKind.R, s.seq_id)] = s.feature_vocabs
        for s in space.scenarios:
            self.vocabs[source_key(TokenKind.T, s.scenario_id)] = (
                s.user_feature_vocabs + s.cross_feature_vocabs + s.item_feature_vocabs
            )
        self.tables = nn.ModuleDict(
            {k: nn.ModuleList(nn.Embedding(v, d_emb) for v in vocab) for k, vocab in self.vocabs.items()}
        )
        self.mlps = nn.ModuleDict({k: TokenizerMLP(len(vocab) * d_emb, d_model) for k, vocab in self.vocabs.items()})
        for table in self.tables.values():
            for emb in table:
                nn.init.normal_(emb.weight, std=0.1)

    def embed_source(self, key: str, ids: torch.Tensor) -> torch.Tensor:
        """MLP(concat of per-slot embeddings) for a (n, n_slots) id matrix."""
        if key not in self.vocabs:
            raise IntegrityError(f"no tokenizer for source {key!r}")
        vocab = self.vocabs[key]
        if ids.ndim != 2 or ids.shape[1] != len(vocab):
            raise IntegrityError(f"source {key!r} expects {len(vocab)} feature slots, got shape {tuple(ids.shape)}")
        bad = (ids < 0) | (ids >= torch.tensor(vocab))
        if bad.any():
            row, col = (int(x) for x in bad.nonzero()[0])
            raise VocabularyError(f"source {key!r} slot {col}: id {int(ids[row, col])} outside vocab [0, {vocab[col]})")
        parts = [table(ids[:, j]) for j, table in enumerate(self.tables[key])]
        return self.mlps[key](torch.cat(parts, dim=1))

    def tokenize_h(self, events: Sequence[BehaviorEvent], seq_id: int) -> list[tuple[TokenMeta, torch.Tensor]]:
        return self._tokenize_seq(events, seq_id, TokenKind.H)

    def tokenize_r(self, events: Sequence[BehaviorEvent], seq_id: int) -> list[tuple[TokenMeta, torch.Tensor]]:
        return self._tokenize_seq(events, seq_id, TokenKind.R)

    def _tokenize_seq(self, events, seq_id, kind):
        if not events:
            return []
        ids = torch.tensor([ev.item_features for ev in events], dtype=torch.long)
        out = self.embed_source(source_key(kind, seq_id), ids)
        return [(TokenMeta(kind, seq_id, ev.timestamp), out[i]) for i, ev in enumerate(events)]

    def tokenize_t(self, exposure: Exposure, exposure_ref: int = 0) -> tuple[TokenMeta, torch.Tensor]:
        key = source_key(TokenKind.T, exposure.scenario_id)
        if key not in self.vocabs:
            raise IntegrityError(f"unknown scenario {exposure.scenario_id}")
        sch = self.space.scenario(exposure.scenario_id)
        if (len(exposure.user_features), len(exposure.cross_features), len(exposure.item_features)) != (
            len(sch.user_feature_vocabs),
            len(sch.cross_feature_vocabs),
            len(sch.item_feature_vocabs),
        ):
            raise IntegrityError(f"exposure does not match the schema of scenario {exposure.scenario_id}")
        ids = torch.tensor([exposure.user_features + exposure.cross_features + exposure.item_features])
        meta = TokenMeta(TokenKind.T, exposure.scenario_id, exposure.timestamp, exposure_ref)
        return meta, self.embed_source(key, ids)[0]

    def assemble(self, sample: UserSample) -> TokenSequence:
        return self.assemble_batch([sample]).sequence(0)

    def assemble_batch(self, samples: Sequence[UserSample]) -> TokenBatch:
        """Tokenize several samples, running each source MLP once over the batch."""
        layouts = [layout(s) for s in samples]
        n_max = max((len(m) for m, _, _ in layouts), default=0)
        rows: dict[str, tuple[list, list, list]] = {}
        for b, (metas, feats, _) in enumerate(layouts):
            for pos, (meta, f) in enumerate(zip(metas, feats)):
                ids, bs, ps = rows.setdefault(source_key(meta.kind, meta.group_id), ([], [], []))
                ids.append(f)
                bs.append(b)
                ps.append(pos)
        dtype = next(self.parameters()).dtype
        out = torch.zeros(len(samples), n_max, self.d_model, dtype=dtype)
        vecs, b_idx, p_idx = [], [], []
        for key in sorted(rows):
            ids, bs, ps = rows[key]
            vecs.append(self.embed_source(key, torch.tensor(ids, dtype=torch.long)))
            b_idx.extend(bs)
            p_idx.extend(ps)
        if vecs:
            out = out.index_put((torch.tensor(b_idx), torch.tensor(p_idx)), torch.cat(vecs))
        return TokenBatch([m for m, _, _ in layouts], out, [bnd for _, _, bnd in layouts])
