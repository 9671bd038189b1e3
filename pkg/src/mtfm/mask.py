"""Dynamic visibility mask over H/R/T tokens.

``mask[i, j] == 1`` means query token ``i`` may attend to key token ``j``:

* H keys are visible to every token;
* R keys are visible only to tokens with a strictly later timestamp;
* T keys are visible only to themselves.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

from mtfm.errors import DimensionError
from mtfm.tokenizer import TokenKind, TokenMeta

KIND_CODE = {TokenKind.H: 0, TokenKind.R: 1, TokenKind.T: 2}
PAD = -1


def encode(metas: Sequence[TokenMeta]) -> tuple[np.ndarray, np.ndarray]:
    kinds = np.fromiter((KIND_CODE[m.kind] for m in metas), dtype=np.int8, count=len(metas))
    ts = np.fromiter((m.timestamp for m in metas), dtype=np.int64, count=len(metas))
    return kinds, ts


def build_mask(metas: Sequence[TokenMeta]) -> np.ndarray:
    """N x N boolean mask (rows query, columns key)."""
    kinds, ts = encode(metas)
    return _mask_from_codes(kinds, ts)


def _mask_from_codes(kinds: np.ndarray, ts: np.ndarray) -> np.ndarray:
    n = len(kinds)
    h_col = (kinds == 0)[None, :]
    r_col = (kinds == 1)[None, :] & (ts[:, None] > ts[None, :])
    t_col = (kinds == 2)[None, :] & np.eye(n, dtype=bool)
    return np.broadcast_to(h_col, (n, n)) | r_col | t_col


def build_mask_batch(metas: Sequence[Sequence[TokenMeta]], n_max: int | None = None) -> torch.Tensor:
    """Stacked (B, N_max, N_max) masks; rows and columns past a sequence's length are zero."""
    n_max = max((len(m) for m in metas), default=0) if n_max is None else n_max
    out = np.zeros((len(metas), n_max, n_max), dtype=bool)
    for b, m in enumerate(metas):
        n = len(m)
        out[b, :n, :n] = build_mask(m)
    return torch.from_numpy(out)


def build_mask_oracle(metas: Sequence[TokenMeta]) -> np.ndarray:
    """Pairwise reference: apply the three visibility rules to each (query, key)."""
    n = len(metas)
    out = np.zeros((n, n), dtype=bool)
    for i in range(n):
        for j in range(n):
            key = metas[j]
            if key.kind == TokenKind.H:
                visible = True
            elif key.kind == TokenKind.R:
                visible = metas[i].timestamp > key.timestamp
            elif key.kind == TokenKind.T:
                visible = i == j
            else:
                raise ValueError(f"unknown token kind {key.kind!r}")
            out[i, j] = visible
    return out


def extract_t_rows(mask: np.ndarray | torch.Tensor, boundaries: tuple[int, int, int]):
    """Rows of the T tokens, shape (L_T, N)."""
    l_h, l_r, l_t = boundaries
    n = l_h + l_r + l_t
    if mask.shape[-2:] != (n, n):
        raise DimensionError(f"mask of shape {tuple(mask.shape)} does not match boundaries {boundaries}")
    return mask[..., l_h + l_r :, :]
