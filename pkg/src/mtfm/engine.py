"""Numeric substrate: parameter store, Adam, gradient checking, training, checkpoints.

Tensors and reverse-mode differentiation come from torch; this module adds
the parameter registry, the optimizer, the finite-difference checker and the
deterministic training loop around them.
"""

from __future__ import annotations

import io
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from mtfm.config import ModelConfig, TrainConfig
from mtfm.data import Dataset, UserSample, space_from_json, space_to_json
from mtfm.errors import ContractError, MTFMError, NonFiniteGradient, TrainingDiverged
from mtfm.heads import bce_from_logits, evaluation_table, records_auc
from mtfm.model import MTFM

log = logging.getLogger("mtfm")

DTYPES = {"f32": torch.float32, "f64": torch.float64}

CHECKPOINT_FORMAT = "mtfm-checkpoint"
CHECKPOINT_VERSION = 1


def dtype_of(precision: str) -> torch.dtype:
    return DTYPES[precision]


def check_finite(t: torch.Tensor, name: str) -> None:
    """Raise on NaN/inf; a no-op unless MTFM_DEBUG is set."""
    if os.environ.get("MTFM_DEBUG") and not torch.isfinite(t).all():
        raise MTFMError(f"non-finite values in {name}")


class ParamStore:
    """Named parameters of a module with their gradients and Adam moments."""

    def __init__(self, module: nn.Module):
        self.module = module
        self.params: dict[str, nn.Parameter] = dict(module.named_parameters())
        self.m = {k: torch.zeros_like(p) for k, p in self.params.items()}
        self.v = {k: torch.zeros_like(p) for k, p in self.params.items()}
        self.step = 0

    def __len__(self):
        return len(self.params)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grads(self) -> dict[str, torch.Tensor]:
        return {k: (p.grad if p.grad is not None else torch.zeros_like(p)) for k, p in self.params.items()}

    def numel(self) -> int:
        return sum(p.numel() for p in self.params.values())


def backward(loss: torch.Tensor, store: ParamStore) -> dict[str, torch.Tensor]:
    """Populate and return d(loss)/d(param) for every parameter in the store."""
    if loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    store.zero_grad()
    loss.backward()
    return store.grads()


@torch.no_grad()
def adam_step(store: ParamStore, lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place."""
    grads = store.grads()
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise NonFiniteGradient(name)
    store.step += 1
    c1 = 1.0 - beta1**store.step
    c2 = 1.0 - beta2**store.step
    for name, p in store.params.items():
        g = grads[name]
        m, v = store.m[name], store.v[name]
        m.mul_(beta1).add_(g, alpha=1.0 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
        p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + eps))


# --------------------------------------------------------------------------
# gradient check


@dataclass
class GradCheck:
    max_rel_error: float
    worst_param: str
    per_param: dict[str, float]
    n_entries: int

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error <= tol


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


@torch.no_grad()
def gradient_check(loss_fn: Callable[[], torch.Tensor], store: ParamStore, step: float = 1e-5, floor: float = 1e-6) -> GradCheck:
    """Compare backprop gradients with central differences on every parameter entry.

    ``floor`` bounds the denominator of the relative error so that entries
    whose true gradient is ~0 are judged by absolute error.
    """
    with torch.enable_grad():
        analytic = backward(loss_fn(), store)
    per_param = {}
    n = 0
    for name, p in store.params.items():
        flat = p.view(-1)
        a = analytic[name].reshape(-1)
        worst = 0.0
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            up = loss_fn().item()
            flat[i] = orig - step
            down = loss_fn().item()
            flat[i] = orig
            worst = max(worst, relative_error(a[i].item(), (up - down) / (2 * step), floor))
        per_param[name] = worst
        n += flat.numel()
    worst_name = max(per_param, key=per_param.get)
    return GradCheck(per_param[worst_name], worst_name, per_param, n)


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, model: MTFM, extra: dict | None = None) -> None:
    """npz archive: one array per parameter plus a JSON ``__meta__`` entry."""
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "space": space_to_json(model.space),
        "model": asdict(model.cfg),
        "dtype": str(model.dtype).replace("torch.", ""),
        "extra": extra or {},
    }
    arrays = {name: t.detach().cpu().numpy() for name, t in model.state_dict().items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[MTFM, dict]:
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
            raise MTFMError(f"{path}: not a version-{CHECKPOINT_VERSION} {CHECKPOINT_FORMAT}")
        model = MTFM(space_from_json(meta["space"]), ModelConfig(**meta["model"]))
        model.to(getattr(torch, meta["dtype"]))
        state = {k: torch.from_numpy(z[k].copy()) for k in z.files if k != "__meta__"}
    model.load_state_dict(state)
    return model, meta


# --------------------------------------------------------------------------
# training


def split_users(samples: Sequence[UserSample], holdout_fraction: float, seed: int):
    rng = np.random.default_rng([seed, 7])
    order = rng.permutation(len(samples))
    n_hold = int(round(holdout_fraction * len(samples)))
    hold = sorted(order[:n_hold].tolist())
    train = sorted(order[n_hold:].tolist())
    return [samples[i] for i in train], [samples[i] for i in hold]


@dataclass
class TrainResult:
    model: MTFM
    store: ParamStore
    losses: list[float] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    seconds: float = 0.0

    def smoothed(self, window: int = 50) -> np.ndarray:
        x = np.asarray(self.losses)
        if len(x) < window:
            return x
        return np.convolve(x, np.ones(window) / window, mode="valid")


def evaluate(model: MTFM, samples: Sequence[UserSample], batch_size: int = 128) -> dict:
    model.eval()
    records = model.predict(samples, batch_size)
    ctr = [r for r in records if r.task == "ctr"]
    return {"ctr_auc": records_auc(ctr), "table": evaluation_table(records), "n_records": len(records)}


def build_model(dataset_space, model_cfg: ModelConfig, seed: int, precision: str) -> MTFM:
    torch.manual_seed(seed)
    return MTFM(dataset_space, model_cfg).to(dtype_of(precision))


def train(
    dataset: Dataset,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    *,
    on_eval: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Minibatch Adam on user-level samples; deterministic for fixed seed and threads."""
    cfg.validate()
    if not dataset.samples:
        raise MTFMError("cannot train on an empty dataset")
    torch.set_num_threads(cfg.threads)
    train_set, holdout = split_users(dataset.samples, cfg.holdout_fraction, cfg.seed)
    model = build_model(dataset.space, model_cfg, cfg.seed, cfg.precision)
    store = ParamStore(model)
    result = TrainResult(model, store)
    rng = np.random.default_rng([cfg.seed, 11])
    steps_per_epoch = max(1, math.ceil(len(train_set) / cfg.batch_size))
    eval_every = cfg.eval_every or steps_per_epoch
    order: list[int] = []
    t0 = time.perf_counter()
    for step in range(1, cfg.steps + 1):
        if len(order) < cfg.batch_size:
            order.extend(rng.permutation(len(train_set)).tolist())
        batch = [train_set[i] for i in order[: cfg.batch_size]]
        del order[: cfg.batch_size]
        model.train()
        pred = model(batch)
        loss = bce_from_logits(pred.logits, pred.labels)
        if not torch.isfinite(loss):
            raise TrainingDiverged(step)
        backward(loss, store)
        if cfg.clip_norm:
            nn.utils.clip_grad_norm_(store.params.values(), cfg.clip_norm)
        adam_step(store, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        result.losses.append(loss.item())
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("step %d loss %.5f", step, float(np.mean(result.losses[-cfg.log_every :])))
        if holdout and (step % eval_every == 0 or step == cfg.steps):
            ev = evaluate(model, holdout)
            ev["step"] = step
            result.evals.append(ev)
            log.info("step %d held-out ctr auc %s", step, ev["ctr_auc"])
            if on_eval is not None:
                on_eval(ev)
    result.seconds = time.perf_counter() - t0
    return result
