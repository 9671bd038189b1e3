"""Self-contained oracle suites behind ``mtfm verify``.

Each suite builds its own micro instances (no trained model needed) and
returns a :class:`SuiteResult`.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from mtfm.bench import extract_subgraph, infer_request, verify_complexity
from mtfm.config import GeneratorConfig, ModelConfig
from mtfm.data import (
    BehaviorEvent,
    Exposure,
    FeatureSpace,
    InferenceRequest,
    ScenarioSchema,
    SequenceSchema,
    UserSample,
    generate_dataset,
)
from mtfm.engine import ParamStore, gradient_check
from mtfm.heads import bce_from_logits
from mtfm.hta import AttentionContext, FullAttentionLayer, GroupIndex, TargetAttentionLayer
from mtfm.mask import build_mask, build_mask_oracle
from mtfm.model import MTFM
from mtfm.reference import ref_mha_layer
from mtfm.tokenizer import TokenKind, TokenMeta


@dataclass
class SuiteResult:
    name: str
    cases: int
    failures: int
    detail: str
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return self.failures == 0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: {self.cases - self.failures}/{self.cases} ({self.detail}) {self.seconds:.1f}s"


# --------------------------------------------------------------------------
# random instances


def random_metas(rng: np.random.Generator, n: int, t_range: int = 6) -> list[TokenMeta]:
    """Random H/R/T metadata in canonical block order with frequent timestamp ties."""
    kinds = sorted(rng.integers(0, 3, size=n).tolist())
    metas = []
    t_ref = 0
    for k in kinds:
        ts = int(rng.integers(0, t_range))
        if k == 0:
            metas.append(TokenMeta(TokenKind.H, int(rng.integers(0, 2)), ts))
        elif k == 1:
            metas.append(TokenMeta(TokenKind.R, 0, ts))
        else:
            metas.append(TokenMeta(TokenKind.T, int(rng.integers(0, 2)), ts, t_ref))
            t_ref += 1
    return metas


def micro_space() -> FeatureSpace:
    return FeatureSpace(
        (
            ScenarioSchema(0, (3,), (4,), (5, 3), ("ctr", "ctcvr"), "A"),
            ScenarioSchema(1, (3, 2), (4,), (5,), ("ctr",), "B"),
        ),
        (SequenceSchema(0, (5, 3)), SequenceSchema(1, (5,))),
        (SequenceSchema(0, (5, 2)),),
    )


MICRO_MODEL = ModelConfig(d_model=16, blocks=1, target_layers=1, full_layers=1, heads=2, kv_heads=1, d_emb=4, n_experts=2)


def micro_sample() -> UserSample:
    """Three tokens: one H, one R (earlier than the exposure), one T."""
    return UserSample(
        0,
        ((0, (BehaviorEvent((1, 2), 1),)), (1, ())),
        ((0, (BehaviorEvent((3, 1), 5),)),),
        (Exposure(0, (2,), (1,), (4, 0), 10, {"ctr": 1, "ctcvr": 0}),),
    )


def random_layer_instance(rng: np.random.Generator, cfg: ModelConfig, n_groups_space: FeatureSpace):
    """Full layer with perturbed GLN affines, random tokens and inputs (float64)."""
    groups = GroupIndex(n_groups_space)
    torch.manual_seed(int(rng.integers(0, 2**31)))
    layer = FullAttentionLayer(cfg, len(groups)).double()
    with torch.no_grad():
        for norm in (layer.norm_in, layer.norm_attn):
            norm.gain.add_(0.3 * torch.randn_like(norm.gain))
            norm.bias.add_(0.3 * torch.randn_like(norm.bias))
    n = int(rng.integers(1, 24))
    metas = random_metas(rng, n)
    x = torch.from_numpy(rng.normal(size=(n, cfg.d_model)))
    return groups, layer, metas, x


def random_request(rng: np.random.Generator, sample: UserSample, space: FeatureSpace) -> InferenceRequest:
    s = space.scenarios[int(rng.integers(0, len(space.scenarios)))]
    ts = max((ev.timestamp for _, evs in sample.historical_sequences for ev in evs), default=0) + int(rng.integers(1, 500))

    def ids(vocabs):
        return tuple(int(rng.integers(0, v)) for v in vocabs)

    user = ids(s.user_feature_vocabs)
    cands = tuple(
        Exposure(s.scenario_id, user, ids(s.cross_feature_vocabs), ids(s.item_feature_vocabs), ts)
        for _ in range(int(rng.integers(1, 9)))
    )
    return InferenceRequest(sample.user_id, s.scenario_id, sample.historical_sequences, sample.realtime_sequences, cands)


# --------------------------------------------------------------------------
# suites


def _timed(fn: Callable[..., SuiteResult]):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        result = fn(*args, **kwargs)
        result.seconds = time.perf_counter() - t0
        return result

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@_timed
def suite_masks(trials: int = 1000, max_n: int = 32, seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    failures = 0
    for _ in range(trials):
        metas = random_metas(rng, int(rng.integers(0, max_n + 1)))
        if not np.array_equal(build_mask(metas), build_mask_oracle(metas)):
            failures += 1
    return SuiteResult("mask oracle", trials, failures, f"N <= {max_n}, exact")


@_timed
def suite_restriction(trials: int = 200, tol: float = 1e-6, seed: int = 1) -> SuiteResult:
    """Target layer T rows vs full layer T rows under shared weights."""
    rng = np.random.default_rng(seed)
    space = micro_space()
    cfg = dataclasses.replace(MICRO_MODEL, kv_heads=1)
    failures, worst = 0, 0.0
    for _ in range(trials):
        groups, full, metas, x = random_layer_instance(rng, cfg, space)
        target = TargetAttentionLayer.from_full(full, len(groups))
        ctx = AttentionContext.build([metas], groups, torch.float64, cfg.attn_norm)
        with torch.no_grad():
            yf, yt = full(x[None], ctx)[0], target(x[None], ctx)[0]
        t_rows = [i for i, m in enumerate(metas) if m.kind is TokenKind.T]
        err = float((yf[t_rows] - yt[t_rows]).abs().max()) if t_rows else 0.0
        other = [i for i in range(len(metas)) if i not in t_rows]
        untouched = torch.equal(yt[other], x[other])
        worst = max(worst, err)
        failures += int(err > tol or not untouched)
    return SuiteResult("target/full restriction", trials, failures, f"max |diff| {worst:.2e} <= {tol:g}")


@_timed
def suite_gqa(trials: int = 30, tol: float = 1e-12, seed: int = 2) -> SuiteResult:
    """G = H grouped-query layer vs a per-head multi-head reference."""
    rng = np.random.default_rng(seed)
    space = micro_space()
    cfg = dataclasses.replace(MICRO_MODEL, heads=4, kv_heads=4)
    failures, worst = 0, 0.0
    for _ in range(trials):
        groups, layer, metas, x = random_layer_instance(rng, cfg, space)
        ctx = AttentionContext.build([metas], groups, torch.float64, cfg.attn_norm)
        with torch.no_grad():
            y = layer(x[None], ctx)[0].numpy()
        ref = ref_mha_layer(layer, x.numpy(), build_mask(metas), groups.indices(metas).numpy())
        err = float(np.abs(y - ref).max())
        worst = max(worst, err)
        failures += int(err > tol)
    return SuiteResult("GQA degeneracy (G=H vs MHA)", trials, failures, f"max |diff| {worst:.2e} <= {tol:g}")


def micro_gradcheck(step: float = 1e-5):
    torch.manual_seed(0)
    model = MTFM(micro_space(), MICRO_MODEL).double()
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith(("gain", "bias")) and "norm" in name:
                p.add_(0.2 * torch.randn_like(p))
    sample = micro_sample()
    store = ParamStore(model)

    def loss_fn():
        pred = model([sample])
        return bce_from_logits(pred.logits, pred.labels)

    return gradient_check(loss_fn, store, step=step)


@_timed
def suite_gradcheck(tol: float = 1e-4) -> SuiteResult:
    report = micro_gradcheck()
    return SuiteResult(
        "gradient check",
        len(report.per_param),
        sum(v > tol for v in report.per_param.values()),
        f"{report.n_entries} entries, max rel err {report.max_rel_error:.2e} ({report.worst_param}) <= {tol:g}",
    )


def _f64_model(space, seed=0, cfg: ModelConfig | None = None):
    torch.manual_seed(seed)
    model = MTFM(space, cfg or ModelConfig()).double()
    model.eval()
    return model


@_timed
def suite_aggregation(n_samples: int = 200, tol: float = 1e-6, seed: int = 3) -> SuiteResult:
    """Aggregated multi-exposure forward vs one forward per exposure."""
    data = generate_dataset(GeneratorConfig(n_users=n_samples, n_scenarios=3), seed=seed)
    model = _f64_model(data.space, seed)
    failures, worst = 0, 0.0
    with torch.no_grad():
        for sample in data.samples:
            agg = model([sample])
            agg_p = torch.sigmoid(agg.logits)
            err = 0.0
            for i, exp in enumerate(sample.exposures):
                single = model([dataclasses.replace(sample, exposures=(exp,))])
                mine = agg_p[[k for k, e in enumerate(agg.exposure_index) if e == i]]
                err = max(err, float((mine - torch.sigmoid(single.logits)).abs().max()))
            worst = max(worst, err)
            failures += int(err > tol)
    return SuiteResult("aggregation equivalence", n_samples, failures, f"max |dp| {worst:.2e} <= {tol:g}")


@_timed
def suite_subgraph(n_requests: int = 100, tol: float = 1e-6, seed: int = 4) -> SuiteResult:
    data = generate_dataset(GeneratorConfig(n_users=n_requests, n_scenarios=3), seed=seed)
    model = _f64_model(data.space, seed)
    subgraphs = {s: extract_subgraph(model, s) for s in data.space.scenario_ids}
    rng = np.random.default_rng(seed)
    failures, worst = 0, 0.0
    with torch.no_grad():
        for sample in data.samples:
            req = random_request(rng, sample, data.space)
            sub = infer_request(req, subgraphs[req.scenario_id])
            full = model([req.as_sample()]).records([req.as_sample()])
            err = max(abs(a.probability - b.probability) for a, b in zip(sub, full))
            keys_match = [(r.exposure_index, r.task) for r in sub] == [(r.exposure_index, r.task) for r in full]
            worst = max(worst, err)
            failures += int(err > tol or not keys_match)
    return SuiteResult("subgraph equivalence", n_requests, failures, f"max |dp| {worst:.2e} <= {tol:g}")


@_timed
def suite_macs(sizes=((512, 16), (1024, 32), (2048, 64)), ks=(1, 3, 5), tol: float = 0.10) -> SuiteResult:
    checks = verify_complexity(ModelConfig(), sizes, ks)
    worst = max(c.rel_error for c in checks)
    failures = sum(not c.passed(tol) for c in checks)
    return SuiteResult("MAC exactness + complexity ratio", len(checks), failures, f"max ratio rel err {worst:.2e} <= {tol:g}")


SUITES = {
    "masks": suite_masks,
    "restriction": suite_restriction,
    "gqa": suite_gqa,
    "gradcheck": suite_gradcheck,
    "aggregation": suite_aggregation,
    "subgraph": suite_subgraph,
    "macs": suite_macs,
}


def run_suites(names=None, emit: Callable[[str], None] = print) -> list[SuiteResult]:
    results = []
    for name in names or SUITES:
        torch.set_default_dtype(torch.float32)
        result = SUITES[name]()
        emit(result.line())
        results.append(result)
    return results
