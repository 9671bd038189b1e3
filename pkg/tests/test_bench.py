import dataclasses
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from mtfm.bench import (
    BENCH_COLUMNS,
    bench,
    check_2_4,
    count_macs,
    extract_subgraph,
    hybrid_ratio_formula,
    infer_request,
    instrumented_macs,
    kv_param_count,
    prune_2_4,
    prune_model,
    pruning_report,
    verify_complexity,
)
from mtfm.config import GeneratorConfig, ModelConfig
from mtfm.data import InferenceRequest, generate_dataset
from mtfm.errors import ConfigurationError, IntegrityError
from mtfm.hta import count_parameters
from mtfm.model import MTFM

from conftest import SMALL_MODEL


def _request(sample, n_cands=None):
    by_scen = {}
    for e in sample.exposures:
        by_scen.setdefault(e.scenario_id, []).append(dataclasses.replace(e, labels={}))
    s, cands = max(by_scen.items(), key=lambda kv: len(kv[1]))
    ts = max(c.timestamp for c in cands)
    cands = tuple(dataclasses.replace(c, timestamp=ts) for c in cands)
    if n_cands:
        cands = (cands * n_cands)[:n_cands]
    return InferenceRequest(sample.user_id, s, sample.historical_sequences, sample.realtime_sequences, cands)


def test_subgraph_is_smaller(f64_model):
    for s in f64_model.space.scenario_ids:
        assert extract_subgraph(f64_model, s).parameter_count() < count_parameters(f64_model)


def test_single_scenario_subgraph_is_whole_model():
    data = generate_dataset(GeneratorConfig(n_users=5, n_scenarios=1), seed=0)
    torch.manual_seed(0)
    model = MTFM(data.space, SMALL_MODEL)
    sub = extract_subgraph(model, 0).model
    full = dict(model.named_parameters())
    for name, p in sub.named_parameters():
        assert torch.equal(p, full[name])
    assert count_parameters(sub) == count_parameters(model)


def test_unknown_scenario(f64_model):
    with pytest.raises(ConfigurationError):
        extract_subgraph(f64_model, 9)


def test_subgraph_matches_full(f64_model, small_data):
    sqs = 1
    sub = extract_subgraph(f64_model, sqs)
    checked = 0
    for sample in small_data.samples:
        if not any(e.scenario_id == sqs for e in sample.exposures):
            continue
        req = _request(dataclasses.replace(sample, exposures=tuple(e for e in sample.exposures if e.scenario_id == sqs)))
        got = infer_request(req, sub)
        with torch.no_grad():
            ref = f64_model([req.as_sample()]).records([req.as_sample()])
        assert max(abs(a.probability - b.probability) for a, b in zip(got, ref)) <= 1e-12
        checked += 1
    assert checked > 0


def test_single_candidate_matches_training_path(f64_model, small_data):
    sample = small_data.samples[0]
    e = sample.exposures[0]
    single = dataclasses.replace(sample, exposures=(e,))
    req = InferenceRequest(sample.user_id, e.scenario_id, sample.historical_sequences, sample.realtime_sequences, (dataclasses.replace(e, labels={}),))
    got = infer_request(req, extract_subgraph(f64_model, e.scenario_id))
    f64_model.train()
    train_p = torch.sigmoid(f64_model([single]).logits).tolist()
    assert np.allclose([r.probability for r in got], train_p, atol=1e-12)


def test_thirty_candidates(f64_model, small_data):
    req = _request(small_data.samples[1], n_cands=30)
    sub = extract_subgraph(f64_model, req.scenario_id)
    recs = infer_request(req, sub)
    n_tasks = len(f64_model.space.scenario(req.scenario_id).tasks)
    assert len(recs) == 30 * n_tasks


def test_candidate_permutation(f64_model, small_data):
    req = _request(small_data.samples[2], n_cands=6)
    cands = tuple(dataclasses.replace(c, item_features=(i,) + c.item_features[1:]) for i, c in enumerate(req.candidates))
    req = dataclasses.replace(req, candidates=cands)
    perm = [4, 1, 5, 0, 3, 2]
    sub = extract_subgraph(f64_model, req.scenario_id)
    a = infer_request(req, sub)
    b = infer_request(dataclasses.replace(req, candidates=tuple(cands[i] for i in perm)), sub)
    pa = {(r.exposure_index, r.task): r.probability for r in a}
    for r in b:
        assert abs(pa[(perm[r.exposure_index], r.task)] - r.probability) <= 1e-12


def test_mixed_scenario_request(f64_model, small_data):
    req = _request(small_data.samples[0])
    with pytest.raises(IntegrityError):
        infer_request(req, extract_subgraph(f64_model, (req.scenario_id + 1) % 3))


def test_mac_example():
    cfg = dataclasses.replace(ModelConfig(), target_layers=3, full_layers=1, blocks=1)
    assert hybrid_ratio_formula(3, 1000, 50) == pytest.approx(0.2875, abs=1e-15)
    full = dataclasses.replace(cfg, target_layers=0, blocks=4)
    assert count_macs(cfg, 1000, 50).attention / count_macs(full, 1000, 50).attention == pytest.approx(0.2875, abs=1e-15)


def test_mac_degenerate_cases():
    base = ModelConfig()
    assert hybrid_ratio_formula(0, 100, 10) == 1.0
    assert hybrid_ratio_formula(3, 100, 100) == 1.0
    cfg = dataclasses.replace(base, target_layers=3, blocks=1)
    full = dataclasses.replace(base, target_layers=0, blocks=4)
    assert count_macs(cfg, 64, 64).attention == count_macs(full, 64, 64).attention


def test_instrumented_counts_exact():
    for cfg in (ModelConfig(), dataclasses.replace(ModelConfig(), kv_heads=4, target_layers=1, blocks=1)):
        report = instrumented_macs(cfg, 96, 8)
        assert report.exact


def test_complexity_small():
    checks = verify_complexity(ModelConfig(d_model=16, heads=2, kv_heads=1), [(128, 8)], ks=(1, 3))
    assert all(c.exact_counts and c.rel_error == 0 for c in checks)


def test_prune_example():
    w = torch.tensor([[0.9, -0.8, 0.1, 0.05]], dtype=torch.float64)
    pruned, pattern = prune_2_4(w)
    assert pruned.tolist() == [[0.9, -0.8, 0.0, 0.0]]
    assert pattern.exempt_cols == 0


def test_prune_partial_group_exempt():
    w = torch.arange(1.0, 7.0)[None]
    pruned, pattern = prune_2_4(w)
    assert pattern.covered_cols == 4 and pattern.exempt_cols == 2
    assert pruned[0, 4:].tolist() == [5.0, 6.0]


def test_prune_empty_warns():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        pruned, _ = prune_2_4(torch.zeros(0, 4))
    assert pruned.numel() == 0 and caught


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 13), st.integers(0, 2**31 - 1))
def test_prune_property(rows, cols, seed):
    g = torch.Generator().manual_seed(seed)
    w = torch.randn(rows, cols, generator=g) + 0.01
    pruned, pattern = prune_2_4(w)
    assert check_2_4(pruned)
    cov = pattern.covered_cols
    assert torch.equal(pruned[:, cov:], w[:, cov:])
    kept = pruned[:, :cov].reshape(rows, -1, 4).abs()
    orig = w[:, :cov].reshape(rows, -1, 4).abs()
    # kept entries are the two largest of each group
    top2 = orig.sort(dim=-1).values[..., 2:].sum(-1)
    assert torch.allclose(kept.sum(-1), top2)


def test_pruning_report(f64_model, small_data):
    report = pruning_report(f64_model, small_data.samples)
    assert report["valid_2_4"]
    assert report["covered_sparsity"] == pytest.approx(0.5)
    assert any(r["delta"] is not None for r in report["rows"])
    # the original model is untouched
    for lin_name, pattern in prune_model(report["model"]).items():
        assert pattern.covered_sparsity == pytest.approx(0.5)


def test_kv_params_scale_with_heads():
    base = ModelConfig(heads=4)
    g_h = kv_param_count(dataclasses.replace(base, kv_heads=4))
    g_1 = kv_param_count(dataclasses.replace(base, kv_heads=1))
    assert g_h == 4 * g_1


def test_bench_table():
    base = ModelConfig(d_model=16, heads=2, kv_heads=1)
    result = bench(["(0:1)x2", "(1:1)x2", "(1:0)x2"], [[64, 4]], ["G=H", "G=1"], base, repeats=1)
    assert result.monotone
    lines = result.to_tsv().splitlines()
    assert lines[0].split("\t") == list(BENCH_COLUMNS)
    assert len(lines) == 1 + 6
    assert any("lazy decoder" in line for line in lines)
    by = {(r["config"], r["kv"]): r for r in result.rows}
    assert by[("(0:1)x2", "G=H")]["kv_params"] == 2 * by[("(0:1)x2", "G=1")]["kv_params"]
