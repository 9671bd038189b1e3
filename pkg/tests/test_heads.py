import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from mtfm.data import default_space
from mtfm.errors import ConfigurationError
from mtfm.heads import (
    MMoE,
    PredictionRecord,
    UndefinedLoss,
    auc,
    bce_from_logits,
    evaluation_table,
    format_table,
    gauc,
    head_key,
    mmoe_forward,
    multitask_loss,
)
from mtfm.reference import ref_auc_pairs, ref_bce
from mtfm.tokenizer import TokenKind, TokenMeta

SPACE = default_space(3, 20)


def test_sqs_token_yields_four_records():
    head = MMoE(SPACE, 8, n_experts=3)
    metas = [TokenMeta(TokenKind.T, 1, 0, 0)]
    recs = mmoe_forward(torch.randn(1, 8), metas, head)
    assert [r.task for r in recs] == ["ctr", "ctcvr", "imd", "write"]
    assert all(0 < r.probability < 1 for r in recs)


def test_single_expert_gate_is_one():
    head = MMoE(SPACE, 8, n_experts=1)
    g = head.gate(head_key(0, "ctr"), torch.randn(5, 8))
    assert torch.equal(g, torch.ones(5, 1))


def test_uniform_gate_identical_experts_equal_single_expert():
    torch.manual_seed(0)
    one = MMoE(SPACE, 8, n_experts=1).double()
    many = MMoE(SPACE, 8, n_experts=3).double()
    with torch.no_grad():
        for e in many.experts:
            e.load_state_dict(one.experts[0].state_dict())
        for k in many.gates:
            many.gates[k].weight.zero_()
            many.gates[k].bias.zero_()
            many.towers[k].load_state_dict(one.towers[k].state_dict())
    x = torch.randn(4, 8, dtype=torch.float64)
    scen = [0, 1, 2, 1]
    a, ia = one(x, scen)
    b, ib = many(x, scen)
    assert ia == ib
    assert torch.allclose(a, b, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_gates_are_on_simplex(seed):
    torch.manual_seed(seed)
    head = MMoE(SPACE, 8, n_experts=4)
    g = head.gate(head_key(1, "imd"), 10 * torch.randn(6, 8))
    assert (g >= 0).all()
    assert torch.allclose(g.sum(-1), torch.ones(6))


def test_scenario_isolation():
    torch.manual_seed(1)
    head = MMoE(SPACE, 8).double()
    x = torch.randn(3, 8, dtype=torch.float64)
    before, _ = head(x, [0, 0, 0])
    with torch.no_grad():
        for k in head.gates:
            if not k.startswith(head_key(0, "")):
                head.gates[k].weight.add_(1.0)
                head.towers[k].weight.add_(1.0)
    after, _ = head(x, [0, 0, 0])
    assert torch.equal(before, after)


def test_unknown_scenario():
    with pytest.raises(ConfigurationError):
        MMoE(SPACE, 8)(torch.randn(1, 8), [7])


def test_bce_perfect_and_half():
    labels = torch.tensor([1.0, 0.0, 1.0], dtype=torch.float64)
    perfect = bce_from_logits(torch.tensor([50.0, -50.0, 50.0], dtype=torch.float64), labels)
    assert perfect.item() == pytest.approx(-math.log(1 - 1e-7), abs=1e-12)
    half = bce_from_logits(torch.zeros(3, dtype=torch.float64), labels)
    assert half.item() == pytest.approx(math.log(2), abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-12, 12), st.integers(0, 1)), min_size=1, max_size=40))
def test_bce_matches_scalar_oracle(pairs):
    logits = torch.tensor([p for p, _ in pairs], dtype=torch.float64)
    labels = torch.tensor([float(y) for _, y in pairs], dtype=torch.float64)
    probs = torch.sigmoid(logits).tolist()
    assert abs(bce_from_logits(logits, labels).item() - ref_bce(probs, labels.tolist())) <= 1e-9


def test_empty_loss_is_undefined():
    with pytest.raises(UndefinedLoss):
        bce_from_logits(torch.zeros(0), torch.zeros(0))
    with pytest.raises(UndefinedLoss):
        multitask_loss([])


def test_multitask_loss_weights():
    recs = [PredictionRecord(0, 0, 0, "ctr", 0.5, 1), PredictionRecord(0, 0, 0, "ctcvr", 0.9, 0)]
    plain = multitask_loss(recs)
    assert plain == pytest.approx((math.log(2) - math.log(0.1)) / 2, abs=1e-9)
    only_ctr = multitask_loss(recs, {"ctr": 1.0, "ctcvr": 0.0})
    assert only_ctr == pytest.approx(math.log(2), abs=1e-9)


def test_auc_perfect_and_tie_fixture():
    assert auc([0, 0, 1, 1], [0.1, 0.2, 0.8, 0.9]) == 1.0
    labels = [1, 0, 1, 0, 1, 0]
    scores = [0.9, 0.8, 0.7, 0.7, 0.3, 0.1]
    # 3 + 1.5 + 1 correctly ordered pairs out of 9
    assert auc(labels, scores) == pytest.approx(5.5 / 9, abs=1e-15)
    assert auc(labels, scores) == pytest.approx(ref_auc_pairs(labels, scores), abs=1e-15)


def test_auc_random_near_half():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, 20_000)
    assert abs(auc(y, rng.random(20_000)) - 0.5) < 0.02


def test_degenerate_auc():
    assert auc([1, 1, 1], [0.1, 0.2, 0.3]) is None
    assert auc([], []) is None
    assert gauc([0, 0, 1, 1], [1, 1, 0, 0], [0.1, 0.2, 0.3, 0.4]) is None


def test_single_user_gauc_equals_auc():
    y, s = [1, 0, 1, 0, 0], [0.3, 0.2, 0.9, 0.5, 0.1]
    assert gauc([4] * 5, y, s) == auc(y, s)


def test_gauc_exposure_weighted():
    groups = [0, 0, 0, 1, 1, 2, 2]
    labels = [1, 0, 0, 1, 0, 1, 1]
    scores = [0.1, 0.5, 0.2, 0.9, 0.3, 0.5, 0.4]
    # user 0: 0/2, user 1: 1/1, user 2 skipped
    assert gauc(groups, labels, scores) == pytest.approx((3 * 0.0 + 2 * 1.0) / 5, abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 5)), min_size=2, max_size=30))
def test_auc_invariant_under_monotone_transform(pairs):
    y = [a for a, _ in pairs]
    s = np.array([b for _, b in pairs], dtype=float)
    a1 = auc(y, s)
    a2 = auc(y, np.exp(3 * s) + 1)
    assert a1 == a2


def test_evaluation_table_and_format():
    recs = [
        PredictionRecord(u, s, 0, t, p, y)
        for u, s, t, p, y in [(0, 0, "ctr", 0.9, 1), (0, 0, "ctr", 0.1, 0), (1, 1, "ctr", 0.4, 1), (1, 1, "ctr", 0.6, 0), (1, 1, "imd", 0.3, 0)]
    ]
    rows = evaluation_table(recs)
    keyed = {(r["scenario"], r["task"]): r for r in rows}
    assert keyed[(0, "ctr")]["auc"] == 1.0
    assert keyed[(1, "ctr")]["auc"] == 0.0
    assert keyed[("all", "ctr")]["n"] == 4
    assert keyed[(1, "imd")]["auc"] is None
    text = format_table(rows)
    assert "n/a" in text and text.splitlines()[0].split("\t")[:2] == ["scenario", "task"]
