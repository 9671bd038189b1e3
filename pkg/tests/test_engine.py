import dataclasses

import numpy as np
import pytest
import torch
from torch import nn

from mtfm.config import GeneratorConfig, TrainConfig
from mtfm.data import Dataset, generate_dataset
from mtfm.engine import (
    ParamStore,
    adam_step,
    backward,
    gradient_check,
    load_checkpoint,
    relative_error,
    save_checkpoint,
    split_users,
    train,
)
from mtfm.errors import ContractError, MTFMError, NonFiniteGradient, TrainingDiverged
from mtfm.reference import ref_adam

from conftest import SMALL_MODEL


class Scalar(nn.Module):
    def __init__(self, values):
        super().__init__()
        self.w = nn.Parameter(torch.tensor(values, dtype=torch.float64))


def test_backward_sum_of_squares():
    m = Scalar([1.0, -2.0, 0.5])
    store = ParamStore(m)
    grads = backward((m.w**2).sum(), store)
    assert torch.equal(grads["w"], 2 * m.w.detach())


def test_backward_rejects_non_scalar():
    m = Scalar([1.0, 2.0])
    with pytest.raises(ContractError):
        backward(m.w * 2, ParamStore(m))


def test_adam_zero_gradient_is_noop():
    m = Scalar([1.0, 2.0])
    store = ParamStore(m)
    backward((m.w * 0).sum(), store)
    before = m.w.detach().clone()
    adam_step(store, lr=0.1)
    assert torch.equal(m.w.detach(), before)


def test_adam_constant_gradient_step_is_lr():
    m = Scalar([0.0])
    store = ParamStore(m)
    for _ in range(5):
        backward((3.0 * m.w).sum(), store)
        adam_step(store, lr=0.01, eps=0.0)
    assert m.w.item() == pytest.approx(-0.05, abs=1e-12)


def test_adam_matches_reference_on_quadratic():
    # f(w) = (w - 3)^2
    m = Scalar([0.5])
    store = ParamStore(m)
    path = []
    for _ in range(10):
        backward(((m.w - 3.0) ** 2).sum(), store)
        adam_step(store, lr=0.1)
        path.append(m.w.item())
    ref = ref_adam(0.5, lambda w: 2 * (w - 3.0), 10, 0.1)
    assert np.abs(np.array(path) - np.array(ref)).max() <= 1e-10


def test_adam_rejects_nan_gradient():
    m = Scalar([1.0])
    store = ParamStore(m)
    m.w.grad = torch.tensor([float("nan")], dtype=torch.float64)
    with pytest.raises(NonFiniteGradient) as info:
        adam_step(store)
    assert "w" in str(info.value)


def test_relative_error_floor():
    assert relative_error(0.0, 1e-9) == pytest.approx(1e-3)
    assert relative_error(2.0, 1.0) == 0.5


def test_gradient_check_on_small_function():
    m = Scalar([0.3, -1.2, 2.0])
    store = ParamStore(m)
    report = gradient_check(lambda: (torch.sin(m.w) * m.w**2).sum(), store)
    assert report.passed(1e-6)
    assert report.n_entries == 3


def test_checkpoint_round_trip_is_bitwise(tmp_path, f64_model):
    path = tmp_path / "m.npz"
    save_checkpoint(path, f64_model, {"step": 3})
    loaded, meta = load_checkpoint(path)
    assert meta["extra"] == {"step": 3}
    a, b = f64_model.state_dict(), loaded.state_dict()
    assert a.keys() == b.keys()
    for k in a:
        assert a[k].dtype == b[k].dtype
        assert torch.equal(a[k], b[k])


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "x.npz"
    np.savez(path, __meta__=np.frombuffer(b'{"format": "other"}', dtype=np.uint8))
    with pytest.raises(MTFMError):
        load_checkpoint(path)


def test_split_users_partition(small_data):
    tr, ho = split_users(small_data.samples, 0.2, 0)
    assert len(ho) == 12 and len(tr) == 48
    assert {s.user_id for s in tr}.isdisjoint({s.user_id for s in ho})


@pytest.fixture(scope="module")
def planted():
    return generate_dataset(GeneratorConfig(n_users=400), seed=2)


def test_training_reduces_loss(planted):
    result = train(planted, SMALL_MODEL, TrainConfig(steps=200, lr=3e-3, batch_size=16, log_every=0))
    s = result.smoothed(40)
    assert s[-1] < s[0]
    assert result.evals and result.evals[-1]["step"] == 200


def test_training_is_deterministic(planted):
    cfg = TrainConfig(steps=15, batch_size=8, log_every=0, eval_every=10**6)
    a = train(planted, SMALL_MODEL, cfg)
    b = train(planted, SMALL_MODEL, cfg)
    assert a.losses == b.losses


def test_zero_learning_rate_keeps_loss_constant(small_data):
    # full-batch steps with lr=0: parameters and loss never move
    cfg = TrainConfig(steps=4, lr=0.0, batch_size=len(small_data), holdout_fraction=0.0, precision="f64", log_every=0)
    result = train(small_data, SMALL_MODEL, cfg)
    assert np.ptp(result.losses) <= 1e-12


def test_empty_dataset(small_data):
    with pytest.raises(MTFMError):
        train(Dataset(small_data.space, []), SMALL_MODEL, TrainConfig(steps=1))


def test_divergence_is_reported(small_data, monkeypatch):
    import mtfm.engine as engine

    monkeypatch.setattr(engine, "bce_from_logits", lambda logits, labels: logits.sum() * float("nan"))
    with pytest.raises(TrainingDiverged) as info:
        train(small_data, SMALL_MODEL, TrainConfig(steps=3, log_every=0))
    assert info.value.step == 1


def test_batch_forward_matches_single(f64_model, small_data):
    samples = small_data.samples[:6]
    with torch.no_grad():
        batch = torch.sigmoid(f64_model(samples).logits)
        single = torch.cat([torch.sigmoid(f64_model([s]).logits) for s in samples])
    assert torch.allclose(batch, single, atol=1e-12)


def test_aggregated_equals_singleton(f64_model, small_data):
    s = max(small_data.samples, key=lambda s: len(s.exposures))
    with torch.no_grad():
        agg = f64_model([s])
        for i, e in enumerate(s.exposures):
            one = f64_model([dataclasses.replace(s, exposures=(e,))])
            mine = agg.logits[[k for k, j in enumerate(agg.exposure_index) if j == i]]
            assert torch.allclose(torch.sigmoid(mine), torch.sigmoid(one.logits), atol=1e-12)
