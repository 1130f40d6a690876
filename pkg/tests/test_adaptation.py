import math

import numpy as np
import pytest
import torch

from difo import adaptation
from difo.adaptation import AdaptationConfig, EpochRecord, adapt, mka_objective, variant
from difo.benchmark import build_benchmark
from difo.data import ShiftSpec
from difo.errors import ConfigError, NumericalError
from difo.losses import balance_loss, mce_loss, pc_loss, tsc_loss
from difo.target import SourceConfig, parameter_hash


@pytest.fixture(scope="module")
def small():
    return build_benchmark(seed=0, spec=ShiftSpec(samples_per_class=20), source_config=SourceConfig(epochs=5))


def short(**kw):
    return AdaptationConfig(**{"epochs": 2, "batch_size": 32, **kw})


def test_defaults_and_validation():
    cfg = AdaptationConfig()
    assert (cfg.alpha, cfg.beta, cfg.lam, cfg.tau, cfg.n_likely, cfg.epochs, cfg.batch_size) == \
        (1.0, 0.4, 10.0, 0.1, 2, 15, 64)
    cfg.validate(10)
    for bad in (dict(tau=0.0), dict(lam=-1.0), dict(beta=-0.1), dict(batch_size=0), dict(divergence="js")):
        with pytest.raises(ConfigError):
            AdaptationConfig(**bad).validate(10)
    with pytest.raises(ConfigError):
        AdaptationConfig(n_likely=3).validate(3)


def test_ablation_switches():
    cfg = AdaptationConfig()
    assert not cfg.ablate("mce").use_mce
    assert not cfg.ablate("customize").customize
    assert cfg.ablate("mi").divergence == "kl"
    assert variant(cfg, "tsc_only").alpha == 0 and not variant(cfg, "tsc_only").use_mce
    assert variant(cfg, "full") == cfg
    with pytest.raises(ConfigError):
        cfg.ablate("everything")
    with pytest.raises(ConfigError):
        variant(cfg, "nope")


def _batch():
    logits = torch.tensor([[1.0, 0.5, -0.5], [0.2, -1.0, 0.9]], dtype=torch.float64)
    preds_v = torch.tensor([[0.7, 0.2, 0.1], [0.1, 0.3, 0.6]], dtype=torch.float64)
    return logits, preds_v, torch.tensor([[0, 1], [2, 0]])


def test_objective_reduces_to_components():
    logits, preds_v, sets = _batch()
    preds_t = torch.softmax(logits, 1)
    assert mka_objective(logits, preds_v, sets, AdaptationConfig(beta=0.0)).item() == \
        pytest.approx(pc_loss(preds_t, preds_v, 1.0).item(), abs=1e-12)
    assert mka_objective(logits, preds_v, sets, AdaptationConfig(alpha=0.0, beta=0.0)).item() == \
        pytest.approx(tsc_loss(preds_t, preds_v).item(), abs=1e-12)


def test_objective_hand_batch():
    logits, preds_v, sets = _batch()
    p = torch.softmax(logits, 1).numpy()
    q = preds_v.numpy()
    joint = p.T @ q / 2
    joint = (joint + joint.T) / 2
    r, c = joint.sum(1), joint.sum(0)
    mi = float((joint * np.log(joint / np.outer(r, c))).sum())
    mean = p.mean(0)
    balance = float((mean * np.log(mean * 3)).sum())
    ratios = []
    for row, (m0, m1) in zip(p, [(0, 1), (2, 0)]):
        a, b = row[m0] * row[m1], row[m0] + row[m1]
        rest = [row[j] for j in range(3) if j not in (m0, m1)]
        ratios.append(a / 0.1 - math.log(sum(math.exp(b * l / 0.1) for l in rest)))
    expected = -mi + 1.0 * balance + 0.4 * -np.mean(ratios)
    assert mka_objective(logits, preds_v, sets, AdaptationConfig()).item() == pytest.approx(expected, abs=1e-12)
    assert balance_loss(p).item() == pytest.approx(balance, abs=1e-12)
    assert mce_loss(torch.as_tensor(p), sets, 0.1).item() == pytest.approx(-np.mean(ratios), abs=1e-12)


def test_zero_epochs_returns_source_copy(small):
    model, prompt, records = small.adapt(AdaptationConfig(epochs=0))
    assert records == []
    assert parameter_hash(model) == parameter_hash(small.source_model)
    assert model is not small.source_model
    assert prompt.fingerprint() == small.prompt.fingerprint()


def test_stamps_follow_the_schedule(small):
    n = len(small.target)
    iters = math.ceil(n / 32)
    seen = []
    result = small.adapt(short(epochs=3), check_frozen=True,
                         on_epoch=lambda rec, m, p, bank: seen.append((bank.epoch_stamp, bank.iteration_stamp)))
    assert seen == [(e, e * iters) for e in (1, 2, 3)]
    assert (result.bank.epoch_stamp, result.bank.iteration_stamp) == (3, 3 * iters)


def test_all_off_is_a_no_op(small):
    model, _, records = small.adapt(short(alpha=0.0, beta=0.0, lr=0.0))
    assert parameter_hash(model) == parameter_hash(small.source_model)
    assert records[-1].target_accuracy == small.source_accuracy()


def test_customize_ablation_keeps_the_template(small):
    model, prompt, records = small.adapt(short().ablate("customize"))
    assert prompt.fingerprint() == small.prompt.fingerprint()
    assert all(r.tsc_loss_mean == 0.0 for r in records)


def test_kl_variant_runs(small):
    _, _, records = small.adapt(short().ablate("mi"))
    assert all(math.isfinite(r.mka_loss_mean) for r in records)


def test_records_and_determinism(small):
    a = small.adapt(short())
    b = small.adapt(short())
    assert parameter_hash(a.model) == parameter_hash(b.model)
    assert a.prompt.fingerprint() == b.prompt.fingerprint()
    assert [r.to_json() for r in a.records] == [r.to_json() for r in b.records]
    assert torch.equal(a.bank.target_preds, b.bank.target_preds)
    rec = a.records[0]
    assert EpochRecord.from_json(rec.to_json()) == rec
    assert rec.epoch == 1 and 0 <= rec.target_accuracy <= 1


def test_non_finite_loss_aborts_with_record(small, monkeypatch):
    monkeypatch.setattr(adaptation, "mka_objective",
                        lambda logits, *a: logits.sum() * float("nan"))
    with pytest.raises(NumericalError) as info:
        small.adapt(short())
    assert info.value.record["stage"] == "distill" and info.value.record["epoch"] == 1


def test_prompt_class_count_must_match(small):
    with pytest.raises(ConfigError):
        adapt(small.source_model, small.vil, small.target.inputs, short(), prompt=small.prompt.restrict(5))


def test_toy_adaptation_beats_both_baselines(toy, toy_adapted):
    final = toy_adapted.records[-1].target_accuracy
    assert len(toy_adapted.records) == 15
    assert final > toy.source_accuracy()
    assert final >= toy.zero_shot_accuracy()
