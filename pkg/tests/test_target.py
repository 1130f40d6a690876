import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from difo.data import DomainDataset, ShiftSpec, generate_shift_pair
from difo.errors import DataError, InvalidInputError, ShapeError
from difo.evaluation import accuracy
from difo.target import (SourceConfig, TargetModel, forward, load_model, parameter_hash, predict, pretrain_source,
                         save_model, smooth_labels)


def f64(x):
    return torch.as_tensor(x, dtype=torch.float64)


def test_smooth_labels_examples():
    assert torch.equal(smooth_labels(0, 2, 0.0), f64([1.0, 0.0]))
    assert torch.allclose(smooth_labels(1, 4, 0.1), f64([0.025, 0.925, 0.025, 0.025]), atol=1e-15)


@given(st.integers(2, 20).flatmap(lambda c: st.tuples(st.integers(0, c - 1), st.just(c))), st.floats(0, 0.99))
def test_smooth_labels_is_a_distribution(yc, sigma):
    y, c = yc
    p = smooth_labels(y, c, sigma)
    assert abs(p.sum().item() - 1) < 1e-12 and (p >= 0).all()
    assert int(p.argmax()) == y


@pytest.mark.parametrize("y, c, sigma", [(2, 2, 0.1), (-1, 3, 0.1), (0, 3, 1.0), (0, 3, -0.1)])
def test_smooth_labels_rejects(y, c, sigma):
    with pytest.raises(InvalidInputError):
        smooth_labels(y, c, sigma)


def test_classifier_rows_are_unit_direction_times_magnitude():
    model = TargetModel(4, 3, 8, 5)
    w = model.classifier.weight
    norms = w.norm(dim=1, keepdim=True)
    assert torch.allclose(norms, model.classifier.magnitude.abs(), atol=1e-12)


def test_rescaling_a_direction_row_changes_nothing():
    torch.manual_seed(0)
    model = TargetModel(4, 3, 8, 5).eval()
    x = torch.randn(10, 4, dtype=torch.float64)
    before = predict(model, x)
    with torch.no_grad():
        model.classifier.direction[1] *= 7.5
    after = predict(model, x)
    assert torch.allclose(before, after, atol=1e-6)
    assert torch.equal(before.argmax(1), after.argmax(1))


def test_eval_forward_is_deterministic_and_batch_independent():
    torch.manual_seed(1)
    model = TargetModel(4, 3, 8, 5)
    model.train()
    x = torch.randn(12, 4, dtype=torch.float64)
    x[5] = x[2]
    full = forward(model, x)
    assert torch.equal(full[5], full[2])
    assert torch.allclose(forward(model, x[:3]), full[:3], atol=1e-14)
    assert model.training  # flag restored
    p = predict(model, x)
    assert torch.allclose(p.sum(1), torch.ones(12, dtype=torch.float64)) and (p >= 0).all()


def test_forward_rejects_wrong_width():
    with pytest.raises(ShapeError):
        forward(TargetModel(4, 3), torch.zeros(2, 5))


def test_separable_source_reaches_high_heldout_accuracy():
    source, _, _ = generate_shift_pair(ShiftSpec(noise=0.1, input_noise=0.05))
    assert pretrain_source(source).heldout_accuracy >= 0.95


def test_default_source_accuracy_fixture():
    source, _, _ = generate_shift_pair(ShiftSpec())
    assert pretrain_source(source).heldout_accuracy == 0.88  # seed-0 fixture


def test_pretraining_is_seed_deterministic():
    source, _, _ = generate_shift_pair(ShiftSpec(samples_per_class=60))
    a, b = pretrain_source(source), pretrain_source(source)
    assert a.heldout_accuracy == b.heldout_accuracy
    assert parameter_hash(a.model) == parameter_hash(b.model)


def test_zero_epochs_returns_initialization():
    source, _, _ = generate_shift_pair(ShiftSpec(samples_per_class=20))
    result = pretrain_source(source, SourceConfig(epochs=0))
    torch.manual_seed(0)
    init = TargetModel(source.dim, source.n_classes).eval()
    assert parameter_hash(result.model) == parameter_hash(init)


def test_split_is_ninety_ten_and_stratified():
    source, _, _ = generate_shift_pair(ShiftSpec(samples_per_class=50))
    result = pretrain_source(source, SourceConfig(epochs=1))
    assert len(result.heldout_index) == 50 and len(result.train_index) == 450
    assert np.all(np.bincount(source.labels[result.heldout_index]) == 5)
    assert not set(result.train_index) & set(result.heldout_index)


def test_training_loss_is_nonincreasing_within_slack():
    source, _, _ = generate_shift_pair(ShiftSpec())
    losses = pretrain_source(source).epoch_losses
    assert all(b <= a * 1.05 for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]


def test_class_with_one_sample_is_rejected():
    data = DomainDataset(np.zeros((3, 2)), [0, 0, 1], "d", ("a", "b"))
    with pytest.raises(DataError):
        pretrain_source(data)


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(2)
    model = TargetModel(4, 3, 8, 5).eval()
    save_model(model, tmp_path / "ckpt", seed=2, epoch=7)
    back = load_model(tmp_path / "ckpt")
    assert parameter_hash(back) == parameter_hash(model)
    manifest = (tmp_path / "ckpt" / "manifest.txt").read_text()
    assert "seed = 2" in manifest and "epoch = 7" in manifest and "d_in = 4" in manifest
    x = torch.randn(3, 4, dtype=torch.float64)
    assert torch.equal(forward(back, x), forward(model, x))


def test_checkpoint_dims_are_validated(tmp_path):
    save_model(TargetModel(4, 3, 8, 5), tmp_path / "ckpt")
    path = tmp_path / "ckpt" / "manifest.txt"
    path.write_text(path.read_text().replace("d_in = 4", "d_in = 6"))
    with pytest.raises(ShapeError):
        load_model(tmp_path / "ckpt")


def test_no_shift_limit_transfers_perfectly():
    source, target, _ = generate_shift_pair(ShiftSpec(rotation=0.0, scale=0.0, noise=0.0, input_noise=0.0))
    model = pretrain_source(source).model
    assert accuracy(predict(model, target.inputs), target.labels) == 1.0


def test_default_shift_costs_at_least_fifteen_points(toy):
    assert toy.source_accuracy() <= toy.pretrained.heldout_accuracy - 0.15
