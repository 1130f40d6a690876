import numpy as np
import pytest
import torch

from difo.errors import ConfigError, ShapeError
from difo.losses import batch_joint, mutual_information, tsc_loss
from difo.target import TargetModel, parameter_hash, predict
from difo.vil import (PromptContext, ToyViLModel, customize, get_backend, init_prompt, register_backend, vil_logits,
                      vil_predict)
from helpers import central_difference, relative_error


def small_vil(d_in=3, dim=4, n_classes=3, length=2, seed=0, logit_scale=10.0):
    g = torch.Generator().manual_seed(seed)
    return ToyViLModel(torch.randn(dim, d_in, generator=g, dtype=torch.float64),
                       torch.randn(dim, length * dim, generator=g, dtype=torch.float64),
                       torch.randn(dim, generator=g, dtype=torch.float64),
                       torch.randn(n_classes, dim, generator=g, dtype=torch.float64), logit_scale)


def test_init_prompt_is_seeded():
    a, b = init_prompt(5, 4, 8, seed=3), init_prompt(5, 4, 8, seed=3)
    assert a.fingerprint() == b.fingerprint()
    assert a.context.shape == (4, 8)
    assert not torch.equal(a.context, init_prompt(5, 4, 8, seed=4).context)
    assert a.context.abs().max() < 0.2


def test_init_prompt_rejects_bad_dims():
    with pytest.raises(ShapeError):
        init_prompt(0, 4, 8, seed=0)
    with pytest.raises(ShapeError):
        init_prompt(2, 1, 3, seed=0, class_tokens=torch.zeros(3, 3))


def test_class_tokens_cannot_be_mutated_through_the_property():
    p = init_prompt(3, 2, 4, seed=0)
    before = p.fingerprint()
    p.class_tokens.add_(1.0)
    assert p.fingerprint() == before
    assert p.context.requires_grad


def test_prompt_restrict_keeps_context():
    p = init_prompt(5, 2, 4, seed=0)
    r = p.restrict(3)
    assert r.n_classes == 3 and torch.equal(r.context, p.context)


def test_aligned_embedding_gives_near_one_hot():
    # identity image map, zero gate weights (gain 2 sigmoid(0) = 1) and orthogonal class tokens
    vil = ToyViLModel(torch.eye(3), torch.zeros(3, 3), torch.zeros(3), torch.eye(3), logit_scale=100.0)
    prompt = vil.init_prompt(seed=0)
    p = vil_predict(vil, prompt, torch.tensor([[1.0, 0.0, 0.0]]))
    assert p[0, 0].item() >= 0.999


def test_predict_rows_are_distributions_and_deterministic():
    vil = small_vil()
    prompt = vil.init_prompt(seed=1)
    x = torch.randn(6, 3, generator=torch.Generator().manual_seed(2), dtype=torch.float64)
    x[3] = x[1]
    p = vil_predict(vil, prompt, x, grad=False)
    assert torch.allclose(p.sum(1), torch.ones(6, dtype=torch.float64))
    assert (p >= 0).all()
    assert torch.equal(p[1], p[3])


def test_predict_rejects_wrong_width():
    vil = small_vil()
    with pytest.raises(ShapeError):
        vil_predict(vil, vil.init_prompt(), torch.zeros(2, 5))


def test_prediction_is_differentiable_in_context_only():
    vil = small_vil()
    prompt = vil.init_prompt(seed=0)
    vil_predict(vil, prompt, torch.ones(2, 3, dtype=torch.float64))[:, 0].sum().backward()
    assert prompt.context.grad is not None and prompt.context.grad.abs().sum() > 0
    assert all(not b.requires_grad for b in vil.buffers())
    assert list(vil.parameters()) == []


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_tsc_gradient_through_prompt_matches_finite_differences(seed):
    vil = small_vil(d_in=3, dim=4, n_classes=5, length=2, seed=seed, logit_scale=5.0)
    g = torch.Generator().manual_seed(seed + 10)
    x = torch.randn(8, 3, generator=g, dtype=torch.float64)
    preds_t = torch.softmax(torch.randn(8, 5, generator=g, dtype=torch.float64), 1)
    template = vil.init_prompt(seed=seed)

    def fn(ctx):
        return tsc_loss(preds_t, vil_predict(vil, PromptContext(ctx, template.class_tokens), x))

    prompt = template.copy()
    (analytic,) = torch.autograd.grad(tsc_loss(preds_t, vil_predict(vil, prompt, x)), prompt.context)
    numeric = central_difference(fn, template.context.detach())
    assert relative_error(analytic, numeric) <= 1e-4


def _frozen_target(d_in=3, n_classes=3, seed=0):
    torch.manual_seed(seed)
    return TargetModel(d_in, n_classes, 8, 4).eval()


def test_customize_lr_zero_leaves_prompt_bitwise():
    vil, target = small_vil(), _frozen_target()
    prompt = vil.init_prompt(seed=0)
    before = prompt.fingerprint()
    x = torch.randn(40, 3, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    customize(vil, prompt, target, x, iters=3, lr=0.0, batch_size=16, generator=torch.Generator().manual_seed(0))
    assert prompt.fingerprint() == before


def test_customize_zero_gradient_when_target_is_uniform():
    # with the plain joint u m^T the MI is identically zero; the symmetrized joint is not a product
    vil = small_vil()

    class Uniform(torch.nn.Module):
        def forward(self, x):
            return torch.zeros(len(x), 3, dtype=torch.float64)

    prompt = vil.init_prompt(seed=0)
    before = prompt.context.detach().clone()
    customize(vil, prompt, Uniform(), [torch.randn(10, 3, dtype=torch.float64)], iters=1, lr=0.1,
              symmetrize=False)
    assert torch.allclose(prompt.context.detach(), before, atol=1e-12)


def test_customize_leaves_encoders_and_target_untouched():
    vil, target = small_vil(), _frozen_target()
    hv, ht = parameter_hash(vil), parameter_hash(target)
    prompt = vil.init_prompt(seed=0)
    x = torch.randn(50, 3, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    _, loss = customize(vil, prompt, target, x, iters=5, lr=0.1, batch_size=10,
                        generator=torch.Generator().manual_seed(0))
    assert np.isfinite(loss)
    assert parameter_hash(vil) == hv and parameter_hash(target) == ht
    assert not target.training


def test_customize_requires_an_iteration():
    vil = small_vil()
    with pytest.raises(ConfigError):
        customize(vil, vil.init_prompt(), _frozen_target(), torch.zeros(4, 3), iters=0, lr=0.1)


def test_customization_epoch_raises_mi_on_toy(toy):
    x = torch.as_tensor(toy.target.inputs)
    prompt = toy.prompt.copy()
    target_preds = predict(toy.source_model, x)

    def mi():
        return mutual_information(batch_joint(target_preds, vil_predict(toy.vil, prompt, x, grad=False))).item()

    before = mi()
    customize(toy.vil, prompt, toy.source_model, x, iters=int(np.ceil(len(x) / 64)), lr=1e-2,
              generator=torch.Generator().manual_seed(0))
    assert mi() > before


def test_toy_zero_shot_beats_chance(toy):
    zs = toy.zero_shot_accuracy()
    assert zs > 1 / toy.target.n_classes
    assert zs == 0.6375  # seed-0 fixture


def test_vil_store_round_trip(tmp_path, toy):
    toy.vil.save(tmp_path / "vil")
    back = ToyViLModel.load(tmp_path / "vil")
    assert parameter_hash(back) == parameter_hash(toy.vil) and back.logit_scale == toy.vil.logit_scale
    toy.prompt.save(tmp_path / "prompt")
    assert PromptContext.load(tmp_path / "prompt").fingerprint() == toy.prompt.fingerprint()
    x = toy.target.inputs[:5]
    assert torch.equal(vil_logits(back, toy.prompt, x), vil_logits(toy.vil, toy.prompt, x))


def test_backend_registry(monkeypatch):
    from difo import vil as vil_module

    monkeypatch.setattr(vil_module, "_BACKENDS", dict(vil_module._BACKENDS))
    assert callable(get_backend("toy"))
    with pytest.raises(ConfigError):
        get_backend("clip")
    register_backend("tiny", lambda world, config=None: small_vil())
    assert isinstance(get_backend("tiny")(None), ToyViLModel)
