"""Alternating prompt customization / knowledge distillation loop."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
import numpy as np
import torch

from .bank import PredictionBank, init_bank, most_likely, sample_weight
from .errors import ConfigError, NumericalError
from .evaluation import accuracy, mmd_trajectory
from .losses import DTYPE, balance_loss, kl_loss, mce_loss, softmax, tsc_loss
from .target import TargetModel, forward, parameter_hash
from .vil import PromptContext, customize, vil_logits, vil_predict

ABLATIONS = ("mce", "customize", "mi", "pc")


@dataclass(frozen=True)
class AdaptationConfig:
    alpha: float = 1.0
    beta: float = 0.4
    lam: float = 10.0
    tau: float = 0.1
    n_likely: int = 2
    epochs: int = 15
    batch_size: int = 64
    lr: float = 1e-3
    prompt_lr: float = 1e-2
    momentum: float = 0.9
    seed: int = 0
    symmetrize: bool = True
    use_mce: bool = True
    customize: bool = True
    divergence: str = "mi"
    mce_input: str = "probs"
    freeze: str = "classifier"

    def validate(self, n_classes: int | None = None) -> "AdaptationConfig":
        for name in ("lam", "tau"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("alpha", "beta", "lr", "prompt_lr", "momentum"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.n_likely < 1 or (n_classes is not None and self.n_likely >= n_classes):
            raise ConfigError(f"n_likely must satisfy 1 <= N < C (N={self.n_likely}, C={n_classes})")
        if self.divergence not in ("mi", "kl"):
            raise ConfigError("divergence must be 'mi' or 'kl'")
        return self

    def ablate(self, *names) -> "AdaptationConfig":
        """Switch off components: ``mce``, ``customize``, ``mi`` (use KL), ``pc`` (drop the balance term)."""
        cfg = self
        for name in names:
            if name == "mce":
                cfg = replace(cfg, use_mce=False)
            elif name == "customize":
                cfg = replace(cfg, customize=False)
            elif name == "mi":
                cfg = replace(cfg, divergence="kl")
            elif name == "pc":
                cfg = replace(cfg, alpha=0.0)
            else:
                raise ConfigError(f"unknown ablation {name!r}; choose from {ABLATIONS}")
        return cfg


def variant(config: AdaptationConfig, name: str) -> AdaptationConfig:
    """Named loss-component variants: ``full``, ``no_mce`` and ``tsc_only``."""
    if name == "full":
        return config
    if name == "no_mce":
        return config.ablate("mce")
    if name == "tsc_only":
        return config.ablate("mce", "pc")
    raise ConfigError(f"unknown variant {name!r}")


@dataclass
class EpochRecord:
    epoch: int
    tsc_loss_mean: float
    mka_loss_mean: float
    target_accuracy: float | None = None
    vil_accuracy: float | None = None
    mmd_to_oracle: float | None = None
    mmd_vil_to_oracle: float | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "EpochRecord":
        data = json.loads(line)
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


class AdaptResult(tuple):
    """Unpacks as ``(model, prompt, records)``; the final bank rides along as ``.bank``."""

    def __new__(cls, model: TargetModel, prompt: PromptContext, records: list, bank: PredictionBank):
        obj = super().__new__(cls, (model, prompt, records))
        obj.bank = bank
        return obj

    model = property(lambda self: self[0])
    prompt = property(lambda self: self[1])
    records = property(lambda self: self[2])


def alignment_loss(preds_t, preds_v, config: AdaptationConfig):
    if config.divergence == "kl":
        return kl_loss(preds_t, preds_v)
    return tsc_loss(preds_t, preds_v, config.symmetrize)


def mka_objective(logits_t, preds_v, likely_sets, config: AdaptationConfig):
    """``alignment + alpha * balance + beta * mce`` on a target-model batch."""
    preds_t = softmax(logits_t, 1.0)
    loss = alignment_loss(preds_t, preds_v, config)
    if config.alpha:
        loss = loss + config.alpha * balance_loss(preds_t)
    if config.use_mce and config.beta:
        if config.mce_input == "probs":
            scores = preds_t
        elif config.mce_input == "shifted":
            scores = logits_t - logits_t.min(dim=1, keepdim=True).values
        else:
            scores = logits_t
        loss = loss + config.beta * mce_loss(scores, likely_sets, config.tau)
    return loss


def _batches(n, batch_size, generator):
    order = torch.randperm(n, generator=generator)
    return [order[s : s + batch_size] for s in range(0, n, batch_size)]


def _check_finite(loss, epoch, step, stage):
    if not torch.isfinite(loss):
        record = {"epoch": epoch, "step": step, "stage": stage, "loss": loss.item()}
        raise NumericalError(f"non-finite {stage} loss at epoch {epoch}, step {step}", record)


def adapt(source_model: TargetModel, vil, target_inputs, config: AdaptationConfig = AdaptationConfig(),
          prompt: PromptContext | None = None, labels=None, oracle_logits=None, mmd_samples: int | None = 512,
          check_frozen: bool = False, on_epoch=None) -> AdaptResult:
    """Adapt a copy of ``source_model`` to ``target_inputs`` with the frozen ``vil`` branch.

    Each epoch refreshes the ViL half of the bank, runs M prompt steps on the
    alignment loss with the target model frozen, then M target-model steps on
    the distillation objective with the prompt frozen, writing each batch's
    predictions back into the bank. ``labels`` only feed the epoch records.
    ``oracle_logits`` (same rows as ``target_inputs``) turns on MMD tracking.
    """
    n_classes = source_model.n_classes
    config.validate(n_classes)
    x = torch.as_tensor(target_inputs, dtype=DTYPE)
    n = x.shape[0]
    iters = math.ceil(n / config.batch_size)

    model = copy.deepcopy(source_model)
    prompt = vil.init_prompt(seed=config.seed) if prompt is None else prompt.copy()
    if prompt.n_classes != n_classes:
        raise ConfigError(f"prompt covers {prompt.n_classes} classes, model predicts {n_classes}")

    gen_prompt = torch.Generator().manual_seed(config.seed)
    gen_target = torch.Generator().manual_seed(config.seed + 1)
    rng_omega = np.random.default_rng(config.seed + 2)
    prompt_opt = torch.optim.SGD([prompt.context], lr=config.prompt_lr, momentum=config.momentum)
    frozen = {"none": (), "classifier": ("classifier.",), "head": ("classifier.", "bottleneck.1.")}[config.freeze]
    trainable = [p for name, p in model.named_parameters() if not name.startswith(frozen or ("\0",))]
    model_opt = torch.optim.SGD(trainable, lr=config.lr, momentum=config.momentum)
    vil_hash = parameter_hash(vil) if check_frozen else None

    bank = init_bank(model, vil, prompt, x)
    records = []
    for epoch in range(1, config.epochs + 1):
        bank.update_vil_all(vil_predict(vil, prompt, x, grad=False))

        tsc_mean = 0.0
        if config.customize:
            model_hash = parameter_hash(model) if check_frozen else None
            # v* is trained in place; the bank keeps the prompt it was refreshed with
            batches = iter([x[idx] for idx in _batches(n, config.batch_size, gen_prompt)])
            _, tsc_mean = customize(vil, prompt, model, batches, iters, config.prompt_lr,
                                     divergence=config.divergence, symmetrize=config.symmetrize,
                                     optimizer=prompt_opt)
            if not math.isfinite(tsc_mean):
                raise NumericalError(f"non-finite customization loss at epoch {epoch}",
                                     {"epoch": epoch, "stage": "customize", "loss": tsc_mean})
            if check_frozen and parameter_hash(model) != model_hash:
                raise AssertionError("target model changed during customization")

        prompt_before = prompt.fingerprint() if check_frozen else None
        mka_total = 0.0
        for step, idx in enumerate(_batches(n, config.batch_size, gen_target)):
            xb = x[idx]
            # batch norm needs >1 sample; lr=0 must leave running stats untouched too
            model.train(len(idx) > 1 and config.lr > 0)
            logits = model(xb)
            preds_v = vil_predict(vil, prompt, xb, grad=False)
            omega = sample_weight(config.lam, rng_omega, size=len(idx))
            likely = most_likely(bank.fuse(idx, omega), config.n_likely)
            loss = mka_objective(logits, preds_v, likely, config)
            _check_finite(loss, epoch, step, "distill")
            model_opt.zero_grad()
            loss.backward()
            model_opt.step()
            bank.update_target(idx, torch.softmax(logits.detach(), dim=1))
            mka_total += loss.item()
        model.eval()
        if check_frozen and prompt.fingerprint() != prompt_before:
            raise AssertionError("prompt changed during distillation")

        record = EpochRecord(epoch, tsc_mean, mka_total / iters)
        if labels is not None:
            record.target_accuracy = accuracy(forward(model, x), labels)
            record.vil_accuracy = accuracy(vil_logits(vil, prompt, x), labels)
        if oracle_logits is not None:
            tgt, vl = mmd_trajectory([forward(model, x).numpy(), vil_logits(vil, prompt, x).numpy()],
                                     oracle_logits, max_samples=mmd_samples, seed=config.seed)
            record.mmd_to_oracle, record.mmd_vil_to_oracle = tgt, vl
        records.append(record)
        if on_epoch is not None:
            on_epoch(record, model, prompt, bank)

    if check_frozen and parameter_hash(vil) != vil_hash:
        raise AssertionError("ViL encoders changed during adaptation")
    return AdaptResult(model, prompt, records, bank)
