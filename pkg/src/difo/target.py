"""Target classifier, source pretraining and checkpoint storage."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .arrays import load_store, save_store
from .data import DomainDataset
from .errors import DataError, InvalidInputError, ShapeError
from .losses import DTYPE, softmax


class WeightNormLinear(nn.Module):
    """Linear layer whose weight rows are ``g_c * v_c / ||v_c||``."""

    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        self.direction = nn.Parameter(torch.empty(out_features, in_features, dtype=DTYPE))
        self.magnitude = nn.Parameter(torch.empty(out_features, 1, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(out_features, dtype=DTYPE))
        nn.init.xavier_normal_(self.direction)
        with torch.no_grad():
            self.magnitude.copy_(self.direction.norm(dim=1, keepdim=True))

    @property
    def weight(self):
        return self.magnitude * self.direction / self.direction.norm(dim=1, keepdim=True)

    def forward(self, x):
        return nn.functional.linear(x, self.weight, self.bias)


class TargetModel(nn.Module):
    """MLP feature extractor -> affine + batch-norm bottleneck -> weight-normalized classifier."""

    def __init__(self, d_in: int = 16, n_classes: int = 10, d_feat: int = 32, d_bn: int = 16):
        super().__init__()
        self.dims = {"d_in": d_in, "n_classes": n_classes, "d_feat": d_feat, "d_bn": d_bn}
        self.feature_extractor = nn.Sequential(
            nn.Linear(d_in, d_feat, dtype=DTYPE),
            nn.ReLU(),
            nn.Linear(d_feat, d_feat, dtype=DTYPE),
            nn.ReLU(),
        )
        self.bottleneck = nn.Sequential(
            nn.Linear(d_feat, d_bn, dtype=DTYPE),
            nn.BatchNorm1d(d_bn, dtype=DTYPE),
        )
        self.classifier = WeightNormLinear(d_bn, n_classes)

    @property
    def n_classes(self) -> int:
        return self.dims["n_classes"]

    def forward(self, x):
        x = torch.as_tensor(x, dtype=DTYPE)
        if x.dim() != 2 or x.shape[1] != self.dims["d_in"]:
            raise ShapeError(f"expected inputs of shape (n, {self.dims['d_in']}), got {tuple(x.shape)}")
        return self.classifier(self.bottleneck(self.feature_extractor(x)))


def forward(model: TargetModel, batch, chunk: int = 4096):
    """Eval-mode logits; the model's train/eval flag is restored afterwards."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            x = torch.as_tensor(batch, dtype=DTYPE)
            return torch.cat([model(x[i : i + chunk]) for i in range(0, max(len(x), 1), chunk)])
    finally:
        model.train(was_training)


def predict(model: TargetModel, batch):
    return softmax(forward(model, batch), 1.0)


def smooth_labels(y, n_classes: int, sigma: float):
    """``(1 - sigma) * one_hot(y) + sigma / C``; ``y`` may be an int or an array of ints."""
    if not 0 <= sigma < 1:
        raise InvalidInputError(f"sigma must be in [0, 1), got {sigma}")
    y = torch.as_tensor(y, dtype=torch.long)
    if bool(((y < 0) | (y >= n_classes)).any()):
        raise InvalidInputError(f"label out of range for {n_classes} classes")
    one_hot = nn.functional.one_hot(y, n_classes).to(DTYPE)
    return (1 - sigma) * one_hot + sigma / n_classes


def smoothed_cross_entropy(logits, labels, sigma: float):
    targets = smooth_labels(labels, logits.shape[1], sigma)
    return -(targets * torch.log_softmax(logits, dim=1)).sum(1).mean()


@dataclass
class SourceConfig:
    epochs: int = 15
    batch_size: int = 64
    lr: float = 1e-2
    momentum: float = 0.9
    sigma: float = 0.1
    train_fraction: float = 0.9
    d_feat: int = 32
    d_bn: int = 16
    seed: int = 0


@dataclass
class PretrainResult:
    model: TargetModel
    heldout_accuracy: float
    epoch_losses: list = field(default_factory=list)
    train_index: np.ndarray | None = None
    heldout_index: np.ndarray | None = None


def stratified_split(labels, train_fraction: float, rng):
    """Per-class shuffle-and-cut; every class keeps at least one sample on each side."""
    train, held = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_held = min(max(1, int(round((1 - train_fraction) * idx.size))), idx.size - 1)
        held.append(idx[:n_held])
        train.append(idx[n_held:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(held))


def train_supervised(model, inputs, labels, config: SourceConfig, generator):
    """Smoothed-CE training with SGD + momentum; returns per-epoch mean losses."""
    x = torch.as_tensor(inputs, dtype=DTYPE)
    y = torch.as_tensor(labels, dtype=torch.long)
    opt = torch.optim.SGD(model.parameters(), lr=config.lr, momentum=config.momentum)
    losses = []
    model.train()
    for _ in range(config.epochs):
        order = torch.randperm(len(x), generator=generator)
        total = 0.0
        for start in range(0, len(x), config.batch_size):
            idx = order[start : start + config.batch_size]
            if len(idx) < 2:
                continue
            loss = smoothed_cross_entropy(model(x[idx]), y[idx], config.sigma)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        losses.append(total / len(x))
    model.eval()
    return losses


def pretrain_source(data: DomainDataset, config: SourceConfig = SourceConfig()) -> PretrainResult:
    """Train the source model on a 90% stratified split and score the rest."""
    counts = np.bincount(data.labels, minlength=data.n_classes)
    if counts.min() < 2:
        raise DataError(f"class {int(counts.argmin())} has fewer than 2 samples")
    rng = np.random.default_rng(config.seed)
    train_idx, held_idx = stratified_split(data.labels, config.train_fraction, rng)
    torch.manual_seed(config.seed)
    model = TargetModel(data.dim, data.n_classes, config.d_feat, config.d_bn)
    gen = torch.Generator().manual_seed(config.seed)
    losses = train_supervised(model, data.inputs[train_idx], data.labels[train_idx], config, gen)
    preds = forward(model, data.inputs[held_idx]).argmax(1).numpy()
    acc = float((preds == data.labels[held_idx]).mean())
    return PretrainResult(model, acc, losses, train_idx, held_idx)


def parameter_hash(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for name, value in module.state_dict().items():
        h.update(name.encode())
        h.update(value.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def save_model(model: TargetModel, path, seed: int = 0, epoch: int = 0, **extra) -> Path:
    arrays = {name: v.detach().cpu().numpy() for name, v in model.state_dict().items()}
    meta = {"kind": "target_model", **model.dims, "seed": seed, "epoch": epoch, **extra}
    return save_store(path, arrays, meta)


def load_model(path) -> TargetModel:
    arrays, meta = load_store(path)
    if meta.get("kind") != "target_model":
        raise DataError(f"{path} is not a target-model checkpoint")
    dims = {k: int(meta[k]) for k in ("d_in", "n_classes", "d_feat", "d_bn")}
    model = TargetModel(**dims)
    state = model.state_dict()
    if set(arrays) != set(state):
        raise DataError(f"checkpoint arrays {sorted(arrays)} do not match model {sorted(state)}")
    for name, value in state.items():
        if tuple(arrays[name].shape) != tuple(value.shape):
            raise ShapeError(f"{name}: manifest dims imply {tuple(value.shape)}, found {arrays[name].shape}")
    model.load_state_dict({k: torch.as_tensor(arrays[k]).to(state[k].dtype) for k in state})
    model.eval()
    return model
