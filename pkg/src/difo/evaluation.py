"""Accuracy metrics, Gaussian-kernel MMD and the static-ensemble weighting sweep."""

from __future__ import annotations

import numpy as np
import torch
from scipy.spatial.distance import cdist, pdist

from .errors import DataError, InvalidInputError, ShapeError
from .losses import DTYPE, entropy


def _argmax(preds):
    # numpy argmax returns the first maximal index, which is the tie rule we want
    return np.asarray(torch.as_tensor(preds, dtype=DTYPE)).argmax(axis=1)


def _labels(labels, n):
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size != n:
        raise ShapeError(f"{n} predictions but {labels.size} labels")
    if n == 0:
        raise DataError("empty input")
    return labels


def accuracy(preds, labels) -> float:
    pred = _argmax(preds)
    labels = _labels(labels, pred.size)
    return float((pred == labels).mean())


def per_class_accuracy(preds, labels, n_classes: int | None = None):
    """Per-class recall; absent classes are NaN. ``.mean()`` of the present ones is the mean-class accuracy."""
    pred = _argmax(preds)
    labels = _labels(labels, pred.size)
    n_classes = n_classes or int(max(labels.max(), pred.max())) + 1
    out = np.full(n_classes, np.nan)
    for c in range(n_classes):
        mask = labels == c
        if mask.any():
            out[c] = (pred[mask] == c).mean()
    return out


def mean_class_accuracy(preds, labels, n_classes: int | None = None) -> float:
    return float(np.nanmean(per_class_accuracy(preds, labels, n_classes)))


def confusion_matrix(preds, labels, n_classes: int):
    """Counts indexed ``[true, predicted]``."""
    pred = _argmax(preds)
    labels = _labels(labels, pred.size)
    if labels.min() < 0 or labels.max() >= n_classes or pred.max() >= n_classes:
        raise DataError(f"label out of range for {n_classes} classes")
    out = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(out, (labels, pred), 1)
    return out


def open_set_scores(preds, labels, known_classes: int, threshold: float | None = None):
    """Entropy-threshold rejection on ``known_classes``-way predictions.

    Samples whose prediction entropy exceeds ``threshold`` (default: the
    median entropy) are called unknown. Returns a dict with known-class
    accuracy, unknown-rejection accuracy and their average.
    """
    preds = torch.as_tensor(preds, dtype=DTYPE)
    labels = _labels(labels, preds.shape[0])
    ent = entropy(preds).numpy()
    if threshold is None:
        threshold = float(np.median(ent))
    pred = np.where(ent > threshold, known_classes, _argmax(preds))
    known = labels < known_classes
    known_acc = float((pred[known] == labels[known]).mean()) if known.any() else float("nan")
    unknown_acc = float((pred[~known] == known_classes).mean()) if (~known).any() else float("nan")
    return {"known": known_acc, "unknown": unknown_acc, "os": float(np.nanmean([known_acc, unknown_acc])),
            "threshold": threshold}


def median_bandwidth(X, Y) -> float:
    """Median pairwise Euclidean distance of the pooled sample."""
    pooled = np.concatenate([np.asarray(X, dtype=np.float64), np.asarray(Y, dtype=np.float64)])
    med = float(np.median(pdist(pooled)))
    return med if med > 0 else 1.0


def mmd(X, Y, bandwidth: float | None = None) -> float:
    """Biased squared MMD with kernel ``exp(-||x - y||^2 / (2 σ^2))``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    if X.shape[0] == 0 or Y.shape[0] == 0:
        raise DataError("mmd needs two non-empty samples")
    if X.shape[1] != Y.shape[1]:
        raise ShapeError(f"dimension mismatch {X.shape[1]} vs {Y.shape[1]}")
    if bandwidth is None:
        bandwidth = median_bandwidth(X, Y)
    if not bandwidth > 0:
        raise InvalidInputError("bandwidth must be positive")
    gamma = 1.0 / (2.0 * bandwidth**2)

    def k(A, B):
        return np.exp(-gamma * cdist(A, B, "sqeuclidean")).mean()

    return float(k(X, X) + k(Y, Y) - 2.0 * k(X, Y))


def mmd_trajectory(epoch_logit_spaces, oracle_logits, bandwidth: float | None = None,
                   max_samples: int | None = None, seed: int = 0):
    """MMD from each epoch's logit space to the oracle logit space.

    All spaces must be logits of the same samples in the same order; when
    ``max_samples`` is set one fixed random subset of rows is used throughout.
    """
    oracle = np.asarray(oracle_logits, dtype=np.float64)
    rows = np.arange(oracle.shape[0])
    if max_samples is not None and oracle.shape[0] > max_samples:
        rows = np.sort(np.random.default_rng(seed).choice(oracle.shape[0], max_samples, replace=False))
    out = []
    for space in epoch_logit_spaces:
        space = np.asarray(space, dtype=np.float64)
        if space.shape != oracle.shape:
            raise ShapeError(f"logit space {space.shape} does not match oracle {oracle.shape}")
        out.append(mmd(space[rows], oracle[rows], bandwidth))
    return out


def ensemble_accuracy(source_preds, vil_preds, labels, weight: float) -> float:
    """Accuracy of ``weight * p_vil + (1 - weight) * p_source``."""
    if not 0 <= weight <= 1:
        raise InvalidInputError("weight must be in [0, 1]")
    src = torch.as_tensor(source_preds, dtype=DTYPE)
    vil = torch.as_tensor(vil_preds, dtype=DTYPE)
    if weight == 0:
        mixed = src
    elif weight == 1:
        mixed = vil
    else:
        mixed = weight * vil + (1 - weight) * src
    return accuracy(mixed, labels)


def weight_sweep(source_model, vil, prompt, target_data, grid=None):
    """Static source/ViL ensemble accuracy for each weight in ``grid`` (default 0.0, 0.1, ..., 1.0)."""
    from .target import predict
    from .vil import vil_predict

    grid = np.round(np.linspace(0, 1, 11), 10) if grid is None else grid
    src = predict(source_model, target_data.inputs)
    with torch.no_grad():
        vil_p = vil_predict(vil, prompt, target_data.inputs, grad=False)
    return [ensemble_accuracy(src, vil_p, target_data.labels, float(w)) for w in grid]


def zero_shot_accuracy(vil, prompt, dataset) -> float:
    from .vil import vil_predict

    return accuracy(vil_predict(vil, prompt, dataset.inputs, grad=False), dataset.labels)


def train_oracle(dataset, config=None):
    """Supervised model on the (labelled) target domain, same architecture as the target model."""
    from .target import SourceConfig, TargetModel, train_supervised

    config = config or SourceConfig()
    torch.manual_seed(config.seed)
    model = TargetModel(dataset.dim, dataset.n_classes, config.d_feat, config.d_bn)
    gen = torch.Generator().manual_seed(config.seed)
    train_supervised(model, dataset.inputs, dataset.labels, config, gen)
    return model
