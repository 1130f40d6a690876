"""Memory-aware predictor: per-sample prediction history, fusion and top-N extraction."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from .arrays import load_store, save_store
from .errors import DataError, InvalidInputError, ShapeError
from .losses import DTYPE


class PredictionBank:
    """Historical target-model and ViL predictions for every target sample.

    Target rows change one batch at a time (``update_target``); the ViL table
    is only ever replaced whole (``update_vil_all``). The two stamps count
    those calls.
    """

    def __init__(self, target_preds, vil_preds, epoch_stamp: int = 0, iteration_stamp: int = 0):
        target_preds = torch.as_tensor(target_preds, dtype=DTYPE).detach().clone()
        vil_preds = torch.as_tensor(vil_preds, dtype=DTYPE).detach().clone()
        if target_preds.dim() != 2 or target_preds.shape != vil_preds.shape:
            raise ShapeError(f"bank tables must be matching n x C, got {tuple(target_preds.shape)} "
                             f"and {tuple(vil_preds.shape)}")
        if target_preds.shape[0] == 0:
            raise DataError("cannot build a prediction bank over zero samples")
        self.target_preds = target_preds
        self.vil_preds = vil_preds
        self.epoch_stamp = int(epoch_stamp)
        self.iteration_stamp = int(iteration_stamp)

    def __len__(self):
        return self.target_preds.shape[0]

    @property
    def n_classes(self) -> int:
        return self.target_preds.shape[1]

    def _check_indices(self, indices):
        idx = torch.as_tensor(indices, dtype=torch.long).reshape(-1)
        if bool(((idx < 0) | (idx >= len(self))).any()):
            raise IndexError(f"bank index out of range for {len(self)} samples")
        return idx

    def update_target(self, indices, preds) -> None:
        idx = self._check_indices(indices)
        preds = torch.as_tensor(preds, dtype=DTYPE).detach().reshape(len(idx), -1)
        if preds.shape[1] != self.n_classes:
            raise ShapeError(f"expected {self.n_classes} classes, got {preds.shape[1]}")
        if torch.unique(idx).numel() != idx.numel():
            raise InvalidInputError("update_target indices must be unique")
        self.target_preds[idx] = preds
        self.iteration_stamp += 1

    def update_vil_all(self, preds_all) -> None:
        preds_all = torch.as_tensor(preds_all, dtype=DTYPE).detach()
        if preds_all.shape != self.vil_preds.shape:
            raise ShapeError(f"expected {tuple(self.vil_preds.shape)}, got {tuple(preds_all.shape)}")
        self.vil_preds = preds_all.clone()
        self.epoch_stamp += 1

    def fuse(self, indices, omega):
        """``omega * p_i + (1 - omega) * p'_i``; ``omega`` is a scalar or one weight per index."""
        idx = self._check_indices(indices)
        omega = torch.as_tensor(omega, dtype=DTYPE).reshape(-1, 1)
        if bool(((omega < 0) | (omega > 1)).any()):
            raise InvalidInputError("fusion weight must lie in [0, 1]")
        return omega * self.target_preds[idx] + (1 - omega) * self.vil_preds[idx]

    def save(self, path) -> Path:
        meta = {"kind": "prediction_bank", "n": len(self), "n_classes": self.n_classes,
                "epoch_stamp": self.epoch_stamp, "iteration_stamp": self.iteration_stamp}
        return save_store(path, {"target_preds": self.target_preds.numpy(),
                                 "vil_preds": self.vil_preds.numpy()}, meta)

    @classmethod
    def load(cls, path) -> "PredictionBank":
        arrays, meta = load_store(path)
        if meta.get("kind") != "prediction_bank":
            raise DataError(f"{path} is not a prediction-bank store")
        return cls(arrays["target_preds"], arrays["vil_preds"], int(meta["epoch_stamp"]),
                   int(meta["iteration_stamp"]))


def init_bank(model, vil, prompt, data) -> PredictionBank:
    """Bank filled from full eval-mode passes of both models over ``data``; stamps start at zero."""
    from .target import predict
    from .vil import vil_predict

    x = torch.as_tensor(getattr(data, "inputs", data), dtype=DTYPE)
    if x.shape[0] == 0:
        raise DataError("cannot build a prediction bank over zero samples")
    return PredictionBank(predict(model, x), vil_predict(vil, prompt, x, grad=False))


def fuse(bank: PredictionBank, i: int, omega: float):
    return bank.fuse([i], omega)[0]


def sample_weight(lam: float, rng: np.random.Generator, size=None):
    """Exponential(rate=lam) draw(s), clamped to at most 1."""
    if not lam > 0:
        raise InvalidInputError(f"lambda must be positive, got {lam}")
    return np.minimum(rng.exponential(1.0 / lam, size=size), 1.0)


def most_likely(p, n: int):
    """Indices of the ``n`` largest entries, ties going to the lower index.

    Accepts one vector (returns a 1-D index tensor) or a batch (returns B x n).
    """
    p = torch.as_tensor(p, dtype=DTYPE)
    n_classes = p.shape[-1]
    if not 1 <= n < n_classes:
        raise InvalidInputError(f"need 1 <= N < C, got N={n}, C={n_classes}")
    order = torch.sort(-p, dim=-1, stable=True).indices
    return order[..., :n]
