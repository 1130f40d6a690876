"""Information-theoretic quantities and the adaptation losses.

Every function works on float64 torch tensors and stays differentiable, so the
same code serves the training loop and the gradient checks. Probabilities are
clamped at ``EPS`` inside logarithms only; ``0 * log 0`` therefore evaluates
to zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import DivergenceUndefinedError, InvalidInputError, ShapeError

EPS = 1e-12
DTYPE = torch.float64


def _tensor(x):
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(x, dtype=DTYPE)


def _batch(x):
    x = _tensor(x)
    if x.dim() == 1:
        x = x.unsqueeze(0)
    if x.dim() != 2:
        raise ShapeError(f"expected a batch of vectors, got shape {tuple(x.shape)}")
    return x


def _xlogy_ratio(p, q):
    """Elementwise p * (log p - log q) with the clamp floor applied to both logs."""
    return p * (torch.log(p.clamp_min(EPS)) - torch.log(q.clamp_min(EPS)))


def softmax(logits, temperature: float = 1.0):
    """Softmax over the last axis of ``logits / temperature``."""
    logits = _tensor(logits)
    if not temperature > 0:
        raise InvalidInputError(f"temperature must be positive, got {temperature}")
    if not torch.isfinite(logits).all():
        raise InvalidInputError("logits contain NaN or Inf")
    return torch.softmax(logits / temperature, dim=-1)


def entropy(p):
    p = _tensor(p)
    return -(p * torch.log(p.clamp_min(EPS))).sum(-1)


def kl_divergence(p, q):
    """KL(p || q) for two probability vectors.

    Mass in ``p`` where ``q`` is exactly zero raises
    :class:`DivergenceUndefinedError`; callers must smooth ``q`` first.
    """
    p, q = _tensor(p), _tensor(q)
    if p.shape != q.shape:
        raise ShapeError(f"shape mismatch {tuple(p.shape)} vs {tuple(q.shape)}")
    if bool(((p > 0) & (q <= 0)).any()):
        raise DivergenceUndefinedError("q has zero mass where p is positive")
    return _xlogy_ratio(p, q).sum(-1).clamp_min(0.0)


def kl_loss(preds_p, preds_q):
    """Batch-mean KL(p_i || q_i), clamped rather than raising; used by the KL ablation."""
    p, q = _batch(preds_p), _batch(preds_q)
    if p.shape != q.shape:
        raise ShapeError(f"shape mismatch {tuple(p.shape)} vs {tuple(q.shape)}")
    return _xlogy_ratio(p, q).sum(-1).mean()


@dataclass(frozen=True)
class JointDistribution:
    """A C x C joint over (class under model A, class under model B)."""

    matrix: torch.Tensor

    @property
    def row_marginal(self):
        return self.matrix.sum(1)

    @property
    def col_marginal(self):
        return self.matrix.sum(0)

    @property
    def n_classes(self) -> int:
        return self.matrix.shape[0]

    def transpose(self) -> "JointDistribution":
        return JointDistribution(self.matrix.t())


def batch_joint(preds_a, preds_b, symmetrize: bool = True) -> JointDistribution:
    """Batch mean of the outer products ``p_a ⊗ p_b``, optionally symmetrized."""
    a, b = _batch(preds_a), _batch(preds_b)
    if a.shape != b.shape:
        raise ShapeError(f"batch/class mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.shape[0] < 1:
        raise ShapeError("empty batch")
    joint = a.t() @ b / a.shape[0]
    if symmetrize:
        joint = 0.5 * (joint + joint.t())
    # exact renormalization keeps the sum at 1 despite rounding in the inputs
    joint = joint / joint.sum()
    return JointDistribution(joint)


def mutual_information(joint: JointDistribution):
    """Discrete MI of a joint table, i.e. KL(J || r c^T). Never negative."""
    j = joint.matrix
    outer = joint.row_marginal.unsqueeze(1) * joint.col_marginal.unsqueeze(0)
    return _xlogy_ratio(j, outer).sum().clamp_min(0.0)


def tsc_loss(preds_t, preds_v, symmetrize: bool = True):
    """Negative MI between the two models' batch predictions."""
    return -mutual_information(batch_joint(preds_t, preds_v, symmetrize))


def balance_loss(preds):
    """KL between the batch-mean prediction and the uniform distribution."""
    p = _batch(preds)
    mean = p.mean(0)
    uniform = torch.full_like(mean, 1.0 / mean.numel())
    return _xlogy_ratio(mean, uniform).sum()


def pc_loss(preds_t, preds_v, alpha: float, symmetrize: bool = True):
    if alpha < 0:
        raise InvalidInputError(f"alpha must be non-negative, got {alpha}")
    return tsc_loss(preds_t, preds_v, symmetrize) + alpha * balance_loss(preds_t)


def _likely_index(likely_sets, n_classes: int, batch_size: int):
    sets = torch.as_tensor(likely_sets, dtype=torch.long)
    if sets.dim() == 1:
        sets = sets.unsqueeze(0)
    if sets.dim() != 2 or sets.shape[0] != batch_size:
        raise ShapeError(f"likely_sets shape {tuple(sets.shape)} does not match batch of {batch_size}")
    n_likely = sets.shape[1]
    if not 1 <= n_likely < n_classes:
        raise InvalidInputError(f"need 1 <= N < C, got N={n_likely}, C={n_classes}")
    if bool(((sets < 0) | (sets >= n_classes)).any()):
        raise InvalidInputError("likely-category index out of range")
    ordered = sets.sort(dim=1).values
    if bool((ordered[:, 1:] == ordered[:, :-1]).any()):
        raise InvalidInputError("duplicate index in a likely-category set")
    return sets


def mce_log_ratio(logits, likely_sets, temperature: float):
    """Per-sample ``a/τ - logsumexp_{j∉M}(b·l_j/τ)``.

    ``a`` is the product and ``b`` the sum of the logits at the likely
    categories ``M``; only the remaining categories enter the denominator.
    """
    logits = _batch(logits)
    if not temperature > 0:
        raise InvalidInputError(f"temperature must be positive, got {temperature}")
    if not torch.isfinite(logits).all():
        raise InvalidInputError("logits contain NaN or Inf")
    batch_size, n_classes = logits.shape
    sets = _likely_index(likely_sets, n_classes, batch_size)
    picked = logits.gather(1, sets)
    a = picked.prod(1)
    b = picked.sum(1)
    others = torch.ones_like(logits, dtype=torch.bool).scatter(1, sets, False)
    scaled = (b.unsqueeze(1) * logits / temperature).masked_fill(~others, -math.inf)
    return a / temperature - torch.logsumexp(scaled, dim=1)


def mce_loss(logits, likely_sets, temperature: float):
    """Most-likely-category encouragement: batch mean of ``-mce_log_ratio``.

    The negation makes minimization raise the likely categories' logits
    relative to the rest.
    """
    return -mce_log_ratio(logits, likely_sets, temperature).mean()
