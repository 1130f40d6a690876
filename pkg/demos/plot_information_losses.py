"""
Mutual information versus KL as an alignment signal
===================================================

Two models can agree on *which samples belong together* while disagreeing
on the class names. KL between their per-sample predictions punishes that;
mutual information over the batch joint does not.
"""

import math

import torch

from difo.losses import batch_joint, kl_loss, mutual_information, tsc_loss

# four samples, two classes; model B swaps the class labels of model A
a = torch.tensor([[0.95, 0.05], [0.9, 0.1], [0.1, 0.9], [0.05, 0.95]], dtype=torch.float64)
b = a.flip(1)

print("KL(a || b) per sample, averaged:", round(kl_loss(a, b).item(), 4))
print("MI of the batch joint:           ", round(mutual_information(batch_joint(a, b)).item(), 4))
print("upper bound log 2:               ", round(math.log(2), 4))

###############################################################################
# The joint table shows why: all the mass sits on one anti-diagonal, so
# knowing one model's answer pins down the other's.

print(batch_joint(a, b, symmetrize=False).matrix.numpy().round(3))

###############################################################################
# The loss used for prompt learning is just the negative MI, so it is never
# positive and reaches -log C for perfectly correlated, balanced batches.

print("tsc loss, a vs a:", round(tsc_loss(a, a).item(), 4))
print("tsc loss, uniform:", abs(tsc_loss(torch.full((4, 2), 0.5, dtype=torch.float64), a).item()))
