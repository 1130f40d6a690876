import numpy as np
import torch


def central_difference(fn, x, h=1e-5):
    """Numerical gradient of the scalar ``fn`` at float64 tensor ``x``."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        up = fn(x).item()
        flat[i] = orig - h
        down = fn(x).item()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def analytic_gradient(fn, x):
    x = x.detach().clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(fn(x), x)
    return grad


def relative_error(a, b):
    a, b = np.asarray(a).ravel(), np.asarray(b).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def random_probs(rng, batch, n_classes, floor=0.02):
    p = rng.dirichlet(np.ones(n_classes), size=batch) + floor
    return torch.as_tensor(p / p.sum(1, keepdims=True))
