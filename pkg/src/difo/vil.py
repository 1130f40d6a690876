"""Frozen vision-language branch: prompt context, toy two-encoder model, customization.

Any backend works with the rest of the package as long as it provides
``logits(prompt, x)`` that is differentiable with respect to
``prompt.context`` and ``init_prompt(context_length, seed)``. Backends are
looked up by name through :func:`get_backend`.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .arrays import load_store, save_store
from .errors import ConfigError, DataError, ShapeError
from .losses import DTYPE, kl_loss, softmax, tsc_loss


class PromptContext:
    """Learnable context tokens (L x D) plus frozen per-class tokens (C x D)."""

    def __init__(self, context, class_tokens):
        self.context = nn.Parameter(torch.as_tensor(context, dtype=DTYPE).clone())
        self._class_tokens = torch.as_tensor(class_tokens, dtype=DTYPE).clone()
        self._class_tokens.requires_grad_(False)
        if self.context.dim() != 2 or self._class_tokens.dim() != 2:
            raise ShapeError("context and class tokens must both be matrices")
        if self.context.shape[1] != self._class_tokens.shape[1]:
            raise ShapeError("context and class tokens must share the embedding width")

    @property
    def class_tokens(self):
        return self._class_tokens.clone()

    @property
    def n_classes(self) -> int:
        return self._class_tokens.shape[0]

    @property
    def context_length(self) -> int:
        return self.context.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.context.shape[1]

    def copy(self) -> "PromptContext":
        return PromptContext(self.context.detach(), self._class_tokens)

    def restrict(self, n_classes: int) -> "PromptContext":
        """Same context, class tokens for the first ``n_classes`` classes only."""
        return PromptContext(self.context.detach(), self._class_tokens[:n_classes])

    def fingerprint(self) -> bytes:
        return self.context.detach().numpy().tobytes() + self._class_tokens.numpy().tobytes()

    def save(self, path) -> Path:
        arrays = {"context": self.context.detach().numpy(), "class_tokens": self._class_tokens.numpy()}
        meta = {"kind": "prompt", "context_length": self.context_length, "embed_dim": self.embed_dim,
                "n_classes": self.n_classes}
        return save_store(path, arrays, meta)

    @classmethod
    def load(cls, path) -> "PromptContext":
        arrays, meta = load_store(path)
        if meta.get("kind") != "prompt":
            raise DataError(f"{path} is not a prompt store")
        return cls(arrays["context"], arrays["class_tokens"])


def init_prompt(class_count: int, context_length: int, embed_dim: int, seed: int, class_tokens=None):
    """Seeded N(0, 0.02^2) context tokens; class tokens seeded likewise unless given."""
    if min(class_count, context_length, embed_dim) < 1:
        raise ShapeError("prompt dimensions must be positive")
    gen = torch.Generator().manual_seed(seed)
    context = 0.02 * torch.randn(context_length, embed_dim, generator=gen, dtype=DTYPE)
    if class_tokens is None:
        class_tokens = torch.randn(class_count, embed_dim, generator=gen, dtype=DTYPE)
    class_tokens = torch.as_tensor(class_tokens, dtype=DTYPE)
    if class_tokens.shape != (class_count, embed_dim):
        raise ShapeError(f"class tokens must be ({class_count}, {embed_dim}), got {tuple(class_tokens.shape)}")
    return PromptContext(context, class_tokens)


@dataclass(frozen=True)
class ToyViLConfig:
    embed_dim: int = 32
    context_length: int = 4
    logit_scale: float = 20.0
    class_token_noise: float = 0.2
    nuisance_gain: float = 3.0
    encoder_noise: float = 0.0
    domain_mix: float = 0.8
    seed: int = 0


class ToyViLModel(nn.Module):
    """Two frozen encoders scored by scaled cosine similarity.

    image: ``x -> W_img x``
    text:  ``(context ‖ class_token) -> class_token * 2 sigmoid(W_gate vec(context) + b)``

    The context sets one shared gain per embedding dimension, so a learned
    prompt can emphasise some image features and suppress others for every
    class at once. Every tensor is a buffer; nothing here is trainable.
    """

    def __init__(self, image_proj, gate_weight, gate_bias, class_tokens, logit_scale: float):
        super().__init__()
        self.register_buffer("image_proj", torch.as_tensor(image_proj, dtype=DTYPE).clone())
        self.register_buffer("gate_weight", torch.as_tensor(gate_weight, dtype=DTYPE).clone())
        self.register_buffer("gate_bias", torch.as_tensor(gate_bias, dtype=DTYPE).clone())
        self.register_buffer("class_tokens", torch.as_tensor(class_tokens, dtype=DTYPE).clone())
        if logit_scale <= 0:
            raise ConfigError("logit_scale must be positive")
        self.logit_scale = float(logit_scale)
        if self.gate_weight.shape[1] % self.embed_dim:
            raise ShapeError("gate weight width must be a multiple of the embedding width")

    @property
    def d_in(self) -> int:
        return self.image_proj.shape[1]

    @property
    def embed_dim(self) -> int:
        return self.image_proj.shape[0]

    @property
    def context_length(self) -> int:
        return self.gate_weight.shape[1] // self.embed_dim

    @property
    def n_classes(self) -> int:
        return self.class_tokens.shape[0]

    def init_prompt(self, seed: int = 0) -> PromptContext:
        return init_prompt(self.n_classes, self.context_length, self.embed_dim, seed,
                           class_tokens=self.class_tokens)

    def encode_image(self, x):
        x = torch.as_tensor(x, dtype=DTYPE)
        if x.dim() != 2 or x.shape[1] != self.d_in:
            raise ShapeError(f"expected inputs of shape (n, {self.d_in}), got {tuple(x.shape)}")
        return nn.functional.normalize(x @ self.image_proj.t(), dim=1)

    def encode_text(self, prompt: PromptContext):
        if prompt.context_length != self.context_length or prompt.embed_dim != self.embed_dim:
            raise ShapeError("prompt shape does not match the text encoder")
        gain = 2.0 * torch.sigmoid(self.gate_weight @ prompt.context.reshape(-1) + self.gate_bias)
        return nn.functional.normalize(prompt._class_tokens * gain, dim=1)

    def logits(self, prompt: PromptContext, x):
        return self.logit_scale * self.encode_image(x) @ self.encode_text(prompt).t()

    def forward(self, prompt, x):
        return self.logits(prompt, x)

    def save(self, path) -> Path:
        arrays = {name: buf.numpy() for name, buf in self.named_buffers()}
        return save_store(path, arrays, {"kind": "toy_vil", "logit_scale": repr(self.logit_scale)})

    @classmethod
    def load(cls, path) -> "ToyViLModel":
        arrays, meta = load_store(path)
        if meta.get("kind") != "toy_vil":
            raise DataError(f"{path} is not a toy ViL store")
        return cls(arrays["image_proj"], arrays["gate_weight"], arrays["gate_bias"], arrays["class_tokens"],
                   float(meta["logit_scale"]))


def build_toy_vil(world, config: ToyViLConfig = ToyViLConfig()) -> ToyViLModel:
    """Toy ViL model planted on the generator's class prototypes.

    The first ``d_latent`` embedding dimensions hold an approximate inverse
    of a source/target blend of the mixing matrices; the remaining ones
    project the input directions that blend leaves empty, which carry mostly
    sensor noise. Class tokens are noisy prototypes padded with noise in
    those nuisance dimensions, so the template prompt is misled by them until
    customization learns to gate them down.
    """
    rng = np.random.default_rng(config.seed + 7919)
    prototypes = np.asarray(world.prototypes, dtype=np.float64)
    n_classes, d_latent = prototypes.shape
    D = config.embed_dim
    if D <= d_latent:
        raise ConfigError("embed_dim must exceed the latent dimension")

    mixing = (1 - config.domain_mix) * world.source_mixing + config.domain_mix * world.target_mixing
    unmix = np.linalg.pinv(mixing)
    unmix = unmix + config.encoder_noise * np.linalg.norm(unmix, 2) / np.sqrt(unmix.shape[1]) * \
        rng.standard_normal(unmix.shape)
    # directions of input space the blended mixing never reaches carry only sensor noise
    basis, _, _ = np.linalg.svd(mixing, full_matrices=True)
    off_range = basis[:, d_latent:]
    scramble = rng.standard_normal((D - d_latent, off_range.shape[1])) / np.sqrt(max(off_range.shape[1], 1))
    image_proj = np.vstack([unmix, config.nuisance_gain * scramble @ off_range.T])

    proto_scale = np.sqrt((prototypes ** 2).sum(1).mean())
    token_noise = config.class_token_noise * proto_scale / np.sqrt(d_latent)
    class_tokens = np.hstack([prototypes, np.zeros((n_classes, D - d_latent))])
    class_tokens = class_tokens + token_noise * rng.standard_normal(class_tokens.shape)
    class_tokens[:, d_latent:] *= np.sqrt(d_latent) / np.sqrt(D - d_latent) * 2.0

    gate_weight = rng.standard_normal((D, config.context_length * D))
    gate_bias = rng.standard_normal(D)
    return ToyViLModel(image_proj, gate_weight, gate_bias, class_tokens, config.logit_scale)


_BACKENDS = {"toy": build_toy_vil}


def get_backend(name: str):
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ConfigError(f"unknown ViL backend {name!r}; available: {sorted(_BACKENDS)}") from None


def register_backend(name: str, builder) -> None:
    _BACKENDS[name] = builder


def vil_logits(model, prompt: PromptContext, batch, grad: bool = False):
    if grad:
        return model.logits(prompt, batch)
    with torch.no_grad():
        return model.logits(prompt, batch)


def vil_predict(model, prompt: PromptContext, batch, grad: bool = True):
    """Class probabilities for ``batch``; differentiable w.r.t. ``prompt.context`` when ``grad``."""
    return softmax(vil_logits(model, prompt, batch, grad), 1.0)


def _frozen_target_preds(target_model, x):
    was_training = target_model.training
    target_model.eval()
    try:
        with torch.no_grad():
            return torch.softmax(target_model(x), dim=1)
    finally:
        target_model.train(was_training)


def customize(model, prompt: PromptContext, target_model, data, iters: int, lr: float,
              batch_size: int = 64, generator=None, momentum: float = 0.9, divergence: str = "mi",
              symmetrize: bool = True, optimizer=None):
    """Run ``iters`` SGD steps on the prompt context, minimizing the TSC loss.

    ``data`` is either an (n, d_in) input array sampled with ``generator``,
    or an iterator yielding input batches. The target model is evaluated in
    eval mode without gradients, so neither it nor ``model`` changes.
    Returns ``(prompt, mean_loss)``; the prompt is updated in place.
    """
    if iters < 1:
        raise ConfigError("iters must be at least 1")
    if optimizer is None:
        optimizer = torch.optim.SGD([prompt.context], lr=lr, momentum=momentum)
    batches = _batch_stream(data, batch_size, generator)
    total = 0.0
    for _ in range(iters):
        xb = next(batches)
        preds_t = _frozen_target_preds(target_model, xb)
        preds_v = vil_predict(model, prompt, xb)
        if divergence == "mi":
            loss = tsc_loss(preds_t, preds_v, symmetrize)
        else:
            loss = kl_loss(preds_t, preds_v)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        total += loss.item()
    return prompt, total / iters


def _batch_stream(data, batch_size, generator):
    if isinstance(data, (np.ndarray, torch.Tensor)):
        x = torch.as_tensor(data, dtype=DTYPE)
        while True:
            order = torch.randperm(len(x), generator=generator)
            for start in range(0, len(x), batch_size):
                yield x[order[start : start + batch_size]]
    else:
        for xb in data:
            yield torch.as_tensor(xb, dtype=DTYPE)
