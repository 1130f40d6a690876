"""Synthetic domain-shift benchmark, dataset splits and dataset storage.

Each class c owns a latent prototype ``mu_c``. A sample of class c is
``A @ (mu_c + eps) + nu`` where ``A`` is the domain's mixing matrix and ``nu`` isotropic sensor noise. The target
mixing is the source mixing after a random rotation and an anisotropic
scaling in input space, which is enough to break a source classifier while
keeping the target classes clustered.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.linalg import expm

from .arrays import load_store, save_store
from .errors import DataError, ShapeError


@dataclass(frozen=True)
class DomainDataset:
    inputs: np.ndarray
    labels: np.ndarray
    domain_name: str
    class_names: tuple

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if inputs.ndim != 2:
            raise ShapeError(f"inputs must be 2-D, got shape {inputs.shape}")
        if labels.shape != (inputs.shape[0],):
            raise ShapeError(f"{inputs.shape[0]} inputs but labels of shape {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= len(self.class_names)):
            raise DataError("label outside [0, C)")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_names", tuple(self.class_names))

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, mask) -> "DomainDataset":
        return replace(self, inputs=self.inputs[mask], labels=self.labels[mask])

    def equals(self, other: "DomainDataset") -> bool:
        return (
            self.domain_name == other.domain_name
            and self.class_names == other.class_names
            and np.array_equal(self.inputs, other.inputs)
            and np.array_equal(self.labels, other.labels)
        )


@dataclass(frozen=True)
class ShiftSpec:
    """Parameters of the synthetic source/target pair.

    ``rotation`` is the rotation magnitude (radians, spread over random
    planes) and ``scale`` the log-range of the per-axis scaling applied to
    the target domain in input space.
    """

    n_classes: int = 10
    d_latent: int = 8
    d_in: int = 16
    samples_per_class: int = 200
    prototype_scale: float = 1.0
    noise: float = 0.7
    input_noise: float = 0.3
    rotation: float = 2.0
    scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("n_classes", "d_latent", "d_in", "samples_per_class"):
            if getattr(self, name) < 1:
                raise DataError(f"{name} must be positive")
        if self.d_in < self.d_latent:
            raise DataError("d_in must be at least d_latent")
        if min(self.noise, self.input_noise, self.scale) < 0 or self.prototype_scale <= 0:
            raise DataError("noise and scale must be non-negative, prototype_scale positive")


@dataclass(frozen=True)
class ShiftWorld:
    """Generator ground truth: class prototypes and both mixing matrices."""

    prototypes: np.ndarray
    source_mixing: np.ndarray
    target_mixing: np.ndarray
    class_names: tuple = field(default=())


def class_names_for(n_classes: int) -> tuple:
    return tuple(f"class_{c}" for c in range(n_classes))


def _random_rotation(rng, dim, magnitude):
    skew = rng.standard_normal((dim, dim))
    skew = skew - skew.T
    skew /= np.linalg.norm(skew, 2)
    return expm(magnitude * skew)


def _sample_domain(rng, world_prototypes, mixing, spec, name, names):
    labels = np.repeat(np.arange(spec.n_classes), spec.samples_per_class)
    latent = world_prototypes[labels] + spec.noise * rng.standard_normal((labels.size, spec.d_latent))
    sensor = spec.input_noise * rng.standard_normal((labels.size, spec.d_in))
    return DomainDataset(latent @ mixing.T + sensor, labels, name, names)


def generate_shift_pair(spec: ShiftSpec = ShiftSpec()):
    """Build ``(source, target, world)`` deterministically from ``spec``."""
    rng = np.random.default_rng(spec.seed)
    prototypes = spec.prototype_scale * rng.standard_normal((spec.n_classes, spec.d_latent))
    source_mixing = rng.standard_normal((spec.d_in, spec.d_latent)) / np.sqrt(spec.d_latent)
    rotation = _random_rotation(rng, spec.d_in, spec.rotation)
    scaling = np.exp(rng.uniform(-spec.scale, spec.scale, spec.d_in))
    target_mixing = (rotation * scaling[None, :]) @ source_mixing
    names = class_names_for(spec.n_classes)
    source = _sample_domain(rng, prototypes, source_mixing, spec, "source", names)
    target = _sample_domain(rng, prototypes, target_mixing, spec, "target", names)
    return source, target, ShiftWorld(prototypes, source_mixing, target_mixing, names)


def partial_set_split(target: DomainDataset, keep_classes: int) -> DomainDataset:
    """Keep only the first ``keep_classes`` classes; the label space is unchanged."""
    if not 1 <= keep_classes <= target.n_classes:
        raise DataError(f"keep_classes must be in [1, {target.n_classes}]")
    return target.subset(target.labels < keep_classes)


def open_set_split(target: DomainDataset, known_classes: int) -> DomainDataset:
    """Relabel every class >= ``known_classes`` to a single unknown id ``known_classes``."""
    if not 1 <= known_classes <= target.n_classes:
        raise DataError(f"known_classes must be in [1, {target.n_classes}]")
    if known_classes == target.n_classes:
        return target
    labels = np.minimum(target.labels, known_classes)
    names = target.class_names[:known_classes] + ("unknown",)
    return DomainDataset(target.inputs, labels, target.domain_name, names)


def export_dataset(dataset: DomainDataset, path) -> Path:
    meta = {
        "kind": "dataset",
        "domain_name": dataset.domain_name,
        "class_names": ",".join(dataset.class_names),
        "n": len(dataset),
        "d_in": dataset.dim,
    }
    return save_store(path, {"inputs": dataset.inputs, "labels": dataset.labels}, meta)


def load_dataset(path) -> DomainDataset:
    arrays, meta = load_store(path)
    if meta.get("kind") != "dataset":
        raise DataError(f"{path} is not a dataset store")
    return DomainDataset(
        arrays["inputs"], arrays["labels"], meta["domain_name"], tuple(meta["class_names"].split(","))
    )


def default_featurizer(path: Path) -> np.ndarray:
    """``.npy`` files load as-is; images become a flattened 8x8 grayscale thumbnail in [0, 1]."""
    if path.suffix == ".npy":
        return np.load(path).astype(np.float64).ravel()
    from PIL import Image

    with Image.open(path) as img:
        thumb = img.convert("L").resize((8, 8))
        return np.asarray(thumb, dtype=np.float64).ravel() / 255.0


def load_image_folder(
    path,
    manifest,
    class_names=None,
    featurizer: Callable[[Path], np.ndarray] = default_featurizer,
    domain_name: str | None = None,
) -> DomainDataset:
    """Featurize every file listed in ``manifest`` (lines of ``relative/path label``).

    ``manifest`` is a path to such a file or an iterable of ``(path, label)``
    pairs. Labels are integers unless ``class_names`` is given, in which
    case names are accepted too.
    """
    root = Path(path)
    if isinstance(manifest, (str, Path)):
        pairs = []
        for lineno, line in enumerate(Path(manifest).read_text().splitlines(), 1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.rsplit(maxsplit=1)
            if len(parts) != 2:
                raise DataError(f"{manifest}:{lineno}: expected '<path> <label>'")
            pairs.append((parts[0], parts[1]))
    else:
        pairs = list(manifest)
    if not pairs:
        raise DataError("manifest lists no files")

    seen = set()
    for rel, _ in pairs:
        if rel in seen:
            raise DataError(f"duplicate path in manifest: {rel}")
        seen.add(rel)

    raw_labels = []
    for rel, label in pairs:
        label = str(label)
        if class_names is not None and label in class_names:
            raw_labels.append(list(class_names).index(label))
        else:
            try:
                raw_labels.append(int(label))
            except ValueError:
                raise DataError(f"unrecognized label {label!r} for {rel}") from None
    n_classes = len(class_names) if class_names is not None else max(raw_labels) + 1
    if min(raw_labels) < 0 or max(raw_labels) >= n_classes:
        raise DataError("label out of range")

    features = []
    for rel, _ in pairs:
        file = root / rel
        if not file.is_file():
            raise DataError(f"missing file: {file}")
        features.append(np.asarray(featurizer(file), dtype=np.float64).ravel())
    if len({f.size for f in features}) != 1:
        raise DataError("featurizer produced vectors of differing length")
    names = tuple(class_names) if class_names is not None else class_names_for(n_classes)
    return DomainDataset(np.stack(features), np.array(raw_labels), domain_name or root.name, names)
