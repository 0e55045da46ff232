"""Synthetic domain-shift benchmark: Gaussian clusters around text prototypes,
rotated and translated as a whole to mimic a target domain.
"""

from dataclasses import asdict, dataclass

import numpy as np
from scipy.linalg import expm

from .classifier import ClassPrototypes, normalize_rows
from .errors import GenerationError

MAX_PROTOTYPE_ATTEMPTS = 2000


@dataclass(frozen=True)
class SynthConfig:
    """Benchmark knobs.

    prototype_spread: std of the offset between a class's text prototype and
        its image-side cluster centre (the modality gap).
    intra_class_noise: std of per-sample Gaussian noise around the centre.
    domain_shift: rotation angle (radians, largest plane) of the target
        transform; the translation is ``domain_shift * translation_ratio``
        along a random unit direction.
    max_cosine: separability bound on pairwise prototype cosine similarity.

    Both noise terms are per-coordinate std scaled by ``1/sqrt(dim)``, so
    they are comparable to a vector norm.
    """

    num_classes: int = 12
    dim: int = 64
    n_per_class: int = 200
    prototype_spread: float = 0.4
    intra_class_noise: float = 0.6
    domain_shift: float = 2.2
    translation_ratio: float = 0.5
    max_cosine: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2 or self.dim < 2 or self.n_per_class < 1:
            raise GenerationError("need num_classes >= 2, dim >= 2, n_per_class >= 1")
        if min(self.prototype_spread, self.intra_class_noise, self.domain_shift, self.translation_ratio) < 0:
            raise GenerationError("noise and shift magnitudes must be nonnegative")
        if not -1 < self.max_cosine <= 1:
            raise GenerationError("max_cosine must lie in (-1, 1]")

    def to_dict(self):
        return asdict(self)


# Pinned benchmark used by the acceptance suite and the reference oracle.
BENCHMARK = SynthConfig(seed=20240601)
BENCHMARK_CLASS_NAMES = (
    "aeroplane", "bicycle", "bus", "car", "horse", "knife",
    "motorcycle", "person", "plant", "skateboard", "train", "truck",
)


@dataclass
class SyntheticSet:
    features: np.ndarray
    labels: np.ndarray
    prototypes: ClassPrototypes


def _draw_prototypes(cfg, rng):
    for _ in range(MAX_PROTOTYPE_ATTEMPTS):
        p, _ = normalize_rows(rng.standard_normal((cfg.num_classes, cfg.dim)))
        cos = p @ p.T
        np.fill_diagonal(cos, -1.0)
        if cos.max() <= cfg.max_cosine:
            return p
    raise GenerationError(
        f"could not draw {cfg.num_classes} prototypes in {cfg.dim} dims with pairwise cosine <= {cfg.max_cosine}"
    )


def shift_transform(cfg, rng):
    """Rotation ``expm(shift * S)`` (S skew-symmetric, spectral norm 1) and translation vector."""
    a = rng.standard_normal((cfg.dim, cfg.dim))
    skew = a - a.T
    skew /= np.linalg.norm(skew, 2)
    rotation = expm(cfg.domain_shift * skew)
    direction = rng.standard_normal(cfg.dim)
    direction /= np.linalg.norm(direction)
    return rotation, cfg.domain_shift * cfg.translation_ratio * direction


def class_names_for(num_classes):
    if num_classes <= len(BENCHMARK_CLASS_NAMES):
        return list(BENCHMARK_CLASS_NAMES[:num_classes])
    return [f"class_{k:03d}" for k in range(num_classes)]


def generate_synthetic(cfg):
    """Draw a labelled target set and matching prototypes.

    Independent random streams are spawned from ``cfg.seed`` for prototypes,
    cluster centres, the shift transform, sample noise and the sample order,
    so changing one knob leaves the other draws untouched.
    """
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(5)]
    proto_rng, centre_rng, shift_rng, noise_rng, order_rng = streams
    scale = 1.0 / np.sqrt(cfg.dim)

    protos = _draw_prototypes(cfg, proto_rng)
    centres = protos + cfg.prototype_spread * scale * centre_rng.standard_normal(protos.shape)
    rotation, translation = shift_transform(cfg, shift_rng)

    labels = np.repeat(np.arange(cfg.num_classes), cfg.n_per_class)
    noise = cfg.intra_class_noise * scale * noise_rng.standard_normal((labels.size, cfg.dim))
    source = centres[labels] + noise
    target = source @ rotation.T + translation
    target, degenerate = normalize_rows(target)
    if degenerate.any():
        raise GenerationError("a generated feature has zero norm")

    order = order_rng.permutation(labels.size)
    prototypes = ClassPrototypes(class_names_for(cfg.num_classes), protos.astype(np.float32))
    return SyntheticSet(target[order].astype(np.float32), labels[order].astype(np.int64), prototypes)
