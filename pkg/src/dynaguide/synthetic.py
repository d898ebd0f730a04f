"""Seeded Voronoi scenes with exact ground truth, and a pseudo-label corruption model.

The corrupter stands in for an imperfect external segmentation model: it
merges regions, grows some regions across their boundaries and flips random
pixels. Output ids are always a subset of the input ids (merged groups keep
their smallest id).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from itertools import combinations

import numpy as np
from scipy import ndimage

from .exceptions import ConfigurationError, InputError
from .validation import check_label_map


@dataclass(frozen=True)
class SceneSpec:
    width: int = 32
    height: int = 32
    region_count: int = 4
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ConfigurationError(f"scene size must be positive, got {self.width}x{self.height}")
        if self.region_count < 1:
            raise ConfigurationError(f"region_count must be >= 1, got {self.region_count}")
        if self.noise_sigma < 0:
            raise ConfigurationError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.region_count > self.width * self.height:
            raise ConfigurationError(
                f"region_count {self.region_count} exceeds pixel count {self.width * self.height}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class CorruptionSpec:
    boundary_dilation_px: int = 2
    merge_fraction: float = 0.2
    flip_fraction: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.boundary_dilation_px < 0:
            raise ConfigurationError(
                f"boundary_dilation_px must be >= 0, got {self.boundary_dilation_px}")
        for name in ("merge_fraction", "flip_fraction"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigurationError(f"{name} must be in [0, 1], got {value}")

    @classmethod
    def none(cls, seed: int = 0) -> "CorruptionSpec":
        return cls(0, 0.0, 0.0, seed)

    def to_dict(self) -> dict:
        return asdict(self)


def _region_colors(rng: np.random.Generator, k: int, min_dist: float) -> np.ndarray:
    colors = np.empty((k, 3))
    n = 0
    attempts = 0
    while n < k:
        c = rng.uniform(0.0, 1.0, 3)
        attempts += 1
        if n == 0 or np.min(np.linalg.norm(colors[:n] - c, axis=1)) >= min_dist:
            colors[n] = c
            n += 1
        elif attempts > 100_000:
            raise ConfigurationError(
                f"cannot place {k} colours at mutual distance >= {min_dist:.3f}; reduce noise")
    return colors


def generate_scene(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(image [3, H, W] in [0, 1], ground truth [H, W])``.

    Sites are distinct pixels, so every region owns at least its own site.
    Region mean colours are at RGB distance >= ``4 * noise_sigma`` from each other.
    """
    rng = np.random.default_rng(spec.seed)
    h, w, k = spec.height, spec.width, spec.region_count
    flat_sites = rng.choice(h * w, size=k, replace=False)
    sites = np.stack(np.divmod(flat_sites, w), axis=1).astype(np.float64)
    yy, xx = np.indices((h, w))
    d2 = (yy[None] - sites[:, 0, None, None]) ** 2 + (xx[None] - sites[:, 1, None, None]) ** 2
    gt = np.argmin(d2, axis=0)
    colors = _region_colors(rng, k, 4.0 * spec.noise_sigma)
    image = colors[gt].transpose(2, 0, 1)
    if spec.noise_sigma > 0:
        image = image + rng.normal(0.0, spec.noise_sigma, image.shape)
    return np.clip(image, 0.0, 1.0), gt.astype(np.intp)


def corrupt_labels(gt, spec: CorruptionSpec) -> np.ndarray:
    """Apply region merges, boundary dilation of random winner regions, then pixel flips."""
    gt = check_label_map(gt, name="ground truth")
    rng = np.random.default_rng(spec.seed)
    ids = np.unique(gt)
    out = gt.copy()

    # merges: union the chosen pairs, each group collapses to its smallest id
    pairs = list(combinations(ids.tolist(), 2))
    n_merge = int(round(spec.merge_fraction * len(pairs)))
    parent = {i: i for i in ids.tolist()}

    def root(i):
        while parent[i] != i:
            i = parent[i]
        return i

    if n_merge:
        for idx in rng.permutation(len(pairs))[:n_merge]:
            a, b = root(pairs[idx][0]), root(pairs[idx][1])
            parent[max(a, b)] = min(a, b)
        lut = np.zeros(int(ids.max()) + 1, dtype=np.intp)
        for i in ids.tolist():
            lut[i] = root(i)
        out = lut[out]

    if spec.boundary_dilation_px > 0:
        present = np.unique(out)
        order = rng.permutation(present)
        winners = order[: max(1, (len(order) + 1) // 2)] if len(order) > 1 else []
        structure = np.ones((3, 3), dtype=bool)
        for lab in winners:
            grown = ndimage.binary_dilation(out == lab, structure=structure,
                                            iterations=spec.boundary_dilation_px)
            out = np.where(grown, lab, out)

    if spec.flip_fraction > 0:
        budget = np.unique(out)
        flip = rng.random(out.shape) < spec.flip_fraction
        out = np.where(flip, rng.choice(budget, size=out.shape), out)
    return out.astype(np.intp)


def make_instance(scene: SceneSpec, corruption: CorruptionSpec | None = None):
    """Generate ``(image, gt, pseudo, pseudo_miou)`` for one scene."""
    from .evaluation import evaluate

    image, gt = generate_scene(scene)
    corruption = CorruptionSpec(seed=scene.seed) if corruption is None else corruption
    pseudo = corrupt_labels(gt, corruption)
    if pseudo.shape != gt.shape:  # pragma: no cover - defensive
        raise InputError("corruption changed label map dimensions")
    return image, gt, pseudo, evaluate(pseudo, gt).miou
