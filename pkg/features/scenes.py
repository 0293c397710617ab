# features/scenes.py

"""
Procedural texture scenes: a Voronoi partition of the image where every region
carries a material class and is filled with a texture keyed to that class.
Used as the synthetic dataset for the toy training runs.
"""

import logging

import numpy as np

from util.errors import ValidationError
from util.numerics import upsample_bilinear
from util.sample import Sample

logger = logging.getLogger(__name__)

TEXTURES = ("checkerboard", "stripes", "value-noise", "gradient")

# high-contrast colours for easy scenes, indexed by class
EASY_PALETTE = np.array([
    [0.10, 0.15, 0.85],
    [0.90, 0.75, 0.10],
    [0.15, 0.80, 0.20],
    [0.85, 0.15, 0.20],
    [0.60, 0.20, 0.80],
    [0.10, 0.75, 0.80],
])


def texture_kind(class_id: int) -> str:
    return TEXTURES[class_id % len(TEXTURES)]


def class_colors(class_id: int, easy: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Two endpoint colours per class; fixed for the class, independent of the scene seed."""
    if easy:
        base = EASY_PALETTE[class_id % len(EASY_PALETTE)]
        return base * 0.85, np.minimum(base * 1.15, 1.0)
    rng = np.random.default_rng([7919, class_id])
    return rng.uniform(0.05, 0.55, size=3), rng.uniform(0.45, 0.95, size=3)


def _texture(class_id: int, shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """A [0, 1] pattern of the given shape; the pattern family and frequency depend on the class."""
    H, W = shape
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    kind = texture_kind(class_id)
    freq = 2 + (class_id // len(TEXTURES)) % 5
    if kind == "checkerboard":
        period = max(2, 2 * freq)
        return (((yy // period) + (xx // period)) % 2).astype(np.float64)
    if kind == "stripes":
        theta = rng.uniform(0.0, np.pi)
        phase = rng.uniform(0.0, 2 * np.pi)
        coord = xx * np.cos(theta) + yy * np.sin(theta)
        return 0.5 + 0.5 * np.sin(2 * np.pi * coord / (3.0 * freq) + phase)
    if kind == "value-noise":
        grid = rng.random((1, freq + 1, freq + 1))
        return np.clip(upsample_bilinear(grid, H, W)[0], 0.0, 1.0)
    theta = rng.uniform(0.0, 2 * np.pi)
    ramp = xx * np.cos(theta) + yy * np.sin(theta)
    span = ramp.max() - ramp.min()
    return (ramp - ramp.min()) / span if span > 0 else np.zeros(shape)


def _paint(labels: np.ndarray, region_classes: list[int], rng: np.random.Generator, easy: bool) -> np.ndarray:
    H, W = labels.shape
    image = np.zeros((3, H, W))
    for region, class_id in enumerate(region_classes):
        where = labels == region
        if not where.any():
            continue
        t = _texture(class_id, (H, W), rng)
        if easy:
            t = 0.5 + 0.3 * (t - 0.5)
        c0, c1 = class_colors(class_id, easy)
        fill = c0[:, None, None] * (1.0 - t) + c1[:, None, None] * t
        image[:, where] = fill[:, where]
    return image


def _check_classes(class_set, class_weights):
    class_set = [int(c) for c in class_set]
    if not class_set:
        raise ValidationError("class_set must not be empty")
    if class_weights is None:
        return class_set, np.full(len(class_set), 1.0 / len(class_set))
    w = np.asarray(class_weights, dtype=np.float64)
    if w.shape != (len(class_set),) or np.any(w < 0) or w.sum() <= 0:
        raise ValidationError("class_weights must be one non-negative weight per class with a positive sum")
    return class_set, w / w.sum()


def generate_texture_scene(seed, size=(64, 64), n_regions: int = 4, class_set=(0, 1), class_weights=None,
                           easy: bool = False) -> Sample:
    """Voronoi scene; the same seed always yields the same bytes."""
    if n_regions < 1:
        raise ValidationError(f"n_regions must be >= 1, got {n_regions}")
    H, W = size
    class_set, weights = _check_classes(class_set, class_weights)
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0, 1, size=(n_regions, 2)) * np.array([H, W])
    region_classes = [int(c) for c in rng.choice(class_set, size=n_regions, p=weights)]

    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    d2 = (yy[None] - centers[:, 0, None, None]) ** 2 + (xx[None] - centers[:, 1, None, None]) ** 2
    regions = np.argmin(d2, axis=0)

    image = _paint(regions, region_classes, rng, easy)
    mask = np.asarray(region_classes, dtype=np.int64)[regions]
    meta = {"seed": seed if isinstance(seed, int) else list(seed), "kind": "voronoi",
            "region_classes": region_classes, "easy": easy}
    return Sample(image.astype(np.float32), mask, meta)


def generate_thin_structure_scene(seed, size=(64, 64), class_set=(0, 1), n_lines: int = 4, width: int = 2,
                                  easy: bool = False) -> Sample:
    """
    Background of the first class crossed by thin axis-aligned bars of the
    second class; the bars are narrower than the logit stride, so they vanish
    when labels are downsampled.
    """
    class_set = [int(c) for c in class_set]
    if len(class_set) < 2:
        raise ValidationError("thin-structure scenes need a background and a structure class")
    if width < 1 or n_lines < 1:
        raise ValidationError("width and n_lines must be >= 1")
    H, W = size
    rng = np.random.default_rng(seed)
    background, structure = class_set[0], class_set[1]
    regions = np.zeros((H, W), dtype=np.int64)
    for _ in range(n_lines):
        if rng.random() < 0.5:
            r = int(rng.integers(0, max(1, H - width)))
            regions[r:r + width, :] = 1
        else:
            c = int(rng.integers(0, max(1, W - width)))
            regions[:, c:c + width] = 1

    region_classes = [background, structure]
    image = _paint(regions, region_classes, rng, easy)
    mask = np.asarray(region_classes, dtype=np.int64)[regions]
    meta = {"seed": seed if isinstance(seed, int) else list(seed), "kind": "thin", "region_classes": region_classes,
            "easy": easy}
    return Sample(image.astype(np.float32), mask, meta)


def make_dataset(seed: int, count: int, kind: str = "voronoi", **kwargs) -> list[Sample]:
    """`count` scenes, sample i generated from the seed pair (seed, i)."""
    if kind == "voronoi":
        gen = generate_texture_scene
    elif kind == "thin":
        gen = generate_thin_structure_scene
    else:
        raise ValidationError(f"unknown scene kind {kind!r}")
    return [gen((int(seed), i), **kwargs) for i in range(count)]
