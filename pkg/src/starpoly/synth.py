"""Deterministic synthetic nuclei image generator.

Instances are star-convex by construction: smooth radial perturbations of
a circle, placed with a bounded pairwise-overlap constraint, rendered as
bright blobs on a dark background with Gaussian blur and noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ContractViolation
from .geometry import StarPolygon, rasterize_mask


@dataclass
class SynthConfig:
    h: int = 128
    w: int = 128
    count_min: int = 4
    count_max: int = 9
    radius_min: float = 12.0
    radius_max: float = 20.0
    roughness: float = 0.2           # radial perturbation amplitude, [0, 0.5]
    max_overlap: float = 0.1         # intersection over smaller instance
    blur_sigma: float = 1.0
    noise_sigma: float = 0.05
    class_count: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.radius_min < 3:
            raise ContractViolation("radius_min must be >= 3 px")
        if not 0.0 <= self.roughness <= 0.5:
            raise ContractViolation("roughness must lie in [0, 0.5]")

    def to_json(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_json(obj: dict) -> "SynthConfig":
        return SynthConfig(**obj)


_SHAPE_K = 32  # radial resolution used when rasterizing generated shapes
_FOURIER_ORDERS = (1, 2, 3)


def generate_instance(rng: np.random.Generator, cfg: SynthConfig) -> StarPolygon:
    """One random star-convex shape with center inside image margins."""
    r = rng.uniform(cfg.radius_min, cfg.radius_max)
    theta = 2.0 * np.pi * np.arange(_SHAPE_K) / _SHAPE_K
    g = np.zeros(_SHAPE_K)
    for m in _FOURIER_ORDERS:
        amp = rng.uniform(0.0, 1.0) / m
        phase = rng.uniform(0.0, 2.0 * np.pi)
        g += amp * np.cos(m * theta + phase)
    peak = np.abs(g).max()
    if peak > 0:
        g /= peak
    radii = np.clip(r * (1.0 + cfg.roughness * g), 1.0, None)
    margin = cfg.radius_max + 1
    cx = rng.uniform(margin, cfg.w - 1 - margin) if cfg.w - 1 > 2 * margin \
        else (cfg.w - 1) / 2.0
    cy = rng.uniform(margin, cfg.h - 1 - margin) if cfg.h - 1 > 2 * margin \
        else (cfg.h - 1) / 2.0
    return StarPolygon(center=(cx, cy), radii=radii)


class PlacementWarning(UserWarning):
    pass


def generate_image(cfg: SynthConfig, seed: int | None = None):
    """Render one synthetic sample.

    Returns (image uint8 H x W, label ids uint16 H x W, class ids uint8 H x W
    or None). Pure function of (cfg, seed); seed defaults to cfg.seed.
    Candidate shapes are rejected when their intersection with any placed
    instance exceeds `max_overlap` of the smaller one; accepted shapes
    never overwrite already-assigned label pixels.
    """
    import warnings

    rng = np.random.default_rng(np.random.SeedSequence(
        [cfg.seed if seed is None else seed, 0x5354]))
    h, w = cfg.h, cfg.w
    count = int(rng.integers(cfg.count_min, cfg.count_max + 1))
    labels = np.zeros((h, w), dtype=np.uint16)
    placed_masks: list[np.ndarray] = []
    attempts = 0
    next_id = 1
    while next_id <= count and attempts < 100 * count:
        attempts += 1
        poly = generate_instance(rng, cfg)
        m = rasterize_mask(poly, h, w)
        area = int(m.sum())
        if area == 0:
            continue
        ok = True
        for pm in placed_masks:
            inter = int(np.logical_and(m, pm).sum())
            smaller = min(area, int(pm.sum()))
            if inter > cfg.max_overlap * smaller:
                ok = False
                break
        if not ok:
            continue
        free = m & (labels == 0)
        if not free.any():
            continue
        labels[free] = next_id
        placed_masks.append(m)
        next_id += 1
    if next_id <= count:
        warnings.warn(f"placed {next_id - 1} of {count} instances",
                      PlacementWarning)

    classes = None
    if cfg.class_count:
        classes = np.zeros((h, w), dtype=np.uint8)
        for v in range(1, next_id):
            classes[labels == v] = int(rng.integers(1, cfg.class_count + 1))

    img = np.full((h, w), 0.1, dtype=np.float64)
    for v in range(1, next_id):
        img[labels == v] = rng.uniform(0.5, 0.9)
    if cfg.blur_sigma > 0:
        img = gaussian_filter(img, cfg.blur_sigma)
    if cfg.noise_sigma > 0:
        img += rng.normal(0.0, cfg.noise_sigma, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    img8 = np.round(img * 255.0).astype(np.uint8)
    return img8, labels, classes


def split_seed(base_seed: int, index: int) -> int:
    """Order-independent per-image seed derivation."""
    ss = np.random.SeedSequence([base_seed, index])
    return int(ss.generate_state(1, dtype=np.uint64)[0] & 0x7FFFFFFF)


@dataclass
class DatasetSpec:
    """Desk-scale default dataset: three splits of synthetic images."""

    config: SynthConfig = field(default_factory=SynthConfig)
    n_train: int = 200
    n_val: int = 50
    n_test: int = 50

    def split_indices(self) -> dict[str, list[int]]:
        n = 0
        out = {}
        for name, cnt in (("train", self.n_train), ("val", self.n_val),
                          ("test", self.n_test)):
            out[name] = list(range(n, n + cnt))
            n += cnt
        return out
