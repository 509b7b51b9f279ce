"""Ground-truth target encoding from instance label masks.

Produces every training target: per-direction boundary distance maps,
the centroid probability map (normalized minimum boundary distance),
semantic/boundary masks, and per-pixel bounding-box regression targets.

Distance convention: from a foreground pixel, march in unit-length steps
along each direction; the distance is the first step count whose rounded
position leaves the image or lands on a different instance id.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .geometry import RaySet, StarPolygon


@dataclass
class LabelMask:
    """H x W nonnegative instance ids (0 = background), optional class ids."""

    ids: np.ndarray
    classes: np.ndarray | None = None

    def __post_init__(self):
        self.ids = np.asarray(self.ids)
        if self.ids.ndim != 2 or np.any(self.ids < 0):
            raise ContractViolation("LabelMask.ids must be 2D nonnegative")
        if self.classes is not None:
            self.classes = np.asarray(self.classes)
            if self.classes.shape != self.ids.shape:
                raise ContractViolation("class mask shape mismatch")
            if np.any((self.classes > 0) != (self.ids > 0)):
                raise ContractViolation(
                    "class mask must be nonzero exactly on foreground")

    @property
    def shape(self) -> tuple[int, int]:
        return self.ids.shape

    def instance_ids(self) -> np.ndarray:
        u = np.unique(self.ids)
        return u[u > 0]


@dataclass
class GroundTruthBundle:
    """All encoded targets for one label mask."""

    dist: np.ndarray     # H x W x K, >= 0
    prob: np.ndarray     # H x W in [0, 1]
    seg: np.ndarray      # H x W bool
    bnd: np.ndarray      # H x W bool
    bbox: np.ndarray     # H x W x 6


def star_distance_map(mask: LabelMask, rays: RaySet) -> np.ndarray:
    """H x W x K first-exit distances along each ray; background pixels 0."""
    h, w = mask.shape
    ids = mask.ids
    k = rays.k
    dist = np.zeros((h, w, k), dtype=np.float64)
    fg = ids > 0
    if not fg.any():
        return dist
    ys, xs = np.nonzero(fg)
    own = ids[ys, xs]
    tmax = int(np.ceil(np.hypot(h, w))) + 1
    dirs = rays.directions
    for ki in range(k):
        dx, dy = dirs[ki]
        alive = np.ones(len(xs), dtype=bool)
        d = np.zeros(len(xs), dtype=np.float64)
        for t in range(1, tmax + 1):
            if not alive.any():
                break
            px = np.rint(xs[alive] + t * dx).astype(np.int64)
            py = np.rint(ys[alive] + t * dy).astype(np.int64)
            inb = (px >= 0) & (px < w) & (py >= 0) & (py < h)
            same = np.zeros(len(px), dtype=bool)
            same[inb] = ids[py[inb], px[inb]] == own[alive][inb]
            exited = ~same
            idx = np.nonzero(alive)[0]
            d[idx[exited]] = t
            alive[idx[exited]] = False
        dist[ys, xs, ki] = d
    return dist


def centroid_prob_map(mask: LabelMask, dist: np.ndarray) -> np.ndarray:
    """Per-instance normalized min-over-directions boundary distance."""
    h, w = mask.shape
    prob = np.zeros((h, w), dtype=np.float64)
    dmin = dist.min(axis=2)
    for v in mask.instance_ids():
        sel = mask.ids == v
        peak = dmin[sel].max()
        if peak <= 0:
            raise ContractViolation(f"instance {v} has zero max distance")
        prob[sel] = dmin[sel] / peak
    return prob


def seg_boundary_targets(mask: LabelMask) -> tuple[np.ndarray, np.ndarray]:
    """Foreground mask and 8-connected boundary mask.

    A foreground pixel is boundary when any 8-neighbor has a different id;
    background and positions beyond the image border count as different.
    """
    ids = mask.ids
    h, w = ids.shape
    seg = ids > 0
    padded = np.pad(ids, 1, constant_values=-1)
    bnd = np.zeros((h, w), dtype=bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dx == 0 and dy == 0:
                continue
            nb = padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
            bnd |= seg & (nb != ids)
    return seg, bnd


def bbox_targets(mask: LabelMask) -> np.ndarray:
    """H x W x 6 per-pixel (dx_c, dy_c, left, right, top, bottom) targets.

    Offsets to the instance centroid (mean member coordinate) and distances
    to the four sides of the axis-aligned instance bounding box; zero on
    background.
    """
    h, w = mask.shape
    out = np.zeros((h, w, 6), dtype=np.float64)
    for v in mask.instance_ids():
        ys, xs = np.nonzero(mask.ids == v)
        cx, cy = xs.mean(), ys.mean()
        x0, x1 = xs.min(), xs.max()
        y0, y1 = ys.min(), ys.max()
        out[ys, xs, 0] = cx - xs
        out[ys, xs, 1] = cy - ys
        out[ys, xs, 2] = xs - x0
        out[ys, xs, 3] = x1 - xs
        out[ys, xs, 4] = ys - y0
        out[ys, xs, 5] = y1 - ys
    return out


def encode_all(mask: LabelMask, rays: RaySet) -> GroundTruthBundle:
    dist = star_distance_map(mask, rays)
    prob = centroid_prob_map(mask, dist)
    seg, bnd = seg_boundary_targets(mask)
    bbox = bbox_targets(mask)
    return GroundTruthBundle(dist=dist, prob=prob, seg=seg, bnd=bnd, bbox=bbox)


def decode_polygon(prob: np.ndarray, dist: np.ndarray,
                   pixel: tuple[int, int]) -> StarPolygon:
    """Read the polygon hypothesis stored at one pixel: (x, y) order."""
    x, y = pixel
    h, w = prob.shape
    if not (0 <= x < w and 0 <= y < h):
        raise ContractViolation(f"pixel {pixel} outside {w}x{h} image")
    return StarPolygon(center=(float(x), float(y)),
                       radii=dist[y, x, :].astype(np.float64),
                       score=float(prob[y, x]))


def best_center(prob: np.ndarray, mask: LabelMask, instance_id: int) -> tuple[int, int]:
    """Pixel (x, y) with maximal centroid probability inside one instance."""
    sel = mask.ids == instance_id
    if not sel.any():
        raise ContractViolation(f"no pixels with id {instance_id}")
    masked = np.where(sel, prob, -1.0)
    y, x = np.unravel_index(np.argmax(masked), prob.shape)
    return int(x), int(y)
