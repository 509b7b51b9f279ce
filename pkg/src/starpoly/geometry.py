"""Star-convex polygons: direction sets, rasterization, and IoU.

Coordinates are (x, y) with x along image columns and y along rows.
Integer coordinates are pixel centers. A pixel belongs to a polygon iff
its center is inside under the even-odd rule, with edge ties resolved by
the half-open crossing rule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation


@dataclass(frozen=True)
class RaySet:
    """K equiangular directions theta_k = 2*pi*k/K, k = 0..K-1."""

    k: int

    def __post_init__(self):
        if self.k < 3:
            raise ContractViolation("RaySet requires K >= 3")

    @property
    def angles(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(self.k) / self.k

    @property
    def directions(self) -> np.ndarray:
        """(K, 2) array of (cos, sin) unit vectors."""
        a = self.angles
        return np.stack([np.cos(a), np.sin(a)], axis=1)


DEFAULT_K = 32


@dataclass
class StarPolygon:
    """Instance hypothesis: a center, K radial distances, and a score."""

    center: tuple[float, float]
    radii: np.ndarray
    score: float = 1.0

    def __post_init__(self):
        self.radii = np.asarray(self.radii, dtype=np.float64)
        if np.any(self.radii < 0):
            raise ContractViolation("StarPolygon radii must be nonnegative")

    @property
    def k(self) -> int:
        return len(self.radii)

    def to_json(self) -> dict:
        return {"center": [float(self.center[0]), float(self.center[1])],
                "radii": [float(r) for r in self.radii],
                "score": float(self.score)}

    @staticmethod
    def from_json(obj: dict) -> "StarPolygon":
        return StarPolygon(center=(obj["center"][0], obj["center"][1]),
                           radii=np.asarray(obj["radii"], dtype=np.float64),
                           score=float(obj.get("score", 1.0)))


def vertices(poly: StarPolygon) -> np.ndarray:
    """(K, 2) polygon vertices: center + r_k * (cos theta_k, sin theta_k)."""
    if poly.k < 3:
        raise ContractViolation("polygon needs K >= 3 directions")
    rays = RaySet(poly.k)
    return np.asarray(poly.center, dtype=np.float64) + \
        poly.radii[:, None] * rays.directions


def _inside_even_odd(verts: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Crossing-number point-in-polygon test, vectorized over points.

    Half-open rule: an edge (x0,y0)-(x1,y1) is counted when y0 <= p < y1 or
    y1 <= p < y0, which resolves vertex/edge ties deterministically.
    """
    inside = np.zeros(px.shape, dtype=bool)
    x0s = verts[:, 0]
    y0s = verts[:, 1]
    x1s = np.roll(x0s, -1)
    y1s = np.roll(y0s, -1)
    for x0, y0, x1, y1 in zip(x0s, y0s, x1s, y1s):
        if y0 == y1:
            continue
        cond = (y0 <= py) != (y1 <= py)
        t = (py - y0) / (y1 - y0)
        xi = x0 + t * (x1 - x0)
        inside ^= cond & (px < xi)
    return inside


def _raster_window(poly: StarPolygon):
    """Boolean occupancy over the polygon's integer bounding window.

    Returns (mask, x_off, y_off) where mask[j, i] covers pixel
    (x_off + i, y_off + j). Empty polygons give an empty mask.
    """
    if poly.k < 3 or np.all(poly.radii == 0):
        return np.zeros((0, 0), dtype=bool), 0, 0
    verts = vertices(poly)
    x0 = int(np.floor(verts[:, 0].min()))
    x1 = int(np.ceil(verts[:, 0].max()))
    y0 = int(np.floor(verts[:, 1].min()))
    y1 = int(np.ceil(verts[:, 1].max()))
    xs = np.arange(x0, x1 + 1)
    ys = np.arange(y0, y1 + 1)
    px, py = np.meshgrid(xs, ys)
    mask = _inside_even_odd(verts, px.astype(np.float64), py.astype(np.float64))
    return mask, x0, y0


def rasterize(poly: StarPolygon, h: int, w: int) -> np.ndarray:
    """Integer pixels (N, 2) as (x, y) inside the polygon and the image."""
    if h < 1 or w < 1:
        raise ContractViolation("rasterize needs H, W >= 1")
    mask, x0, y0 = _raster_window(poly)
    jj, ii = np.nonzero(mask)
    xs = ii + x0
    ys = jj + y0
    keep = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
    return np.stack([xs[keep], ys[keep]], axis=1)


def rasterize_mask(poly: StarPolygon, h: int, w: int) -> np.ndarray:
    """H x W boolean occupancy of the polygon clipped to the image."""
    out = np.zeros((h, w), dtype=bool)
    pix = rasterize(poly, h, w)
    out[pix[:, 1], pix[:, 0]] = True
    return out


def _pixel_keys(poly: StarPolygon) -> np.ndarray:
    """Unclipped raster as packed int64 keys (stable across windows)."""
    mask, x0, y0 = _raster_window(poly)
    jj, ii = np.nonzero(mask)
    xs = (ii + x0).astype(np.int64)
    ys = (jj + y0).astype(np.int64)
    return ((ys + (1 << 20)) << 21) + (xs + (1 << 20))


def polygon_iou(a: StarPolygon, b: StarPolygon, h: int | None = None,
                w: int | None = None, clip: bool = False) -> float:
    """Rasterized IoU of two polygons over their joint window.

    By default the rasters are not clipped to the image; pass clip=True
    with (h, w) to restrict to image bounds.
    """
    if clip:
        if h is None or w is None:
            raise ContractViolation("clip=True requires image dims")
        ka = _mask_keys(rasterize(a, h, w))
        kb = _mask_keys(rasterize(b, h, w))
    else:
        ka = _pixel_keys(a)
        kb = _pixel_keys(b)
    return _keys_iou(ka, kb)


def _mask_keys(pix: np.ndarray) -> np.ndarray:
    xs = pix[:, 0].astype(np.int64)
    ys = pix[:, 1].astype(np.int64)
    return ((ys + (1 << 20)) << 21) + (xs + (1 << 20))


def _keys_iou(ka: np.ndarray, kb: np.ndarray) -> float:
    na, nb = len(ka), len(kb)
    if na == 0 and nb == 0:
        return 0.0
    inter = len(np.intersect1d(ka, kb, assume_unique=True))
    union = na + nb - inter
    return inter / union if union else 0.0


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """IoU of two pixel sets given as (N, 2) arrays or boolean masks."""
    if a.dtype == bool and b.dtype == bool:
        inter = int(np.logical_and(a, b).sum())
        union = int(np.logical_or(a, b).sum())
        return inter / union if union else 0.0
    ka = np.unique(_mask_keys(np.asarray(a).reshape(-1, 2)))
    kb = np.unique(_mask_keys(np.asarray(b).reshape(-1, 2)))
    return _keys_iou(ka, kb)
