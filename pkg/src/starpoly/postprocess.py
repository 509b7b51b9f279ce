"""Turn predicted probability / distance maps into an instance label mask.

Pipeline: threshold the centroid probability map into polygon proposals,
greedily suppress overlapping proposals by rasterized IoU, then paint the
survivors into a label mask with score-priority overlap resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .geometry import StarPolygon, _keys_iou, _pixel_keys, rasterize


@dataclass
class ProposalSet:
    proposals: list[StarPolygon]
    h: int
    w: int
    prob_thresh: float
    nms_thresh: float

    def to_json(self) -> dict:
        return {"prob_thresh": self.prob_thresh,
                "nms_thresh": self.nms_thresh,
                "height": self.h, "width": self.w,
                "proposals": [p.to_json() for p in self.proposals]}

    @staticmethod
    def from_json(obj: dict) -> "ProposalSet":
        return ProposalSet(
            proposals=[StarPolygon.from_json(p) for p in obj["proposals"]],
            h=obj["height"], w=obj["width"],
            prob_thresh=obj["prob_thresh"], nms_thresh=obj["nms_thresh"])


def propose(prob: np.ndarray, dist: np.ndarray,
            prob_thresh: float = 0.5) -> list[StarPolygon]:
    """One polygon per pixel whose centroid probability clears the threshold."""
    if prob.shape != dist.shape[:2]:
        raise ContractViolation("prob/dist spatial dims differ")
    ys, xs = np.nonzero(prob >= prob_thresh)
    return [StarPolygon(center=(float(x), float(y)),
                        radii=np.maximum(dist[y, x, :], 0.0),
                        score=float(prob[y, x]))
            for y, x in zip(ys, xs)]


def _sort_key(p: StarPolygon, h_hint: int = 1 << 20):
    # descending score; ties by raster order of center, then radii sum
    return (-p.score, round(p.center[1]), round(p.center[0]),
            float(p.radii.sum()))


def nms(proposals: list[StarPolygon], nms_thresh: float = 0.5
        ) -> list[StarPolygon]:
    """Greedy suppression: keep a proposal iff its rasterized IoU with every
    already-kept proposal stays below the threshold."""
    order = sorted(proposals, key=_sort_key)
    kept: list[StarPolygon] = []
    kept_keys: list[np.ndarray] = []
    kept_bbox: list[tuple[float, float, float, float]] = []
    for p in order:
        keys = _pixel_keys(p)
        rmax = float(p.radii.max(initial=0.0))
        cx, cy = p.center
        bbox = (cx - rmax, cx + rmax, cy - rmax, cy + rmax)
        ok = True
        for kk, bb in zip(kept_keys, kept_bbox):
            if bbox[0] > bb[1] or bbox[1] < bb[0] or \
               bbox[2] > bb[3] or bbox[3] < bb[2]:
                continue
            if _keys_iou(keys, kk) >= nms_thresh:
                ok = False
                break
        if ok:
            kept.append(p)
            kept_keys.append(keys)
            kept_bbox.append(bbox)
    return kept


def render_labels(kept: list[StarPolygon], h: int, w: int) -> np.ndarray:
    """Paint accepted polygons into a uint16 label mask.

    Ids follow descending score (1 = best); a pixel covered by several
    polygons belongs to the highest-scoring one.
    """
    labels = np.zeros((h, w), dtype=np.uint16)
    for i, p in enumerate(sorted(kept, key=_sort_key)):
        pix = rasterize(p, h, w)
        sel = labels[pix[:, 1], pix[:, 0]] == 0
        labels[pix[sel, 1], pix[sel, 0]] = i + 1
    return _compact_ids(labels)


def _compact_ids(labels: np.ndarray) -> np.ndarray:
    """Renumber ids to a contiguous 1..n range, preserving order."""
    ids = np.unique(labels)
    ids = ids[ids > 0]
    out = np.zeros_like(labels)
    for new, old in enumerate(ids, start=1):
        out[labels == old] = new
    return out


def predict_labels(prob: np.ndarray, dist: np.ndarray,
                   prob_thresh: float = 0.5, nms_thresh: float = 0.5
                   ) -> tuple[np.ndarray, ProposalSet]:
    """Full post-processing path: propose, suppress, render."""
    h, w = prob.shape
    cands = propose(prob, dist, prob_thresh)
    kept = nms(cands, nms_thresh)
    kept = sorted(kept, key=_sort_key)
    labels = render_labels(kept, h, w)
    return labels, ProposalSet(kept, h, w, prob_thresh, nms_thresh)
