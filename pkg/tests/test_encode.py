"""Ground-truth encoding: hand-checked values and decode round trips."""

import numpy as np
import pytest

from starpoly.encode import (LabelMask, best_center, bbox_targets,
                             centroid_prob_map, decode_polygon, encode_all,
                             seg_boundary_targets, star_distance_map)
from starpoly.errors import ContractViolation
from starpoly.geometry import RaySet, StarPolygon, mask_iou, rasterize_mask


def _square5():
    ids = np.zeros((7, 7), dtype=int)
    ids[1:6, 1:6] = 1
    return LabelMask(ids)


def test_label_mask_validation():
    with pytest.raises(ContractViolation):
        LabelMask(np.zeros((3, 3, 2), dtype=int))
    with pytest.raises(ContractViolation):
        LabelMask(-np.ones((3, 3), dtype=int))
    ids = np.zeros((3, 3), dtype=int)
    ids[1, 1] = 1
    cls = np.zeros((3, 3), dtype=int)
    with pytest.raises(ContractViolation):
        LabelMask(ids, cls)  # foreground pixel lacks a class


def test_square_center_axis_distance_is_3():
    d = star_distance_map(_square5(), RaySet(4))
    assert np.all(d[3, 3, :] == 3.0)


def test_square_center_diagonal_distance_is_4():
    d = star_distance_map(_square5(), RaySet(8))
    # diagonal rays exit on the 4th unit step under rounded marching
    assert np.all(d[3, 3, 1::2] == 4.0)
    assert np.all(d[3, 3, 0::2] == 3.0)


def test_isolated_pixel_all_distances_1():
    ids = np.zeros((5, 5), dtype=int)
    ids[2, 2] = 1
    d = star_distance_map(LabelMask(ids), RaySet(8))
    assert np.all(d[2, 2, :] == 1.0)
    assert d.sum() == 8.0  # background stays zero


def test_distance_at_image_border_counts_exit():
    ids = np.ones((3, 3), dtype=int)
    d = star_distance_map(LabelMask(ids), RaySet(4))
    assert d[1, 1, 0] == 2.0   # two steps to leave a 3-wide strip from center
    assert d[0, 0, 2] == 1.0   # leftward from the corner exits immediately


def test_touching_instances_bound_each_other():
    ids = np.zeros((5, 9), dtype=int)
    ids[1:4, 1:4] = 1
    ids[1:4, 4:7] = 2
    d = star_distance_map(LabelMask(ids), RaySet(4))
    assert d[2, 2, 0] == 2.0   # rightward ray stops at the neighbor
    assert d[2, 5, 2] == 2.0   # leftward ray of the neighbor likewise


def test_centroid_prob_peaks_at_1_per_instance():
    mask = _square5()
    d = star_distance_map(mask, RaySet(8))
    p = centroid_prob_map(mask, d)
    assert p.max() == 1.0
    assert p[3, 3] == 1.0
    assert np.all(p[mask.ids == 0] == 0.0)
    assert np.all((p >= 0) & (p <= 1))


def test_boundary_ring_of_5x5_square_has_16_pixels():
    seg, bnd = seg_boundary_targets(_square5())
    assert seg.sum() == 25
    assert bnd.sum() == 16
    assert not bnd[3, 3]


def test_adjacent_instances_are_mutual_boundaries():
    ids = np.zeros((3, 6), dtype=int)
    ids[:, :3] = 1
    ids[:, 3:] = 2
    _, bnd = seg_boundary_targets(LabelMask(ids))
    # the two columns at the interface touch a different id on every row
    assert np.all(bnd[:, 2]) and np.all(bnd[:, 3])
    # strip interiors away from borders and the interface are not boundary
    assert not bnd[1, 1] and not bnd[1, 4]


def test_bbox_targets_square_center():
    t = bbox_targets(_square5())
    assert np.allclose(t[3, 3], [0, 0, 2, 2, 2, 2])
    assert np.allclose(t[1, 1], [2, 2, 0, 4, 0, 4])
    assert np.all(t[0, 0] == 0)


def test_encode_all_shapes_consistent():
    b = encode_all(_square5(), RaySet(8))
    assert b.dist.shape == (7, 7, 8)
    assert b.prob.shape == (7, 7)
    assert b.seg.dtype == bool and b.bnd.dtype == bool
    assert b.bbox.shape == (7, 7, 6)


def test_decode_polygon_reads_center_pixel():
    b = encode_all(_square5(), RaySet(8))
    p = decode_polygon(b.prob, b.dist, (3, 3))
    assert p.center == (3.0, 3.0)
    assert p.score == 1.0
    assert np.array_equal(p.radii, b.dist[3, 3, :])
    with pytest.raises(ContractViolation):
        decode_polygon(b.prob, b.dist, (9, 9))


def test_best_center_prefers_peak_probability():
    mask = _square5()
    b = encode_all(mask, RaySet(8))
    assert best_center(b.prob, mask, 1) == (3, 3)
    with pytest.raises(ContractViolation):
        best_center(b.prob, mask, 7)


@pytest.mark.parametrize("seed", range(4))
def test_roundtrip_iou_on_synthetic_instances(seed):
    from starpoly.synth import SynthConfig, generate_instance
    rng = np.random.default_rng(seed)
    cfg = SynthConfig(h=80, w=80, radius_min=12.0, radius_max=18.0)
    rays = RaySet(32)
    poly = generate_instance(rng, cfg)
    gt = rasterize_mask(poly, 80, 80)
    ids = gt.astype(int)
    mask = LabelMask(ids)
    b = encode_all(mask, rays)
    cx, cy = best_center(b.prob, mask, 1)
    dec = StarPolygon(center=(float(cx), float(cy)), radii=b.dist[cy, cx, :])
    iou = mask_iou(gt, rasterize_mask(dec, 80, 80))
    assert iou >= 0.9
