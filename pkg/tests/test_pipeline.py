"""Whole-image inference: padding, timing split, dataset evaluation."""

import numpy as np
import pytest

from starpoly.errors import ContractViolation
from starpoly.model import BackboneConfig, init_params
from starpoly.pipeline import (_pad_to_multiple, evaluate_dataset,
                               infer_image, instance_class_map)


def _setup(class_count=None):
    cfg = BackboneConfig(levels=2, base_channels=4, k=8, n_samples=2,
                         weighting="equal", norm_groups=2,
                         class_count=class_count)
    return init_params(cfg, seed=0, dtype=np.float32), cfg


def test_pad_to_multiple_reflects_and_reports():
    img = np.arange(30, dtype=float).reshape(5, 6)
    padded, (ph, pw) = _pad_to_multiple(img, 4)
    assert padded.shape == (8, 8)
    assert (ph, pw) == (3, 2)
    assert np.array_equal(padded[:5, :6], img)
    # mirror: row 5 repeats row 3 (reflect without the edge itself)
    assert np.array_equal(padded[5], padded[3])
    same, off = _pad_to_multiple(img[:4, :4], 4)
    assert same.shape == (4, 4) and off == (0, 0)
    with pytest.raises(ContractViolation):
        _pad_to_multiple(np.zeros((2, 2)), 8)


@pytest.mark.parametrize("shape", [(16, 16), (13, 18)])
def test_infer_image_handles_odd_sizes(shape):
    params, cfg = _setup()
    rng = np.random.default_rng(0)
    res = infer_image(rng.uniform(size=shape), params, cfg)
    assert res.labels.shape == shape
    assert res.prob.shape == shape
    assert res.dist.shape == shape + (8,)
    assert res.network_seconds > 0
    assert res.post_seconds >= 0


def test_infer_image_is_deterministic():
    params, cfg = _setup()
    rng = np.random.default_rng(1)
    img = rng.uniform(size=(16, 16))
    a = infer_image(img, params, cfg)
    b = infer_image(img, params, cfg)
    assert np.array_equal(a.labels, b.labels)
    assert np.array_equal(a.prob, b.prob)


def test_infer_with_class_head_emits_class_map():
    params, cfg = _setup(class_count=2)
    res = infer_image(np.random.default_rng(2).uniform(size=(16, 16)),
                      params, cfg)
    assert res.class_map is not None
    assert res.class_map.shape == (16, 16)
    assert res.class_map.max() <= 2


def test_instance_class_map_majority_vote():
    labels = np.zeros((4, 4), dtype=int)
    labels[:2, :2] = 1
    cls = np.zeros((4, 4), dtype=int)
    cls[0, 0] = 2
    cls[0, 1] = 1
    cls[1, 0] = 1
    cls[1, 1] = 1
    out = instance_class_map(labels, cls)
    assert np.all(out[labels == 1] == 1)
    assert np.all(out[labels == 0] == 0)


def test_evaluate_dataset_summary_structure():
    params, cfg = _setup()
    rng = np.random.default_rng(3)
    gt = np.zeros((16, 16), dtype=int)
    gt[4:9, 4:9] = 1
    samples = [(f"{i}", rng.uniform(size=(16, 16)), gt, None)
               for i in range(2)]
    rows, summary = evaluate_dataset(samples, params, cfg)
    assert len(rows) == 2
    for key in ("AP_0.50", "AP_0.90", "AP_mean", "bPQ",
                "network_seconds", "post_seconds"):
        assert key in summary
    assert rows[0].n_gt == 1
    assert "mPQ" not in summary  # no class maps supplied
