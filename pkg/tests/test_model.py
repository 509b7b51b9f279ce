"""Network forward pass and context-based distance refinement."""

import numpy as np
import pytest

from starpoly import autodiff as ad
from starpoly.autodiff import Tensor, grad_check
from starpoly.errors import ContractViolation
from starpoly.geometry import RaySet
from starpoly.model import (BackboneConfig, backbone_forward, class_head_forward,
                            forward, fusion_weights, init_params,
                            refine_distances, sample_coords)


def _tiny_cfg(**kw):
    base = dict(levels=2, base_channels=4, k=8, n_samples=2,
                weighting="cwm", norm_groups=2)
    base.update(kw)
    return BackboneConfig(**base)


def test_config_validation():
    with pytest.raises(ContractViolation):
        BackboneConfig(levels=0)
    with pytest.raises(ContractViolation):
        BackboneConfig(n_samples=-1)
    with pytest.raises(ContractViolation):
        BackboneConfig(weighting="fancy")
    cfg = _tiny_cfg()
    assert BackboneConfig.from_json(cfg.to_json()) == cfg


def test_forward_shapes_and_ranges():
    cfg = _tiny_cfg()
    params = init_params(cfg, seed=0)
    rng = np.random.default_rng(0)
    out = forward(rng.uniform(size=(16, 16)), params, cfg)
    assert out.dist.shape == (16, 16, 8)
    assert out.conf.shape == (16, 16, 8)
    assert out.prob.shape == (16, 16)
    assert out.dist_refined.shape == (16, 16, 8)
    assert np.all(out.dist.data >= 0)
    assert np.all((out.prob.data > 0) & (out.prob.data < 1))
    assert np.all(np.isfinite(out.dist_refined.data))


def test_forward_rejects_indivisible_input():
    cfg = _tiny_cfg()
    params = init_params(cfg, seed=0)
    with pytest.raises(ContractViolation):
        backbone_forward(np.zeros((10, 16)), params, cfg)


def test_class_head_output_and_gating():
    cfg = _tiny_cfg(class_count=3)
    params = init_params(cfg, seed=0)
    out = forward(np.random.default_rng(1).uniform(size=(8, 8)), params, cfg)
    assert out.class_logits.shape == (8, 8, 4)
    plain = _tiny_cfg()
    with pytest.raises(ContractViolation):
        class_head_forward(out.features, init_params(plain, 0), plain)


def test_sample_coords_layout():
    rays = RaySet(4)
    pts = sample_coords(5.0, 7.0, 4.0, 0, rays, 2)
    assert pts == [(5.0, 7.0), (7.0, 7.0), (9.0, 7.0)]
    pts = sample_coords(5.0, 7.0, 4.0, 1, rays, 2)
    assert np.allclose(pts, [(5, 7), (5, 9), (5, 11)])
    with pytest.raises(ContractViolation):
        sample_coords(0, 0, -1.0, 0, rays, 2)
    with pytest.raises(ContractViolation):
        sample_coords(0, 0, 1.0, 4, rays, 2)


def test_refine_n0_returns_same_object():
    cfg = _tiny_cfg(n_samples=0)
    params = init_params(cfg, seed=0)
    dist = Tensor(np.random.default_rng(2).uniform(1, 5, size=(6, 6, 8)))
    conf = Tensor(np.zeros((6, 6, 8)))
    refined = refine_distances(dist, conf, cfg, params)
    assert refined is dist


def test_refine_equal_weights_hand_value():
    # one pixel, K=4 map constant along the ray: D(x,y)=4 everywhere.
    # With N=1 and equal weights the fused value is (4 + (4+4)) / 2 = ...
    # sample at the predicted boundary is also 4, plus the full initial
    # distance 4 -> term 8; average of (4, 8)/2 with equal weights = 6 when
    # the sample sees 4; with the sampled map decaying to 1 at the boundary
    # the value becomes (4 + (1+4)) / 2 = 4.5.
    h = w = 9
    k = 4
    dist = np.zeros((h, w, k))
    # rightward ray from (2,4): value 4 at the pixel, 1 at (6,4)
    dist[4, 2, 0] = 4.0
    dist[4, 6, 0] = 1.0
    cfg = BackboneConfig(levels=1, base_channels=4, k=k, n_samples=1,
                         weighting="equal")
    params = init_params(cfg, seed=0)
    refined = refine_distances(Tensor(dist), Tensor(np.zeros((h, w, k))),
                               cfg, params)
    assert refined.data[4, 2, 0] == pytest.approx(4.5)


def test_refine_weighting_modes_differ_but_share_input():
    rng = np.random.default_rng(3)
    dist = Tensor(rng.uniform(0.5, 4.0, size=(8, 8, 8)))
    conf = Tensor(rng.normal(size=(8, 8, 8)))
    outs = {}
    for mode in ("equal", "naive", "cwm"):
        cfg = _tiny_cfg(weighting=mode)
        params = init_params(cfg, seed=0)
        outs[mode] = refine_distances(dist, conf, cfg, params).data
    # naive starts at uniform logits, matching equal exactly at init
    assert np.allclose(outs["equal"], outs["naive"])
    assert not np.allclose(outs["equal"], outs["cwm"])


def test_fusion_weights_are_convex_combination():
    cfg = _tiny_cfg(n_samples=3)
    params = init_params(cfg, seed=1)
    conf = Tensor(np.random.default_rng(4).normal(size=(5, 8, 4)))
    wts = fusion_weights(conf, params).data
    assert wts.shape == (5, 8, 4)
    assert np.allclose(wts.sum(axis=-1), 1.0)
    assert np.all(wts > 0)


@pytest.mark.parametrize("mode", ["equal", "naive", "cwm"])
def test_refine_gradients_full_path(mode):
    # coord_grad=True makes the whole refinement differentiable, so the
    # finite-difference reference sees the same function as the backward
    rng = np.random.default_rng(7)
    cfg = _tiny_cfg(weighting=mode, n_samples=2, k=4, coord_grad=True)
    params = init_params(cfg, seed=0)
    dist = Tensor(rng.uniform(0.5, 3.0, size=(5, 5, 4)), requires_grad=True)
    conf = Tensor(rng.normal(size=(5, 5, 4)), requires_grad=True)
    proj = rng.normal(size=(5, 5, 4))

    def f(d, c):
        return ad.tsum(ad.mul(refine_distances(d, c, cfg, params), proj))

    rep = grad_check(f, [dist, conf], tol=1e-3, max_entries=40)
    assert rep.ok, rep


def test_refine_frozen_coords_conf_gradient():
    # with coord_grad=False the sampling positions are constants; the
    # confidence path stays fully differentiable and must pass FD checks
    rng = np.random.default_rng(9)
    cfg = _tiny_cfg(weighting="cwm", n_samples=2, k=4, coord_grad=False)
    params = init_params(cfg, seed=0)
    dist = Tensor(rng.uniform(0.5, 3.0, size=(5, 5, 4)))
    conf = Tensor(rng.normal(size=(5, 5, 4)), requires_grad=True)
    proj = rng.normal(size=(5, 5, 4))
    rep = grad_check(
        lambda c: ad.tsum(ad.mul(refine_distances(dist, c, cfg, params),
                                 proj)),
        [conf], tol=1e-3, max_entries=40)
    assert rep.ok, rep


def test_refine_coord_grad_flag_changes_gradient():
    rng = np.random.default_rng(8)
    base = dict(levels=1, base_channels=4, k=4, n_samples=2,
                weighting="equal")
    proj = rng.normal(size=(5, 5, 4))
    grads = {}
    for flag in (False, True):
        cfg = BackboneConfig(coord_grad=flag, **base)
        params = init_params(cfg, seed=0)
        dist = Tensor(rng.uniform(0.7, 2.3, size=(5, 5, 4)).copy(),
                      requires_grad=True)
        conf = Tensor(np.zeros((5, 5, 4)))
        out = refine_distances(dist, conf, cfg, params)
        ad.tsum(ad.mul(out, proj)).backward()
        grads[flag] = dist.grad.copy()
        rng = np.random.default_rng(8)
        proj = rng.normal(size=(5, 5, 4))
    assert grads[False].shape == grads[True].shape
    assert not np.allclose(grads[False], grads[True])


def test_training_step_touches_all_relevant_params():
    cfg = _tiny_cfg()
    params = init_params(cfg, seed=0)
    out = forward(np.random.default_rng(5).uniform(size=(8, 8)), params, cfg)
    loss = ad.tsum(out.dist_refined) + ad.tsum(out.prob)
    loss.backward()
    missing = [n for n, p in params.trainable()
               if p.grad is None and n != "fuse.naive"]
    assert missing == []
