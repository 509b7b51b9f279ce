"""Tensor engine: gradient correctness, replay semantics, serialization."""

import io

import numpy as np
import pytest

from starpoly import autodiff as ad
from starpoly.autodiff import Tensor, grad_check
from starpoly.errors import ContractViolation, IOFailure


def _t(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _lin(rng, shape):
    """Fixed random projection to a scalar, so f is deterministic."""
    m = rng.normal(size=shape)
    return lambda t: ad.tsum(ad.mul(t, m))


SEEDS = range(3)


@pytest.mark.parametrize("seed", SEEDS)
def test_arithmetic_grads(seed):
    rng = np.random.default_rng(seed)
    a = _t(rng, 4, 5)
    b = _t(rng, 4, 5)
    proj = _lin(rng, (4, 5))

    for f in (lambda x, y: proj(ad.add(x, y)),
              lambda x, y: proj(ad.sub(x, y)),
              lambda x, y: proj(ad.mul(x, y)),
              lambda x, y: proj(ad.div(x, ad.add(ad.mul(y, y), 1.0)))):
        rep = grad_check(f, [a, b])
        assert rep.ok, rep


@pytest.mark.parametrize("seed", SEEDS)
def test_broadcasting_grads(seed):
    rng = np.random.default_rng(seed)
    a = _t(rng, 4, 5)
    b = _t(rng, 5)          # broadcast over rows
    c = _t(rng, 4, 1)       # broadcast over cols
    proj = _lin(rng, (4, 5))
    rep = grad_check(lambda x, y, z: proj(ad.mul(ad.add(x, y), z)), [a, b, c])
    assert rep.ok, rep


@pytest.mark.parametrize("seed", SEEDS)
def test_unary_grads(seed):
    rng = np.random.default_rng(seed)
    a = _t(rng, 3, 4)
    pos = Tensor(np.abs(rng.normal(size=(3, 4))) + 0.5, requires_grad=True)
    proj = _lin(rng, (3, 4))
    assert grad_check(lambda x: proj(ad.relu(x)), [a]).ok
    assert grad_check(lambda x: proj(ad.sigmoid(x)), [a]).ok
    assert grad_check(lambda x: proj(ad.softplus(x)), [a]).ok
    assert grad_check(lambda x: proj(ad.log(x)), [pos]).ok
    assert grad_check(lambda x: proj(ad.absolute(x)), [pos]).ok


def test_clamp_gradient_masks_saturated_regions():
    a = Tensor(np.array([-2.0, 0.5, 2.0]), requires_grad=True)
    out = ad.tsum(ad.clamp(a, 0.0, 1.0))
    out.backward()
    assert np.allclose(a.grad, [0.0, 1.0, 0.0])


@pytest.mark.parametrize("seed", SEEDS)
def test_reduction_and_shape_grads(seed):
    rng = np.random.default_rng(seed)
    a = _t(rng, 3, 4, 2)
    proj2 = _lin(rng, (3, 2))
    proj3 = _lin(rng, (3, 4, 2))
    assert grad_check(lambda x: proj2(ad.tsum(x, axis=1)), [a]).ok
    assert grad_check(lambda x: proj2(ad.tmean(x, axis=1)), [a]).ok
    assert grad_check(lambda x: proj3(ad.reshape(ad.transpose(x, (2, 0, 1)),
                                                 (3, 4, 2))), [a]).ok


@pytest.mark.parametrize("seed", SEEDS)
def test_matmul_and_softmax_grads(seed):
    rng = np.random.default_rng(seed)
    a = _t(rng, 4, 3)
    b = _t(rng, 3, 5)
    proj = _lin(rng, (4, 5))
    assert grad_check(lambda x, y: proj(ad.matmul(x, y)), [a, b]).ok
    proj2 = _lin(rng, (4, 3))
    assert grad_check(lambda x: proj2(ad.channel_softmax(x)), [a]).ok


def test_channel_softmax_rows_sum_to_one():
    rng = np.random.default_rng(3)
    y = ad.channel_softmax(Tensor(rng.normal(size=(5, 7)) * 10)).data
    assert np.allclose(y.sum(axis=-1), 1.0)
    assert np.all(y > 0)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("stride,pad", [(1, "same"), (2, "same"), (1, "valid")])
def test_conv2d_grads(seed, stride, pad):
    rng = np.random.default_rng(seed)
    x = _t(rng, 6, 6, 2)
    k = _t(rng, 3, 3, 2, 3)
    b = _t(rng, 3)
    probe = {}

    def f(xx, kk, bb):
        y = ad.conv2d(xx, kk, bb, stride=stride, pad=pad)
        if "proj" not in probe:
            probe["proj"] = _lin(rng, y.shape)
        return probe["proj"](y)

    rep = grad_check(f, [x, k, b])
    assert rep.ok, rep


def test_conv2d_matches_scipy_correlation():
    from scipy.signal import correlate2d
    rng = np.random.default_rng(11)
    x = rng.normal(size=(8, 9, 1))
    k = rng.normal(size=(3, 3, 1, 1))
    y = ad.conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(1))).data[:, :, 0]
    ref = correlate2d(x[:, :, 0], k[:, :, 0, 0], mode="same")
    assert np.allclose(y, ref, atol=1e-12)


def test_conv2d_rejects_bad_shapes():
    with pytest.raises(ContractViolation):
        ad.conv2d(Tensor(np.zeros((4, 4, 2))),
                  Tensor(np.zeros((3, 3, 3, 1))), Tensor(np.zeros(1)))
    with pytest.raises(ContractViolation):
        ad.conv2d(Tensor(np.zeros((4, 4, 1))),
                  Tensor(np.zeros((2, 2, 1, 1))), Tensor(np.zeros(1)),
                  pad="same")


@pytest.mark.parametrize("seed", SEEDS)
def test_pool_upsample_norm_grads(seed):
    rng = np.random.default_rng(seed)
    x = _t(rng, 4, 6, 4)
    probe = {}

    def run(op):
        def f(xx):
            y = op(xx)
            key = id(op)
            if key not in probe:
                probe[key] = _lin(rng, y.shape)
            return probe[key](y)
        assert grad_check(f, [x]).ok

    run(ad.maxpool2)
    run(ad.nearest_up2)
    gain = _t(rng, 4)
    shift = _t(rng, 4)
    proj = _lin(rng, (4, 6, 4))
    rep = grad_check(lambda xx, gg, ss: proj(ad.norm_layer(xx, 2, gg, ss)),
                     [x, gain, shift])
    assert rep.ok, rep


@pytest.mark.parametrize("seed", SEEDS)
def test_sample_channels_grads(seed):
    rng = np.random.default_rng(seed)
    maps = _t(rng, 5, 6, 3)
    # interior, non-integer coordinates so the interpolation is smooth
    cx = Tensor(rng.uniform(0.6, 4.3, size=(4, 3, 2)), requires_grad=True)
    cy = Tensor(rng.uniform(0.6, 3.4, size=(4, 3, 2)), requires_grad=True)
    proj = _lin(rng, (4, 3, 2))
    rep = grad_check(lambda m, x, y: proj(ad.sample_channels(m, x, y)),
                     [maps, cx, cy])
    assert rep.ok, rep


def test_sample_channels_border_clamp():
    maps = Tensor(np.arange(12, dtype=np.float64).reshape(3, 4, 1))
    cx = np.array([[[-5.0, 99.0]]])
    cy = np.array([[[-5.0, 99.0]]])
    y = ad.sample_channels(maps, cx, cy).data
    assert y[0, 0, 0] == maps.data[0, 0, 0]
    assert y[0, 0, 1] == maps.data[2, 3, 0]


def test_bilinear_sample_exact_at_integer_coords():
    rng = np.random.default_rng(5)
    m = rng.normal(size=(4, 5))
    pts = [(x, y) for y in range(4) for x in range(5)]
    vals = ad.bilinear_sample(Tensor(m), pts).data
    assert np.allclose(vals, m.ravel())


def test_backward_visits_each_node_once():
    a = Tensor(np.ones(3), requires_grad=True)
    b = ad.mul(a, 2.0)
    c = ad.add(b, b)          # diamond: b feeds the root twice
    d = ad.tsum(c)
    d.backward()
    for node in (b, c, d):
        assert node.backward_visits == 1
    assert np.allclose(a.grad, 4.0)


def test_gradients_accumulate_across_backward_calls():
    a = Tensor(np.ones(2), requires_grad=True)
    out = ad.tsum(ad.mul(a, 3.0))
    out.backward()
    first = a.grad.copy()
    out2 = ad.tsum(ad.mul(a, 3.0))
    out2.backward()
    assert np.allclose(a.grad, 2 * first)
    a.zero_grad()
    assert a.grad is None


def test_detach_blocks_gradient_flow():
    a = Tensor(np.ones(3), requires_grad=True)
    out = ad.tsum(ad.mul(a, 2.0).detach() * a)
    out.backward()
    assert np.allclose(a.grad, 2.0)   # only the direct factor contributes


def test_grad_check_rejects_nonscalar_and_float32():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ContractViolation):
        grad_check(lambda t: t, [a])
    a32 = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    with pytest.raises(ContractViolation):
        grad_check(lambda t: ad.tsum(t), [a32])


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_tensor_dump_roundtrip(dtype):
    rng = np.random.default_rng(9)
    for shape in [(), (3,), (2, 3, 4)]:
        arr = rng.normal(size=shape).astype(dtype)
        buf = io.BytesIO()
        ad.dump_tensor(arr, buf)
        buf.seek(0)
        back = ad.load_tensor(buf)
        assert back.dtype == dtype
        assert np.array_equal(back, arr)


def test_tensor_dump_format_layout():
    buf = io.BytesIO()
    ad.dump_tensor(np.zeros((2, 3), dtype=np.float32), buf)
    raw = buf.getvalue()
    assert raw[:4] == b"SPTN"
    assert int.from_bytes(raw[4:8], "little") == 2
    assert int.from_bytes(raw[8:12], "little") == 2
    assert int.from_bytes(raw[12:16], "little") == 3
    assert raw[16] == 0  # float32 code
    assert len(raw) == 17 + 6 * 4


def test_load_tensor_rejects_garbage():
    with pytest.raises(IOFailure):
        ad.load_tensor(io.BytesIO(b"NOPE" + b"\0" * 16))
