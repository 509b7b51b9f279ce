"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Provides exactly the operation set the segmentation model and its losses
need: elementwise arithmetic, matmul, 2D convolution, pooling/upsampling,
group normalization, last-axis softmax, bilinear map sampling, and a
finite-difference gradient checker.

Gradients accumulate with ``+=`` into ``Tensor.grad``; repeated backward
passes without zeroing sum gradients. Each backward replay over a
computation record visits every node exactly once (instrumented via
``Tensor.backward_visits``).
"""

from __future__ import annotations

import itertools
import struct
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractViolation, IOFailure

_SEQ = itertools.count()


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """Dense N-d array with optional gradient accumulation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward",
                 "_seq", "backward_visits")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._seq = next(_SEQ)
        self.backward_visits = 0

    # -- basic protocol ----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def _accum(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        record = ComputationRecord.trace(self)
        record.replay(self, grad)

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class ComputationRecord:
    """Executed-op graph reachable from a root, in execution order.

    Ops are assigned monotonically increasing sequence numbers at creation;
    replaying in decreasing order is a valid reverse topological order, so
    each node's adjoint is complete before its own backward runs.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes  # decreasing _seq, root first

    @staticmethod
    def trace(root: Tensor) -> "ComputationRecord":
        seen: set[int] = set()
        stack = [root]
        nodes: list[Tensor] = []
        while stack:
            t = stack.pop()
            if id(t) in seen or t._backward is None:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._seq, reverse=True)
        return ComputationRecord(nodes)

    def replay(self, root: Tensor, grad: np.ndarray | None = None) -> None:
        if grad is None:
            grad = np.ones_like(root.data)
        root._accum(np.asarray(grad, dtype=root.data.dtype))
        if root._backward is None and not root.requires_grad:
            # constant root: nothing to do, but keep grad semantics uniform
            root.grad = np.asarray(grad, dtype=root.data.dtype)
        for node in self.nodes:
            node.backward_visits += 1
            if node.grad is None:
                # branch never contributed to the root; adjoint is zero
                continue
            node._backward(node.grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _node(data: np.ndarray, parents: Sequence[Tensor],
          backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad or p._backward is not None for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# -- elementwise arithmetic -----------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(-_unbroadcast(g, b.shape))

    return _node(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        a._accum(_unbroadcast(g * b.data, a.shape))
        b._accum(_unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        a._accum(_unbroadcast(g / b.data, a.shape))
        b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _node(a.data / b.data, (a, b), bw)


def absolute(a) -> Tensor:
    a = _as_tensor(a)
    sgn = np.sign(a.data)

    def bw(g):
        a._accum(g * sgn)

    return _node(np.abs(a.data), (a,), bw)


def log(a) -> Tensor:
    a = _as_tensor(a)

    def bw(g):
        a._accum(g / a.data)

    return _node(np.log(a.data), (a,), bw)


def clamp(a, lo: float, hi: float) -> Tensor:
    a = _as_tensor(a)
    inside = (a.data > lo) & (a.data < hi)

    def bw(g):
        a._accum(g * inside)

    return _node(np.clip(a.data, lo, hi), (a,), bw)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            a._accum(np.broadcast_to(g, a.shape).copy()
                     if np.ndim(g) else np.full(a.shape, g, dtype=a.data.dtype))
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        a._accum(np.broadcast_to(gg, a.shape))

    return _node(np.asarray(out), (a,), bw)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        a._accum(g @ b.data.T)
        b._accum(a.data.T @ g)

    return _node(a.data @ b.data, (a, b), bw)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)

    def bw(g):
        a._accum(g.reshape(a.shape))

    return _node(a.data.reshape(shape), (a,), bw)


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    inv = np.argsort(axes)

    def bw(g):
        a._accum(g.transpose(inv))

    return _node(a.data.transpose(axes), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, gp in zip(tensors, np.split(g, splits, axis=axis)):
            t._accum(gp)

    return _node(np.concatenate([t.data for t in tensors], axis=axis),
                 tensors, bw)


# -- activations ----------------------------------------------------------

def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0

    def bw(g):
        a._accum(g * mask)

    return _node(np.maximum(a.data, 0), (a,), bw)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    y = 1.0 / (1.0 + np.exp(-a.data))

    def bw(g):
        a._accum(g * y * (1.0 - y))

    return _node(y, (a,), bw)


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))

    def bw(g):
        a._accum(g * s)

    return _node(np.logaddexp(0.0, a.data), (a,), bw)


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "softplus": softplus}


def activation(a, kind: str) -> Tensor:
    try:
        return _ACTIVATIONS[kind](a)
    except KeyError:
        raise ContractViolation(f"unknown activation kind: {kind!r}") from None


def channel_softmax(a) -> Tensor:
    """Softmax along the last axis; outputs sum to 1."""
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        a._accum(y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _node(y, (a,), bw)


# -- convolution ----------------------------------------------------------

def conv2d(x, kernel, bias, stride: int = 1, pad: str = "same") -> Tensor:
    """2D cross-correlation over an H x W x Cin tensor.

    kernel: kh x kw x Cin x Cout, bias: Cout. `pad` is "same" (odd kernels
    only) or "valid".
    """
    x, kernel, bias = _as_tensor(x), _as_tensor(kernel), _as_tensor(bias)
    if stride < 1:
        raise ContractViolation("conv2d stride must be >= 1")
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise ContractViolation("conv2d expects x[H,W,Cin], kernel[kh,kw,Cin,Cout]")
    kh, kw, cin, cout = kernel.shape
    if x.shape[2] != cin:
        raise ContractViolation(
            f"conv2d channel mismatch: input {x.shape[2]} vs kernel {cin}")
    if bias.shape != (cout,):
        raise ContractViolation("conv2d bias must have Cout elements")
    if pad == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ContractViolation("same-padding requires odd kernel dims")
        ph, pw = kh // 2, kw // 2
    elif pad == "valid":
        ph = pw = 0
    else:
        raise ContractViolation(f"unknown padding mode: {pad!r}")

    h, w = x.shape[:2]
    xp = np.pad(x.data, ((ph, ph), (pw, pw), (0, 0)))
    ho = (h + 2 * ph - kh) // stride + 1
    wo = (w + 2 * pw - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ContractViolation("conv2d: kernel larger than padded input")

    kd = kernel.data
    y = np.zeros((ho, wo, cout), dtype=x.data.dtype)
    for a in range(kh):
        for b in range(kw):
            xs = xp[a:a + (ho - 1) * stride + 1:stride,
                    b:b + (wo - 1) * stride + 1:stride, :]
            y += xs @ kd[a, b]
    y += bias.data

    def bw(g):
        bias._accum(g.sum(axis=(0, 1)))
        dk = np.zeros_like(kd)
        dxp = np.zeros_like(xp)
        for a in range(kh):
            for b in range(kw):
                xs = xp[a:a + (ho - 1) * stride + 1:stride,
                        b:b + (wo - 1) * stride + 1:stride, :]
                dk[a, b] = np.tensordot(xs, g, axes=([0, 1], [0, 1]))
                dxp[a:a + (ho - 1) * stride + 1:stride,
                    b:b + (wo - 1) * stride + 1:stride, :] += g @ kd[a, b].T
        kernel._accum(dk)
        x._accum(dxp[ph:ph + h, pw:pw + w, :])

    return _node(y, (x, kernel, bias), bw)


# -- pooling / upsampling -------------------------------------------------

def maxpool2(x) -> Tensor:
    x = _as_tensor(x)
    h, w, c = x.shape
    if h % 2 or w % 2:
        raise ContractViolation("maxpool2 requires even H and W")
    win = x.data.reshape(h // 2, 2, w // 2, 2, c).transpose(0, 2, 1, 3, 4)
    win = win.reshape(h // 2, w // 2, 4, c)
    idx = win.argmax(axis=2)
    y = np.take_along_axis(win, idx[:, :, None, :], axis=2)[:, :, 0, :]

    def bw(g):
        dwin = np.zeros_like(win)
        np.put_along_axis(dwin, idx[:, :, None, :], g[:, :, None, :], axis=2)
        dx = dwin.reshape(h // 2, w // 2, 2, 2, c).transpose(0, 2, 1, 3, 4)
        x._accum(dx.reshape(h, w, c))

    return _node(y, (x,), bw)


def nearest_up2(x) -> Tensor:
    x = _as_tensor(x)
    h, w, c = x.shape
    y = np.repeat(np.repeat(x.data, 2, axis=0), 2, axis=1)

    def bw(g):
        x._accum(g.reshape(h, 2, w, 2, c).sum(axis=(1, 3)))

    return _node(y, (x,), bw)


def pool_or_upsample(x, kind: str) -> Tensor:
    if kind == "maxpool2":
        return maxpool2(x)
    if kind == "nearest_up2":
        return nearest_up2(x)
    raise ContractViolation(f"unknown pool/upsample kind: {kind!r}")


# -- group normalization --------------------------------------------------

def norm_layer(x, groups: int, gain, shift, eps: float = 1e-5) -> Tensor:
    """Group normalization over an H x W x C tensor with affine gain/shift."""
    x, gain, shift = _as_tensor(x), _as_tensor(gain), _as_tensor(shift)
    h, w, c = x.shape
    if c % groups:
        raise ContractViolation(f"channels {c} not divisible by groups {groups}")
    cg = c // groups
    xg = x.data.reshape(h, w, groups, cg)
    mu = xg.mean(axis=(0, 1, 3), keepdims=True)
    var = xg.var(axis=(0, 1, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xn = (xg - mu) * inv
    xnf = xn.reshape(h, w, c)
    y = xnf * gain.data + shift.data

    def bw(g):
        gain._accum((g * xnf).sum(axis=(0, 1)))
        shift._accum(g.sum(axis=(0, 1)))
        dxn = (g * gain.data).reshape(h, w, groups, cg)
        m = h * w * cg
        t1 = dxn.sum(axis=(0, 1, 3), keepdims=True) / m
        t2 = (dxn * xn).sum(axis=(0, 1, 3), keepdims=True) / m
        dx = inv * (dxn - t1 - xn * t2)
        x._accum(dx.reshape(h, w, c))

    return _node(y, (x, gain, shift), bw)


# -- bilinear sampling ----------------------------------------------------

def _bilinear_parts(h, w, cx, cy):
    """Shared corner-index / weight computation with border clamping."""
    xc = np.clip(cx, 0.0, w - 1.0)
    yc = np.clip(cy, 0.0, h - 1.0)
    x0 = np.clip(np.floor(xc), 0, max(w - 2, 0)).astype(np.int64)
    y0 = np.clip(np.floor(yc), 0, max(h - 2, 0)).astype(np.int64)
    fx = xc - x0
    fy = yc - y0
    return xc, yc, x0, y0, fx, fy


def sample_channels(maps, cx, cy) -> Tensor:
    """Bilinearly sample each channel of `maps` at its own coordinates.

    maps: H x W x K; cx, cy: arrays or Tensors of shape (..., K, S), i.e.
    S sample positions per channel. Output has the shape of cx.
    Out-of-bounds coordinates are clamped to the border. Differentiable
    w.r.t. maps always, and w.r.t. cx/cy when they are Tensors (clamped
    coordinates receive zero gradient).
    """
    maps = _as_tensor(maps)
    coord_grad = isinstance(cx, Tensor) or isinstance(cy, Tensor)
    cxt, cyt = _as_tensor(cx), _as_tensor(cy)
    h, w, k = maps.shape
    if cxt.shape != cyt.shape or cxt.data.ndim < 2 or cxt.shape[-2] != k:
        raise ContractViolation(
            "sample_channels: coord shape must be (..., K, S)")

    xc, yc, x0, y0, fx, fy = _bilinear_parts(h, w, cxt.data, cyt.data)
    x1, y1 = x0 + 1, y0 + 1
    kidx = np.broadcast_to(np.arange(k)[:, None], cxt.shape)
    md = maps.data
    if w == 1:
        x1 = x0
    if h == 1:
        y1 = y0
    v00 = md[y0, x0, kidx]
    v01 = md[y0, x1, kidx]
    v10 = md[y1, x0, kidx]
    v11 = md[y1, x1, kidx]
    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx
    y = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11

    def bw(g):
        dm = np.zeros(h * w * k, dtype=np.float64)
        flat = lambda yy, xx: (yy * w + xx) * k + kidx  # noqa: E731
        for wt, yy, xx in ((w00, y0, x0), (w01, y0, x1),
                           (w10, y1, x0), (w11, y1, x1)):
            dm += np.bincount(flat(yy, xx).ravel(),
                              weights=(g * wt).ravel(), minlength=h * w * k)
        maps._accum(dm.reshape(h, w, k).astype(md.dtype))
        if coord_grad:
            in_x = (cxt.data > 0.0) & (cxt.data < w - 1.0)
            in_y = (cyt.data > 0.0) & (cyt.data < h - 1.0)
            dvdx = (1 - fy) * (v01 - v00) + fy * (v11 - v10)
            dvdy = (1 - fx) * (v10 - v00) + fx * (v11 - v01)
            cxt._accum(g * dvdx * in_x)
            cyt._accum(g * dvdy * in_y)

    parents = (maps, cxt, cyt) if coord_grad else (maps,)
    return _node(y, parents, bw)


def bilinear_sample(map2d, coords, coord_grad: bool = False) -> Tensor:
    """Sample an H x W map at fractional (x, y) coordinates.

    coords: sequence of (x, y) in pixel units, or Tensors/arrays of shape
    (M, 2). Border-clamped bilinear interpolation.
    """
    map2d = _as_tensor(map2d)
    h, w = map2d.shape
    m3 = reshape(map2d, (h, w, 1))
    if isinstance(coords, Tensor):
        cx = reshape(slice_last(coords, 0), (-1, 1, 1))
        cy = reshape(slice_last(coords, 1), (-1, 1, 1))
        if not coord_grad:
            cx, cy = cx.data, cy.data
    else:
        arr = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
        cx = arr[:, 0:1, None]
        cy = arr[:, 1:2, None]
    out = sample_channels(m3, cx, cy)
    return reshape(out, (-1,))


def slice_last(a, index: int) -> Tensor:
    """Select one entry along the last axis (keeps other axes)."""
    a = _as_tensor(a)

    def bw(g):
        da = np.zeros_like(a.data)
        da[..., index] = g
        a._accum(da)

    return _node(a.data[..., index], (a,), bw)


def expand_last(a) -> Tensor:
    """Append a trailing axis of size 1."""
    a = _as_tensor(a)
    return reshape(a, a.shape + (1,))


# -- gradient checking ----------------------------------------------------

class GradCheckReport:
    def __init__(self, max_rel_err: float, tol: float, n_checked: int):
        self.max_rel_err = max_rel_err
        self.tol = tol
        self.n_checked = n_checked
        self.ok = max_rel_err <= tol

    def __repr__(self):
        status = "ok" if self.ok else "FAIL"
        return (f"GradCheckReport({status}, max_rel_err={self.max_rel_err:.3e}, "
                f"tol={self.tol:.1e}, n={self.n_checked})")


def grad_check(f: Callable[..., Tensor], inputs: Iterable[Tensor],
               h: float = 1e-5, tol: float = 1e-4,
               max_entries: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic gradients of scalar-valued `f` to central differences.

    Inputs must be float64 Tensors with requires_grad set. When
    `max_entries` is given, a seeded random subset of coordinates per input
    is checked instead of every coordinate.
    """
    inputs = list(inputs)
    for t in inputs:
        if t.data.dtype != np.float64:
            raise ContractViolation("grad_check requires float64 inputs")
        t.zero_grad()
    out = f(*inputs)
    if out.data.size != 1:
        raise ContractViolation("grad_check expects a scalar-valued function")
    out.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
                for t in inputs]

    rng = rng or np.random.default_rng(0)
    max_rel = 0.0
    n_checked = 0
    for t, g in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idxs = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(*inputs).data)
            flat[i] = orig - h
            fm = float(f(*inputs).data)
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            ana = g.reshape(-1)[i]
            denom = max(abs(num), abs(ana), 1e-6)
            max_rel = max(max_rel, abs(num - ana) / denom)
            n_checked += 1
    return GradCheckReport(max_rel, tol, n_checked)


# -- binary tensor dump ---------------------------------------------------

_DUMP_MAGIC = b"SPTN"
_DTYPES = {0: np.float32, 1: np.float64}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def dump_tensor(arr: np.ndarray, fh) -> None:
    """Write one array: magic, u32 rank, u32 dims, u8 dtype, LE payload."""
    arr = np.asarray(arr)
    # ascontiguousarray alone would promote 0-d arrays to 1-d
    arr = np.ascontiguousarray(arr).reshape(arr.shape)
    code = _DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise IOFailure(f"unsupported dump dtype: {arr.dtype}")
    fh.write(_DUMP_MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(struct.pack("<B", code))
    fh.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def load_tensor(fh) -> np.ndarray:
    magic = fh.read(4)
    if magic != _DUMP_MAGIC:
        raise IOFailure(f"bad tensor magic: {magic!r}")
    (rank,) = struct.unpack("<I", fh.read(4))
    dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
    (code,) = struct.unpack("<B", fh.read(1))
    if code not in _DTYPES:
        raise IOFailure(f"bad dtype code: {code}")
    dt = np.dtype(_DTYPES[code]).newbyteorder("<")
    n = int(np.prod(dims)) if dims else 1
    payload = fh.read(n * dt.itemsize)
    if len(payload) != n * dt.itemsize:
        raise IOFailure("truncated tensor payload")
    arr = np.frombuffer(payload, dtype=dt).reshape(dims)
    return arr.astype(_DTYPES[code])
