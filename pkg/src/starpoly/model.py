"""The toy segmentation network.

A small U-Net backbone with three parallel 1x1 heads (distance, confidence,
centroid probability), an optional per-pixel class head, and context-based
distance refinement: points are sampled along each ray toward the initially
predicted boundary and their distance predictions are fused, either with
fixed weights or with confidence-driven adaptive weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractViolation
from .geometry import RaySet

WEIGHTINGS = ("equal", "naive", "cwm")


@dataclass
class BackboneConfig:
    levels: int = 3
    base_channels: int = 16
    k: int = 32
    n_samples: int = 6
    weighting: str = "cwm"
    coord_grad: bool = False
    class_count: int | None = None
    in_channels: int = 1
    norm_groups: int = 8

    def __post_init__(self):
        if self.levels < 1:
            raise ContractViolation("levels must be >= 1")
        if self.n_samples < 0:
            raise ContractViolation("n_samples must be >= 0")
        if self.weighting not in WEIGHTINGS:
            raise ContractViolation(f"weighting must be one of {WEIGHTINGS}")

    def to_json(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_json(obj: dict) -> "BackboneConfig":
        return BackboneConfig(**obj)


@dataclass
class HeadOutputs:
    dist: Tensor                    # H x W x K, nonnegative (softplus)
    conf: Tensor                    # H x W x K, unbounded logits
    prob: Tensor                    # H x W, in (0, 1)
    dist_refined: Tensor | None = None
    class_logits: Tensor | None = None
    features: Tensor | None = None  # final decoder features


def _groups_for(channels: int, preferred: int) -> int:
    g = min(preferred, channels)
    while channels % g:
        g -= 1
    return g


def _conv_init(rng, kh, kw, cin, cout, dtype):
    std = np.sqrt(2.0 / (kh * kw * cin))
    return rng.normal(0.0, std, size=(kh, kw, cin, cout)).astype(dtype)


class ParamStore(dict):
    """Named parameter tensors; insertion order fixes update order."""

    def add(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(data, requires_grad=True)
        self[name] = t
        return t

    def trainable(self):
        return [(n, p) for n, p in self.items() if p.requires_grad]

    def zero_grads(self) -> None:
        for p in self.values():
            p.zero_grad()

    def freeze(self) -> None:
        for p in self.values():
            p.requires_grad = False


def _add_block(params: ParamStore, rng, prefix: str, cin: int, cout: int,
               dtype, n_convs: int = 2) -> None:
    c = cin
    for i in range(n_convs):
        params.add(f"{prefix}.conv{i}.w", _conv_init(rng, 3, 3, c, cout, dtype))
        params.add(f"{prefix}.conv{i}.b", np.zeros(cout, dtype=dtype))
        params.add(f"{prefix}.norm{i}.gain", np.ones(cout, dtype=dtype))
        params.add(f"{prefix}.norm{i}.shift", np.zeros(cout, dtype=dtype))
        c = cout


def init_params(cfg: BackboneConfig, seed: int = 0,
                dtype=np.float64) -> ParamStore:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6D6F]))
    p = ParamStore()
    chans = [cfg.base_channels * (2 ** i) for i in range(cfg.levels + 1)]
    cin = cfg.in_channels
    for i in range(cfg.levels):
        _add_block(p, rng, f"enc{i}", cin, chans[i], dtype)
        cin = chans[i]
    _add_block(p, rng, "bottleneck", cin, chans[-1], dtype)
    for i in reversed(range(cfg.levels)):
        p.add(f"up{i}.w", _conv_init(rng, 3, 3, chans[i + 1], chans[i], dtype))
        p.add(f"up{i}.b", np.zeros(chans[i], dtype=dtype))
        _add_block(p, rng, f"dec{i}", 2 * chans[i], chans[i], dtype)
    c0 = chans[0]
    p.add("head.dist.w", _conv_init(rng, 1, 1, c0, cfg.k, dtype))
    p.add("head.dist.b", np.full(cfg.k, 1.0, dtype=dtype))
    p.add("head.conf.w", _conv_init(rng, 1, 1, c0, cfg.k, dtype))
    p.add("head.conf.b", np.zeros(cfg.k, dtype=dtype))
    p.add("head.prob.w", _conv_init(rng, 1, 1, c0, 1, dtype))
    p.add("head.prob.b", np.zeros(1, dtype=dtype))
    s = cfg.n_samples + 1
    p.add("fuse.naive", np.zeros(s, dtype=dtype))
    p.add("fuse.cwm.w", rng.normal(0.0, 0.3, size=(s, s)).astype(dtype))
    p.add("fuse.cwm.b", np.zeros(s, dtype=dtype))
    if cfg.class_count:
        nc = cfg.class_count + 1
        p.add("head.cls.conv.w", _conv_init(rng, 3, 3, c0, c0, dtype))
        p.add("head.cls.conv.b", np.zeros(c0, dtype=dtype))
        p.add("head.cls.out.w", _conv_init(rng, 1, 1, c0, nc, dtype))
        p.add("head.cls.out.b", np.zeros(nc, dtype=dtype))
    return p


def _block(x: Tensor, params: ParamStore, prefix: str, groups_pref: int,
           n_convs: int = 2) -> Tensor:
    for i in range(n_convs):
        x = ad.conv2d(x, params[f"{prefix}.conv{i}.w"],
                      params[f"{prefix}.conv{i}.b"])
        c = x.shape[2]
        x = ad.norm_layer(x, _groups_for(c, groups_pref),
                          params[f"{prefix}.norm{i}.gain"],
                          params[f"{prefix}.norm{i}.shift"])
        x = ad.relu(x)
    return x


def backbone_forward(image, params: ParamStore,
                     cfg: BackboneConfig) -> HeadOutputs:
    """Run the U-Net and the three prediction heads (no refinement)."""
    x = image if isinstance(image, Tensor) else Tensor(image)
    if x.data.ndim == 2:
        x = ad.reshape(x, x.shape + (1,))
    h, w = x.shape[:2]
    div = 2 ** cfg.levels
    if h % div or w % div:
        raise ContractViolation(
            f"input {h}x{w} not divisible by 2^levels = {div}")
    skips = []
    for i in range(cfg.levels):
        x = _block(x, params, f"enc{i}", cfg.norm_groups)
        skips.append(x)
        x = ad.maxpool2(x)
    x = _block(x, params, "bottleneck", cfg.norm_groups)
    for i in reversed(range(cfg.levels)):
        x = ad.nearest_up2(x)
        x = ad.conv2d(x, params[f"up{i}.w"], params[f"up{i}.b"])
        x = ad.concat([x, skips[i]], axis=2)
        x = _block(x, params, f"dec{i}", cfg.norm_groups)
    feats = x
    dist = ad.softplus(ad.conv2d(feats, params["head.dist.w"],
                                 params["head.dist.b"]))
    conf = ad.conv2d(feats, params["head.conf.w"], params["head.conf.b"])
    prob = ad.sigmoid(ad.reshape(
        ad.conv2d(feats, params["head.prob.w"], params["head.prob.b"]),
        (h, w)))
    return HeadOutputs(dist=dist, conf=conf, prob=prob, features=feats)


def sample_coords(x: float, y: float, d: float, k: int, rays: RaySet,
                  n: int) -> list[tuple[float, float]]:
    """The N+1 sampling positions along ray k for one pixel.

    Point 0 is the pixel itself; points 1..N divide the segment to the
    predicted boundary uniformly.
    """
    if d < 0 or not 0 <= k < rays.k or n < 0:
        raise ContractViolation("sample_coords preconditions violated")
    dx, dy = rays.directions[k]
    pts = [(float(x), float(y))]
    for i in range(1, n + 1):
        f = i / n
        pts.append((x + f * d * dx, y + f * d * dy))
    return pts


def refine_distances(dist: Tensor, conf: Tensor, cfg: BackboneConfig,
                     params: ParamStore) -> Tensor:
    """Fuse ray samples into refined distances.

    For every pixel and direction: sample N points between the pixel and
    its initially predicted boundary, add back the distance already covered
    ((n/N) of the initial prediction), and average with the configured
    weighting. n_samples == 0 returns `dist` unchanged.
    """
    n = cfg.n_samples
    if n == 0:
        return dist
    if dist.shape != conf.shape:
        raise ContractViolation("dist/conf shape mismatch")
    h, w, k = dist.shape
    rays = RaySet(k)
    frac = np.arange(1, n + 1, dtype=np.float64) / n           # (N,)
    cos = rays.directions[:, 0]                                # (K,)
    sin = rays.directions[:, 1]
    xs = np.arange(w, dtype=np.float64)
    ys = np.arange(h, dtype=np.float64)
    basex = np.broadcast_to(xs[None, :, None, None], (h, w, k, n))
    basey = np.broadcast_to(ys[:, None, None, None], (h, w, k, n))
    stepx = cos[:, None] * frac[None, :]                       # (K, N)
    stepy = sin[:, None] * frac[None, :]

    if cfg.coord_grad:
        d4 = ad.expand_last(dist)                              # (H,W,K,1)
        cx = ad.add(ad.mul(d4, stepx), basex)
        cy = ad.add(ad.mul(d4, stepy), basey)
    else:
        dd = dist.data[:, :, :, None]
        cx = basex + dd * stepx
        cy = basey + dd * stepy

    sampled = ad.sample_channels(dist, cx, cy)                 # (H,W,K,N)
    # distance already covered from the pixel to sample n
    terms = ad.add(sampled, ad.mul(ad.expand_last(dist), frac))
    full = ad.concat([ad.expand_last(dist), terms], axis=3)    # (H,W,K,N+1)

    if cfg.weighting == "equal":
        weights = np.full(n + 1, 1.0 / (n + 1))
        refined = ad.tsum(ad.mul(full, weights), axis=3)
    elif cfg.weighting == "naive":
        wvec = ad.channel_softmax(params["fuse.naive"])
        refined = ad.tsum(ad.mul(full, wvec), axis=3)
    else:  # cwm
        conf_samp = ad.sample_channels(conf, cx, cy)
        conf_full = ad.concat([ad.expand_last(conf), conf_samp], axis=3)
        flat = ad.reshape(conf_full, (h * w * k, n + 1))
        logits = ad.add(ad.matmul(flat, params["fuse.cwm.w"]),
                        params["fuse.cwm.b"])
        wmap = ad.reshape(ad.channel_softmax(logits), (h, w, k, n + 1))
        refined = ad.tsum(ad.mul(full, wmap), axis=3)
    return refined


def fusion_weights(conf_samples: Tensor, params: ParamStore) -> Tensor:
    """Confidence-driven fusion weights: shared affine + softmax.

    conf_samples: (..., N+1) sampled confidences; output sums to 1 along
    the last axis. Parameters are shared across pixels and directions.
    """
    shp = conf_samples.shape
    flat = ad.reshape(conf_samples, (-1, shp[-1]))
    logits = ad.add(ad.matmul(flat, params["fuse.cwm.w"]), params["fuse.cwm.b"])
    return ad.reshape(ad.channel_softmax(logits), shp)


def class_head_forward(features: Tensor, params: ParamStore,
                       cfg: BackboneConfig) -> Tensor:
    """Per-pixel logits over background + class_count categories."""
    if not cfg.class_count:
        raise ContractViolation("class_count not configured")
    x = ad.relu(ad.conv2d(features, params["head.cls.conv.w"],
                          params["head.cls.conv.b"]))
    return ad.conv2d(x, params["head.cls.out.w"], params["head.cls.out.b"])


def forward(image, params: ParamStore, cfg: BackboneConfig) -> HeadOutputs:
    """Full forward pass: backbone, heads, and distance refinement."""
    out = backbone_forward(image, params, cfg)
    out.dist_refined = refine_distances(out.dist, out.conf, cfg, params)
    if cfg.class_count:
        out.class_logits = class_head_forward(out.features, params, cfg)
    return out
