"""Training objectives.

Centroid-probability BCE, weighted L1 distance regression (plain and
refined), the perceptual shape loss built on a frozen encoder that was
pre-trained to transform (distance maps, centroid probability) into other
instance representations, the combined objective, and the optional
per-pixel class loss (cross-entropy + Dice).
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encode import GroundTruthBundle
from .errors import ContractViolation
from .model import ParamStore, _add_block, _block, _conv_init, _groups_for

BCE_EPS = 1e-7

SAP_MODES = ("seg_bnd", "bbox", "both", "recons")

_MODE_CHANNELS = {"seg_bnd": 2, "bbox": 6, "both": 8}


def _as_t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


# -- elementary losses ----------------------------------------------------

def bce(pred: Tensor, target) -> Tensor:
    """Mean binary cross-entropy with predictions clamped away from {0,1}."""
    target = np.asarray(target.data if isinstance(target, Tensor) else target,
                        dtype=np.float64)
    p = ad.clamp(pred, BCE_EPS, 1.0 - BCE_EPS)
    pos = ad.mul(ad.log(p), target)
    neg = ad.mul(ad.log(ad.sub(1.0, p)), 1.0 - target)
    return ad.mul(ad.tmean(ad.add(pos, neg)), -1.0)


def prob_loss(prob: Tensor, prob_gt) -> Tensor:
    """BCE between predicted and ground-truth centroid probability."""
    return bce(prob, prob_gt)


def dist_loss(dist: Tensor, dist_gt, prob_gt) -> Tensor:
    """Centroid-probability-weighted L1 over all pixels and directions."""
    dist_gt = np.asarray(dist_gt, dtype=np.float64)
    prob_gt = np.asarray(prob_gt, dtype=np.float64)
    h, w, k = dist_gt.shape
    err = ad.absolute(ad.sub(dist_gt, dist))
    weighted = ad.mul(err, prob_gt[:, :, None])
    return ad.mul(ad.tsum(weighted), 1.0 / (k * h * w))


def refined_dist_loss(dist: Tensor, dist_refined: Tensor,
                      dist_gt, prob_gt) -> Tensor:
    """Supervises both the initial and the refined distance maps."""
    return ad.add(dist_loss(dist, dist_gt, prob_gt),
                  dist_loss(dist_refined, dist_gt, prob_gt))


# -- transformation model --------------------------------------------------

@dataclass
class TransformConfig:
    k: int = 32
    mode: str = "both"
    levels: int = 4
    base_channels: int = 8
    norm_groups: int = 8

    def __post_init__(self):
        if self.mode not in SAP_MODES:
            raise ContractViolation(f"mode must be one of {SAP_MODES}")

    @property
    def in_channels(self) -> int:
        return self.k + 1

    @property
    def out_channels(self) -> int:
        if self.mode == "recons":
            return self.k + 1
        return _MODE_CHANNELS[self.mode]

    def to_json(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_json(obj: dict) -> "TransformConfig":
        return TransformConfig(**obj)


def _t_chans(cfg: TransformConfig) -> list[int]:
    return [cfg.base_channels * (2 ** min(i, 3)) for i in range(cfg.levels + 1)]


def init_transform_params(cfg: TransformConfig, seed: int = 0,
                          dtype=np.float64) -> ParamStore:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7472]))
    p = ParamStore()
    chans = _t_chans(cfg)
    cin = cfg.in_channels
    for i in range(cfg.levels):
        _add_block(p, rng, f"tenc{i}", cin, chans[i], dtype, n_convs=1)
        cin = chans[i]
    _add_block(p, rng, "tbottleneck", cin, chans[-1], dtype, n_convs=1)
    for i in reversed(range(cfg.levels)):
        _add_block(p, rng, f"tdec{i}", chans[i + 1], chans[i], dtype,
                   n_convs=1)
    p.add("tout.w", _conv_init(rng, 1, 1, chans[0], cfg.out_channels, dtype))
    p.add("tout.b", np.zeros(cfg.out_channels, dtype=dtype))
    return p


@dataclass
class TransformModel:
    """Encoder-decoder (no skip connections) over concatenated maps."""

    cfg: TransformConfig
    params: ParamStore
    frozen: bool = False

    def freeze(self) -> "TransformModel":
        self.params.freeze()
        self.frozen = True
        return self

    def _input(self, dist, prob) -> Tensor:
        dist = _as_t(dist)
        prob = _as_t(prob)
        p3 = ad.reshape(prob, prob.shape + (1,))
        return ad.concat([dist, p3], axis=2)

    def encode(self, dist, prob) -> Tensor:
        """Deepest encoder feature map; the perceptual-loss feature space."""
        x = self._input(dist, prob)
        h, w = x.shape[:2]
        div = 2 ** self.cfg.levels
        if h % div or w % div:
            raise ContractViolation(
                f"input {h}x{w} not divisible by 2^levels = {div}")
        for i in range(self.cfg.levels):
            x = _block(x, self.params, f"tenc{i}", self.cfg.norm_groups,
                       n_convs=1)
            x = ad.maxpool2(x)
        return _block(x, self.params, "tbottleneck", self.cfg.norm_groups,
                      n_convs=1)

    def forward(self, dist, prob) -> Tensor:
        """Full encoder-decoder output (head activation not applied)."""
        x = self.encode(dist, prob)
        for i in reversed(range(self.cfg.levels)):
            x = ad.nearest_up2(x)
            x = _block(x, self.params, f"tdec{i}", self.cfg.norm_groups,
                       n_convs=1)
        return ad.conv2d(x, self.params["tout.w"], self.params["tout.b"])


def transform_targets(bundle: GroundTruthBundle, mode: str) -> dict:
    """Per-mode supervision maps for the transformation model."""
    if mode == "seg_bnd":
        return {"bin": np.stack([bundle.seg, bundle.bnd], axis=2).astype(float)}
    if mode == "bbox":
        return {"lin": bundle.bbox, "fg": bundle.seg}
    if mode == "both":
        return {"bin": np.stack([bundle.seg, bundle.bnd], axis=2).astype(float),
                "lin": bundle.bbox, "fg": bundle.seg}
    if mode == "recons":
        return {"lin": np.concatenate(
            [bundle.dist, bundle.prob[:, :, None]], axis=2)}
    raise ContractViolation(f"unknown mode {mode!r}")


def transform_loss(output: Tensor, targets: dict, mode: str) -> Tensor:
    """BCE on binary targets, L1 on linear targets (foreground-only for bbox)."""
    parts = []
    ch = 0
    if "bin" in targets:
        nb = targets["bin"].shape[2]
        logits = _slice_channels(output, ch, nb)
        parts.append(bce(ad.sigmoid(logits), targets["bin"]))
        ch += nb
    if "lin" in targets:
        lin = targets["lin"]
        nl = lin.shape[2]
        pred = _slice_channels(output, ch, nl)
        err = ad.absolute(ad.sub(lin, pred))
        if "fg" in targets:
            fg = targets["fg"].astype(np.float64)
            denom = max(float(fg.sum()) * nl, 1.0)
            parts.append(ad.mul(ad.tsum(ad.mul(err, fg[:, :, None])),
                                1.0 / denom))
        else:
            parts.append(ad.tmean(err))
        ch += nl
    total = parts[0]
    for p in parts[1:]:
        total = ad.add(total, p)
    return total


def _slice_channels(t: Tensor, start: int, count: int) -> Tensor:
    cols = [ad.expand_last(ad.slice_last(t, start + i)) for i in range(count)]
    return ad.concat(cols, axis=t.data.ndim - 1)


def train_transform(bundles: list[GroundTruthBundle], mode: str,
                    cfg: TransformConfig | None = None, epochs: int = 50,
                    lr: float = 1e-3, seed: int = 0,
                    dtype=np.float64) -> tuple[TransformModel, list[float]]:
    """Train the transformation model and return it frozen.

    Inputs are the ground-truth distance/probability maps; targets follow
    the chosen representation mode. No data augmentation. Emits a warning
    (not an error) if the final loss does not beat the initial loss.
    """
    import warnings

    from .optim import Adam

    if not bundles:
        raise ContractViolation("train_transform needs a nonempty dataset")
    k = bundles[0].dist.shape[2]
    if cfg is None:
        cfg = TransformConfig(k=k, mode=mode)
    if cfg.k != k or cfg.mode != mode:
        raise ContractViolation("TransformConfig inconsistent with data/mode")
    params = init_transform_params(cfg, seed=seed, dtype=dtype)
    model = TransformModel(cfg, params)
    opt = Adam(params, lr=lr)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7473]))
    curve: list[float] = []
    for _ in range(epochs):
        order = rng.permutation(len(bundles))
        epoch_loss = 0.0
        for idx in order:
            b = bundles[idx]
            params.zero_grads()
            out = model.forward(b.dist.astype(dtype), b.prob.astype(dtype))
            loss = transform_loss(out, transform_targets(b, mode), mode)
            loss.backward()
            opt.step()
            epoch_loss += loss.item()
        curve.append(epoch_loss / len(bundles))
    if len(curve) >= 2 and curve[-1] >= curve[0]:
        warnings.warn(
            f"transformation model did not converge: {curve[0]:.4g} -> "
            f"{curve[-1]:.4g}", RuntimeWarning)
    return model.freeze(), curve


# -- perceptual shape loss -------------------------------------------------

def shape_loss(dist: Tensor, dist_refined: Tensor, prob: Tensor,
               dist_gt, prob_gt, tmodel: TransformModel) -> Tensor:
    """L1 feature-space mismatch against the frozen shape encoder.

    Features of the ground-truth pair are constants; gradients flow only
    into the predicted maps. The per-position L1 norm sums over feature
    channels and averages over the encoder's output grid.
    """
    if not tmodel.frozen:
        raise ContractViolation("shape_loss requires a frozen encoder")
    feat_gt = tmodel.encode(np.asarray(dist_gt, dtype=np.float64),
                            np.asarray(prob_gt, dtype=np.float64))
    feat_gt = feat_gt.detach()
    feat = tmodel.encode(dist, prob)
    feat_r = tmodel.encode(dist_refined, prob)
    hp, wp = feat_gt.shape[:2]
    scale = 1.0 / (hp * wp)
    s = ad.tsum(ad.absolute(ad.sub(feat_gt, feat)))
    sr = ad.tsum(ad.absolute(ad.sub(feat_gt, feat_r)))
    return ad.mul(ad.add(s, sr), scale)


# -- combined objective ----------------------------------------------------

def total_loss(prob: Tensor, dist: Tensor, dist_refined: Tensor,
               dist_gt, prob_gt,
               tmodel: TransformModel | None = None) -> Tensor:
    """Equal-weight sum of the probability, distance, and shape terms.

    The shape term is omitted when no transformation model is configured.
    With refinement disabled (`dist_refined` is the same tensor as `dist`)
    the distance map is supervised once, recovering the plain objective.
    """
    if dist_refined is dist:
        dterm = dist_loss(dist, dist_gt, prob_gt)
    else:
        dterm = refined_dist_loss(dist, dist_refined, dist_gt, prob_gt)
    loss = ad.add(prob_loss(prob, prob_gt), dterm)
    if tmodel is not None:
        loss = ad.add(loss, shape_loss(dist, dist_refined, prob,
                                       dist_gt, prob_gt, tmodel))
    return loss


# -- class loss ------------------------------------------------------------

def class_loss(class_logits: Tensor, class_mask: np.ndarray,
               eps: float = 1e-7) -> Tensor:
    """Per-pixel softmax cross-entropy plus soft Dice.

    Dice averages over the class indices (background included) that are
    present in the target mask.
    """
    class_mask = np.asarray(class_mask)
    h, w, nc = class_logits.shape
    if class_mask.shape != (h, w):
        raise ContractViolation("class mask shape mismatch")
    onehot = np.zeros((h, w, nc), dtype=np.float64)
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    onehot[ys, xs, class_mask] = 1.0
    probs = ad.channel_softmax(class_logits)
    logp = ad.log(ad.clamp(probs, eps, 1.0))
    ce = ad.mul(ad.tsum(ad.mul(logp, onehot)), -1.0 / (h * w))

    present = np.unique(class_mask)
    dice_terms = []
    for c in present:
        pc = ad.slice_last(probs, int(c))
        tc = onehot[:, :, int(c)]
        inter = ad.tsum(ad.mul(pc, tc))
        denom = ad.add(ad.tsum(pc), float(tc.sum()))
        dice_terms.append(ad.div(ad.mul(inter, 2.0), ad.add(denom, eps)))
    dice = dice_terms[0]
    for t in dice_terms[1:]:
        dice = ad.add(dice, t)
    dice = ad.sub(1.0, ad.mul(dice, 1.0 / len(dice_terms)))
    return ad.add(ce, dice)
