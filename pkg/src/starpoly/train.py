"""Training loop: batch size 1, Adam, plateau LR schedule, dihedral
augmentation applied to cached targets by exact channel permutation.

Quarter-turn rotations and horizontal flips map the ray directions onto
each other (the direction count must be divisible by 4 for rotations), so
augmented distance maps are obtained from the cached encoding by a spatial
transform plus a channel permutation -- no re-encoding needed, and the
result is bit-identical to encoding the transformed mask.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .encode import GroundTruthBundle
from .errors import ConfigError, ContractViolation
from .losses import TransformModel, class_loss, total_loss
from .model import BackboneConfig, ParamStore, forward
from .optim import Adam, PlateauSchedule


@dataclass
class TrainConfig:
    epochs: int = 40
    lr: float = 1e-4
    lr_decay: float = 0.5
    patience: int = 10
    min_lr: float = 1e-7
    augment: bool = True
    sap_mode: str | None = None     # enables the perceptual shape loss
    transform_epochs: int = 20
    transform_lr: float = 1e-3
    seed: int = 0
    dtype: str = "float32"

    def np_dtype(self):
        try:
            return {"float32": np.float32, "float64": np.float64}[self.dtype]
        except KeyError:
            raise ConfigError(f"unknown dtype {self.dtype!r}") from None

    def to_json(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_json(obj: dict) -> "TrainConfig":
        return TrainConfig(**obj)


@dataclass
class TrainSample:
    stem: str
    image: np.ndarray               # H x W in [0, 1]
    bundle: GroundTruthBundle
    classes: np.ndarray | None = None


# -- augmentation ----------------------------------------------------------

def _rot_channel_perm(k: int) -> np.ndarray:
    # one quarter turn of np.rot90 sends ray k' to source ray (k' + k/4) mod k
    if k % 4:
        raise ContractViolation("rotation augmentation needs K divisible by 4")
    return (np.arange(k) + k // 4) % k


def _flip_channel_perm(k: int) -> np.ndarray:
    # x -> W-1-x negates the direction cosine: theta -> pi - theta
    return (k // 2 - np.arange(k)) % k


def augment_bundle(image: np.ndarray, bundle: GroundTruthBundle,
                   rot: int, flip: bool,
                   classes: np.ndarray | None = None):
    """Apply `rot` quarter turns then an optional horizontal flip.

    Every target map is transformed exactly as if the underlying label mask
    had been transformed and re-encoded.
    """
    k = bundle.dist.shape[2]
    img = image
    dist = bundle.dist
    prob, seg, bnd, bbox = bundle.prob, bundle.seg, bundle.bnd, bundle.bbox
    cls = classes
    for _ in range(rot % 4):
        img = np.rot90(img)
        prob = np.rot90(prob)
        seg = np.rot90(seg)
        bnd = np.rot90(bnd)
        if cls is not None:
            cls = np.rot90(cls)
        dist = np.rot90(dist[:, :, _rot_channel_perm(k)], axes=(0, 1))
        # box sides rotate with the frame: (dxc,dyc,l,r,t,b)->(dyc,-dxc,t,b,r,l)
        bbox = np.rot90(bbox[:, :, [1, 0, 4, 5, 3, 2]], axes=(0, 1)).copy()
        bbox[:, :, 1] = -bbox[:, :, 1]
    if flip:
        img = img[:, ::-1]
        prob = prob[:, ::-1]
        seg = seg[:, ::-1]
        bnd = bnd[:, ::-1]
        if cls is not None:
            cls = cls[:, ::-1]
        dist = dist[:, ::-1, :][:, :, _flip_channel_perm(k)]
        bbox = bbox[:, ::-1, [0, 1, 3, 2, 4, 5]].copy()
        bbox[:, :, 0] = -bbox[:, :, 0]
    out = GroundTruthBundle(dist=np.ascontiguousarray(dist),
                            prob=np.ascontiguousarray(prob),
                            seg=np.ascontiguousarray(seg),
                            bnd=np.ascontiguousarray(bnd),
                            bbox=np.ascontiguousarray(bbox))
    img = np.ascontiguousarray(img)
    cls = np.ascontiguousarray(cls) if cls is not None else None
    return img, out, cls


# -- loop ------------------------------------------------------------------

def _sample_loss(sample: TrainSample, params: ParamStore,
                 bcfg: BackboneConfig, dtype,
                 tmodel: TransformModel | None):
    out = forward(sample.image.astype(dtype), params, bcfg)
    loss = total_loss(out.prob, out.dist, out.dist_refined,
                      sample.bundle.dist.astype(dtype),
                      sample.bundle.prob.astype(dtype), tmodel)
    if bcfg.class_count and sample.classes is not None:
        from . import autodiff as ad
        loss = ad.add(loss, class_loss(out.class_logits, sample.classes))
    return loss


@dataclass
class TrainResult:
    params: ParamStore              # best-validation weights
    history: list[dict]
    best_epoch: int
    best_val_loss: float


def train_model(train_samples: list[TrainSample],
                val_samples: list[TrainSample],
                bcfg: BackboneConfig,
                tcfg: TrainConfig,
                tmodel: TransformModel | None = None,
                init: ParamStore | None = None,
                log_path: Path | None = None,
                progress=None) -> TrainResult:
    """Single-sample SGD epochs with Adam and best-validation selection.

    `tmodel` must already be frozen when the shape loss is enabled. Writes
    one JSON line per epoch to `log_path` when given. `progress` is an
    optional callable(epoch, train_loss, val_loss, lr).
    """
    if not train_samples or not val_samples:
        raise ContractViolation("training needs nonempty train and val sets")
    if tcfg.sap_mode is not None and tmodel is None:
        raise ConfigError("sap_mode set but no transformation model supplied")
    dtype = tcfg.np_dtype()
    from .model import init_params
    params = init if init is not None else init_params(
        bcfg, seed=tcfg.seed, dtype=dtype)
    opt = Adam(params, lr=tcfg.lr)
    sched = PlateauSchedule(opt, factor=tcfg.lr_decay,
                            patience=tcfg.patience, min_lr=tcfg.min_lr)
    rng = np.random.default_rng(np.random.SeedSequence([tcfg.seed, 0x4175]))
    can_rotate = bcfg.k % 4 == 0

    best = (np.inf, -1, None)
    history: list[dict] = []
    log_fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(tcfg.epochs):
            order = rng.permutation(len(train_samples))
            train_loss = 0.0
            for idx in order:
                s = train_samples[idx]
                if tcfg.augment:
                    rot = int(rng.integers(0, 4)) if can_rotate else 0
                    flip = bool(rng.integers(0, 2))
                    if rot or flip:
                        img, bundle, cls = augment_bundle(
                            s.image, s.bundle, rot, flip, s.classes)
                        s = TrainSample(s.stem, img, bundle, cls)
                params.zero_grads()
                loss = _sample_loss(s, params, bcfg, dtype, tmodel)
                loss.backward()
                opt.step()
                train_loss += loss.item()
            train_loss /= len(train_samples)

            val_loss = 0.0
            for s in val_samples:
                val_loss += _sample_loss(s, params, bcfg, dtype,
                                         tmodel).item()
            val_loss /= len(val_samples)

            if val_loss < best[0]:
                best = (val_loss, epoch, copy.deepcopy(dict(params)))
            row = {"epoch": epoch, "train_loss": train_loss,
                   "val_loss": val_loss, "lr": opt.lr}
            history.append(row)
            if log_fh:
                # wall time stays out of the log to keep reruns byte-identical
                log_fh.write(json.dumps(row) + "\n")
                log_fh.flush()
            if progress:
                progress(epoch, train_loss, val_loss, opt.lr)
            if not sched.update(val_loss):
                break
    finally:
        if log_fh:
            log_fh.close()

    best_params = ParamStore()
    for name, t in best[2].items():
        best_params[name] = t
    return TrainResult(params=best_params, history=history,
                       best_epoch=best[1], best_val_loss=best[0])
