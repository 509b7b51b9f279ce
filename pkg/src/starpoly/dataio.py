"""Dataset directory layout, PNG image/mask I/O, and checkpoint files.

Layout: images/NNNN.png (8-bit grayscale), masks/NNNN.png (16-bit instance
ids), classes/NNNN.png (8-bit, optional), manifest.json with the generator
config and split lists.

Checkpoints are a small binary container: magic "SPCK", a JSON header
(configs + tensor name order), then one "SPTN" tensor record per entry.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .autodiff import dump_tensor, load_tensor
from .errors import IOFailure
from .model import ParamStore
from .synth import DatasetSpec, SynthConfig, generate_image, split_seed

_CKPT_MAGIC = b"SPCK"


# -- PNG ------------------------------------------------------------------

def write_image(path: Path, arr: np.ndarray) -> None:
    """8-bit grayscale or RGB PNG."""
    Image.fromarray(arr.astype(np.uint8)).save(path, format="PNG")


def write_mask16(path: Path, arr: np.ndarray) -> None:
    """16-bit single-channel PNG for instance ids."""
    Image.fromarray(arr.astype(np.uint16)).save(path, format="PNG")


def write_mask8(path: Path, arr: np.ndarray) -> None:
    Image.fromarray(arr.astype(np.uint8)).save(path, format="PNG")


def read_image(path: Path) -> np.ndarray:
    try:
        img = Image.open(path)
    except OSError as e:
        raise IOFailure(f"cannot read image {path}: {e}") from e
    arr = np.asarray(img)
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    return arr.astype(np.float64) / 255.0


def read_mask(path: Path) -> np.ndarray:
    try:
        img = Image.open(path)
    except OSError as e:
        raise IOFailure(f"cannot read mask {path}: {e}") from e
    return np.asarray(img).astype(np.int64)


# -- dataset --------------------------------------------------------------

def write_dataset(root: Path, spec: DatasetSpec) -> dict:
    """Generate and write the full synthetic dataset; returns the manifest."""
    root = Path(root)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "masks").mkdir(exist_ok=True)
        if spec.config.class_count:
            (root / "classes").mkdir(exist_ok=True)
    except OSError as e:
        raise IOFailure(f"cannot create dataset dir {root}: {e}") from e
    splits = spec.split_indices()
    for indices in splits.values():
        for i in indices:
            img, labels, classes = generate_image(
                spec.config, seed=split_seed(spec.config.seed, i))
            name = f"{i:04d}.png"
            write_image(root / "images" / name, img)
            write_mask16(root / "masks" / name, labels)
            if classes is not None:
                write_mask8(root / "classes" / name, classes)
    manifest = {
        "config": spec.config.to_json(),
        "splits": {k: [f"{i:04d}" for i in v] for k, v in splits.items()},
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def read_manifest(root: Path) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise IOFailure(f"missing manifest: {path}")
    return json.loads(path.read_text())


def load_split(root: Path, split: str):
    """List of (stem, image, label mask, class mask or None) for a split."""
    root = Path(root)
    manifest = read_manifest(root)
    stems = manifest["splits"][split]
    out = []
    for stem in stems:
        img = read_image(root / "images" / f"{stem}.png")
        mask = read_mask(root / "masks" / f"{stem}.png")
        cls_path = root / "classes" / f"{stem}.png"
        cls = read_mask(cls_path) if cls_path.exists() else None
        out.append((stem, img, mask, cls))
    return out


# -- encoded-target cache --------------------------------------------------

def save_bundle(path: Path, bundle) -> None:
    np.savez_compressed(path, dist=bundle.dist, prob=bundle.prob,
                        seg=bundle.seg, bnd=bundle.bnd, bbox=bundle.bbox)


def load_bundle(path: Path):
    from .encode import GroundTruthBundle
    try:
        with np.load(path) as z:
            return GroundTruthBundle(dist=z["dist"], prob=z["prob"],
                                     seg=z["seg"], bnd=z["bnd"],
                                     bbox=z["bbox"])
    except OSError as e:
        raise IOFailure(f"cannot read encoded targets {path}: {e}") from e


def encode_split(root: Path, split: str, k: int, cache_dir: Path,
                 progress=None) -> list:
    """Encode (and cache) ground-truth targets for a dataset split.

    Returns TrainSample objects; cached .npz files are reused when present.
    """
    from .encode import LabelMask, encode_all
    from .geometry import RaySet
    from .train import TrainSample

    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    rays = RaySet(k)
    samples = []
    for stem, img, mask, cls in load_split(root, split):
        cpath = cache_dir / f"{stem}_k{k}.npz"
        if cpath.exists():
            bundle = load_bundle(cpath)
        else:
            bundle = encode_all(LabelMask(mask, cls), rays)
            save_bundle(cpath, bundle)
        samples.append(TrainSample(stem=stem, image=img, bundle=bundle,
                                   classes=cls))
        if progress:
            progress(stem)
    return samples


# -- checkpoints ----------------------------------------------------------

def save_checkpoint(path: Path, params: ParamStore, header: dict) -> None:
    """Binary container: SPCK magic, JSON header, named SPTN tensors."""
    header = dict(header)
    header["tensors"] = list(params.keys())
    blob = json.dumps(header).encode()
    try:
        with open(path, "wb") as fh:
            fh.write(_CKPT_MAGIC)
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            for name, t in params.items():
                enc = name.encode()
                fh.write(struct.pack("<H", len(enc)))
                fh.write(enc)
                dump_tensor(t.data, fh)
    except OSError as e:
        raise IOFailure(f"cannot write checkpoint {path}: {e}") from e


def load_checkpoint(path: Path) -> tuple[ParamStore, dict]:
    try:
        fh = open(path, "rb")
    except OSError as e:
        raise IOFailure(f"cannot read checkpoint {path}: {e}") from e
    with fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise IOFailure(f"bad checkpoint magic in {path}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode())
        params = ParamStore()
        for expected in header["tensors"]:
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode()
            if name != expected:
                raise IOFailure(f"checkpoint tensor order mismatch: {name}")
            params.add(name, load_tensor(fh))
    return params, header
