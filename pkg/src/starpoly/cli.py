"""Command-line interface.

Every subcommand takes a JSON --config file plus optional --seed / --out
overrides, writes its artifacts (delimited tables, JSON, PNG figures)
under the output directory, and exits 0 on success, 2 on configuration
errors, 3 on I/O failures, and 4 on contract violations.
"""

from __future__ import annotations

import csv
import json
import sys
import warnings
from pathlib import Path

import click
import numpy as np

from . import dataio, plots
from .errors import ConfigError, ContractViolation, IOFailure, StarpolyError
from .metrics import AP_THRESHOLDS
from .model import BackboneConfig, init_params
from .pipeline import evaluate_dataset, infer_image
from .synth import DatasetSpec, SynthConfig
from .train import TrainConfig, train_model


def _load_config(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        obj = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    if not isinstance(obj, dict):
        raise ConfigError("config root must be a JSON object")
    return obj


def _require(cfg: dict, key: str):
    if key not in cfg:
        raise ConfigError(f"config missing required key {key!r}")
    return cfg[key]


def _outdir(out: str) -> Path:
    p = Path(out)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IOFailure(f"cannot create output dir {p}: {e}") from e
    return p


def _common(f):
    f = click.option("--config", "config_path", required=True,
                     type=click.Path(), help="JSON config file")(f)
    f = click.option("--seed", type=int, default=None,
                     help="override the config seed")(f)
    f = click.option("--out", default="out", show_default=True,
                     help="output directory")(f)
    return f


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _ap_header() -> list[str]:
    return [f"AP_{t:.2f}" for t in AP_THRESHOLDS] + ["Mean"]


def _ap_row(summary: dict) -> list[str]:
    vals = [summary[f"AP_{t:.2f}"] for t in AP_THRESHOLDS]
    vals.append(summary["AP_mean"])
    return [f"{v:.4f}" for v in vals]


@click.group()
def cli():
    """Star-polygon instance segmentation toolkit."""


# -- synth -----------------------------------------------------------------

@cli.command()
@_common
def synth(config_path, seed, out):
    """Generate a synthetic dataset (images, masks, manifest)."""
    cfg = _load_config(config_path)
    try:
        scfg = SynthConfig.from_json(cfg.get("dataset", {}))
    except TypeError as e:
        raise ConfigError(f"bad dataset config: {e}") from e
    if seed is not None:
        scfg.seed = seed
    splits = cfg.get("splits", {})
    spec = DatasetSpec(config=scfg,
                       n_train=splits.get("train", 200),
                       n_val=splits.get("val", 50),
                       n_test=splits.get("test", 50))
    root = _outdir(out)
    manifest = dataio.write_dataset(root, spec)
    counts = {k: len(v) for k, v in manifest["splits"].items()}
    click.echo(f"wrote dataset to {root} ({counts})")


# -- encode ----------------------------------------------------------------

@cli.command()
@_common
def encode(config_path, seed, out):
    """Precompute ground-truth target maps for a dataset."""
    cfg = _load_config(config_path)
    root = Path(_require(cfg, "dataset_dir"))
    k = int(cfg.get("k", 32))
    cache = _outdir(out) / "encoded"
    for split in cfg.get("splits", ["train", "val", "test"]):
        samples = dataio.encode_split(root, split, k, cache)
        click.echo(f"encoded {len(samples)} images for split {split!r}")
    click.echo(f"target cache: {cache}")


# -- train-transform -------------------------------------------------------

@cli.command("train-transform")
@_common
def train_transform_cmd(config_path, seed, out):
    """Pre-train the frozen shape encoder used by the perceptual loss."""
    from .losses import SAP_MODES, TransformConfig, train_transform

    cfg = _load_config(config_path)
    root = Path(_require(cfg, "dataset_dir"))
    mode = cfg.get("mode", "both")
    if mode not in SAP_MODES:
        raise ConfigError(f"mode must be one of {SAP_MODES}")
    k = int(cfg.get("k", 32))
    run_seed = seed if seed is not None else int(cfg.get("seed", 0))
    outdir = _outdir(out)
    samples = dataio.encode_split(root, cfg.get("split", "train"), k,
                                  outdir / "encoded")
    limit = cfg.get("limit")
    if limit:
        samples = samples[:int(limit)]
    tcfg = TransformConfig(k=k, mode=mode,
                           levels=int(cfg.get("levels", 4)),
                           base_channels=int(cfg.get("base_channels", 8)))
    model, curve = train_transform(
        [s.bundle for s in samples], mode, tcfg,
        epochs=int(cfg.get("epochs", 20)),
        lr=float(cfg.get("lr", 1e-3)), seed=run_seed)
    ckpt = outdir / "transform.ckpt"
    dataio.save_checkpoint(ckpt, model.params,
                           {"kind": "transform", "mode": mode,
                            "transform": tcfg.to_json(), "seed": run_seed})
    (outdir / "transform_loss.json").write_text(json.dumps(curve))
    plots.loss_curve_figure(outdir / "transform_loss.png",
                            [{"epoch": i, "train_loss": v, "val_loss": v}
                             for i, v in enumerate(curve)],
                            title=f"shape encoder ({mode})")
    click.echo(f"loss {curve[0]:.4f} -> {curve[-1]:.4f}; saved {ckpt}")


def _load_transform(path: Path):
    from .losses import TransformConfig, TransformModel
    params, header = dataio.load_checkpoint(path)
    if header.get("kind") != "transform":
        raise ConfigError(f"{path} is not a shape-encoder checkpoint")
    model = TransformModel(TransformConfig.from_json(header["transform"]),
                           params)
    return model.freeze()


# -- train -----------------------------------------------------------------

def _load_samples(cfg: dict, outdir: Path, split_key: str, default_split: str,
                  k: int, limit_key: str):
    root = Path(_require(cfg, "dataset_dir"))
    samples = dataio.encode_split(root, cfg.get(split_key, default_split), k,
                                  outdir / "encoded")
    limit = cfg.get(limit_key)
    return samples[:int(limit)] if limit else samples


@cli.command()
@_common
def train(config_path, seed, out):
    """Train the segmentation network on an encoded dataset."""
    cfg = _load_config(config_path)
    try:
        bcfg = BackboneConfig.from_json(cfg.get("backbone", {}))
        tcfg = TrainConfig.from_json(cfg.get("train", {}))
    except TypeError as e:
        raise ConfigError(f"bad backbone/train config: {e}") from e
    if seed is not None:
        tcfg.seed = seed
    outdir = _outdir(out)
    train_s = _load_samples(cfg, outdir, "train_split", "train",
                            bcfg.k, "limit_train")
    val_s = _load_samples(cfg, outdir, "val_split", "val",
                          bcfg.k, "limit_val")
    tmodel = None
    if cfg.get("transform_ckpt"):
        tmodel = _load_transform(Path(cfg["transform_ckpt"]))
        if tcfg.sap_mode is None:
            tcfg.sap_mode = tmodel.cfg.mode
    res = train_model(train_s, val_s, bcfg, tcfg, tmodel=tmodel,
                      log_path=outdir / "train_log.jsonl",
                      progress=lambda e, tl, vl, lr: click.echo(
                          f"epoch {e}: train {tl:.4f} val {vl:.4f} lr {lr:g}"))
    ckpt = outdir / "model.ckpt"
    dataio.save_checkpoint(ckpt, res.params,
                           {"kind": "backbone",
                            "backbone": bcfg.to_json(),
                            "train": tcfg.to_json(),
                            "best_epoch": res.best_epoch,
                            "best_val_loss": res.best_val_loss})
    plots.loss_curve_figure(outdir / "train_loss.png", res.history)
    click.echo(f"best val loss {res.best_val_loss:.4f} "
               f"(epoch {res.best_epoch}); saved {ckpt}")


def _load_backbone(path: Path):
    params, header = dataio.load_checkpoint(path)
    if header.get("kind") != "backbone":
        raise ConfigError(f"{path} is not a model checkpoint")
    return params, BackboneConfig.from_json(header["backbone"])


# -- infer -----------------------------------------------------------------

@cli.command()
@_common
def infer(config_path, seed, out):
    """Segment images; write label masks, polygon JSON, and timings."""
    cfg = _load_config(config_path)
    params, bcfg = _load_backbone(Path(_require(cfg, "model_ckpt")))
    prob_t = float(cfg.get("prob_thresh", 0.5))
    nms_t = float(cfg.get("nms_thresh", 0.5))
    outdir = _outdir(out)

    if "images" in cfg:
        items = [(Path(p).stem, dataio.read_image(Path(p)))
                 for p in cfg["images"]]
    else:
        root = Path(_require(cfg, "dataset_dir"))
        items = [(stem, img) for stem, img, _, _ in
                 dataio.load_split(root, cfg.get("split", "test"))]
        if cfg.get("limit"):
            items = items[:int(cfg["limit"])]

    timings = []
    for stem, img in items:
        res = infer_image(img, params, bcfg, prob_t, nms_t)
        dataio.write_mask16(outdir / f"{stem}_labels.png", res.labels)
        (outdir / f"{stem}_polygons.json").write_text(
            json.dumps(res.proposals.to_json()))
        plots.overlay_figure(outdir / f"{stem}_overlay.png", img, res.labels,
                             res.proposals.proposals, title=stem)
        timings.append([stem, len(res.proposals.proposals),
                        f"{res.network_seconds:.4f}",
                        f"{res.post_seconds:.4f}"])
        click.echo(f"{stem}: {len(res.proposals.proposals)} instances "
                   f"(net {res.network_seconds:.3f}s, "
                   f"post {res.post_seconds:.3f}s)")
    _write_csv(outdir / "timings.csv",
               ["image", "instances", "network_seconds", "post_seconds"],
               timings)


# -- eval ------------------------------------------------------------------

@cli.command("eval")
@_common
def eval_cmd(config_path, seed, out):
    """Evaluate a checkpoint: AP table, PQ, per-image CSV, AP figure."""
    cfg = _load_config(config_path)
    params, bcfg = _load_backbone(Path(_require(cfg, "model_ckpt")))
    root = Path(_require(cfg, "dataset_dir"))
    split = cfg.get("split", "test")
    samples = dataio.load_split(root, split)
    if cfg.get("limit"):
        samples = samples[:int(cfg["limit"])]
    rows, summary = evaluate_dataset(
        samples, params, bcfg,
        prob_thresh=float(cfg.get("prob_thresh", 0.5)),
        nms_thresh=float(cfg.get("nms_thresh", 0.5)))
    outdir = _outdir(out)
    name = cfg.get("name", Path(cfg["model_ckpt"]).stem)
    _write_csv(outdir / "ap_table.csv", ["model"] + _ap_header(),
               [[name] + _ap_row(summary)])
    per_image = [[r.stem, r.n_gt, r.n_pred]
                 + [f"{r.ap[float(t)]:.4f}" for t in AP_THRESHOLDS]
                 + [f"{r.ap['mean']:.4f}", f"{r.pq['bPQ']:.4f}"]
                 for r in rows]
    _write_csv(outdir / "per_image.csv",
               ["image", "n_gt", "n_pred"] + _ap_header() + ["bPQ"],
               per_image)
    # wall-clock numbers vary run to run; keep the persisted report stable
    net_s = summary.pop("network_seconds")
    post_s = summary.pop("post_seconds")
    (outdir / "summary.json").write_text(json.dumps(summary, indent=2))
    mean_curve = {float(t): summary[f"AP_{t:.2f}"] for t in AP_THRESHOLDS}
    plots.ap_curve_figure(outdir / "ap_curve.png", {name: mean_curve})
    click.echo(f"{split}: AP mean {summary['AP_mean']:.4f}, "
               f"bPQ {summary['bPQ']:.4f} "
               f"(net {net_s:.2f}s, post {post_s:.2f}s)")


# -- ablate ----------------------------------------------------------------

@cli.command()
@_common
def ablate(config_path, seed, out):
    """Train/evaluate a grid of model variants over several seeds."""
    cfg = _load_config(config_path)
    outdir = _outdir(out)
    base_b = cfg.get("backbone", {})
    base_t = cfg.get("train", {})
    seeds = cfg.get("seeds", [0, 1, 2])
    if seed is not None:
        seeds = [seed + i for i in range(len(seeds))]
    variants = cfg.get("variants")
    if not variants:
        raise ConfigError("ablate config needs a nonempty 'variants' list")

    k = int(base_b.get("k", 32))
    train_s = _load_samples(cfg, outdir, "train_split", "train", k,
                            "limit_train")
    val_s = _load_samples(cfg, outdir, "val_split", "val", k, "limit_val")
    test = dataio.load_split(Path(cfg["dataset_dir"]),
                             cfg.get("test_split", "test"))
    if cfg.get("limit_test"):
        test = test[:int(cfg["limit_test"])]

    tmodel = None
    if cfg.get("transform_ckpt"):
        tmodel = _load_transform(Path(cfg["transform_ckpt"]))

    metrics_keys = ["AP_mean", "AP_0.50", "AP_0.80", "AP_0.85", "bPQ"]
    table_rows = []
    runs = []
    for variant in variants:
        label = variant.get("label") or json.dumps(variant, sort_keys=True)
        try:
            bcfg = BackboneConfig.from_json(
                {**base_b, **{kk: v for kk, v in variant.items()
                              if kk not in ("label", "sap")}})
        except TypeError as e:
            raise ConfigError(f"bad variant {label!r}: {e}") from e
        use_sap = bool(variant.get("sap"))
        if use_sap and tmodel is None:
            raise ConfigError(
                f"variant {label!r} wants the shape loss but no "
                "transform_ckpt is configured")
        per_seed = {m: [] for m in metrics_keys}
        for s in seeds:
            tcfg = TrainConfig.from_json(dict(base_t))
            tcfg.seed = int(s)
            tcfg.sap_mode = tmodel.cfg.mode if use_sap else None
            res = train_model(train_s, val_s, bcfg, tcfg,
                              tmodel=tmodel if use_sap else None)
            _, summary = evaluate_dataset(test, res.params, bcfg)
            summary.pop("network_seconds", None)
            summary.pop("post_seconds", None)
            for m in metrics_keys:
                per_seed[m].append(summary[m])
            runs.append({"label": label, "seed": int(s),
                         "best_val_loss": res.best_val_loss,
                         "summary": summary})
            click.echo(f"{label} seed {s}: AP mean "
                       f"{summary['AP_mean']:.4f}")
        row = {"label": label, "seeds": list(map(int, seeds))}
        for m in metrics_keys:
            row[f"{m}_mean"] = float(np.mean(per_seed[m]))
            row[f"{m}_std"] = float(np.std(per_seed[m]))
        table_rows.append(row)

    header = ["variant", "seeds"]
    for m in metrics_keys:
        header += [f"{m}_mean", f"{m}_std"]
    csv_rows = []
    for row in table_rows:
        line = [row["label"], " ".join(str(s) for s in row["seeds"])]
        for m in metrics_keys:
            line += [f"{row[f'{m}_mean']:.4f}", f"{row[f'{m}_std']:.4f}"]
        csv_rows.append(line)
    _write_csv(outdir / "ablation.csv", header, csv_rows)
    (outdir / "ablation_runs.json").write_text(json.dumps(runs, indent=2))
    plots.ablation_figure(outdir / "ablation.png", table_rows)
    click.echo(f"wrote {outdir / 'ablation.csv'}")


# -- plot ------------------------------------------------------------------

@cli.command()
@_common
def plot(config_path, seed, out):
    """Render overlay figures for dataset images (optionally with a model)."""
    cfg = _load_config(config_path)
    root = Path(_require(cfg, "dataset_dir"))
    split = cfg.get("split", "test")
    samples = dataio.load_split(root, split)
    if cfg.get("limit"):
        samples = samples[:int(cfg["limit"])]
    outdir = _outdir(out)
    params = bcfg = None
    if cfg.get("model_ckpt"):
        params, bcfg = _load_backbone(Path(cfg["model_ckpt"]))
    for stem, img, mask, _ in samples:
        if params is not None:
            res = infer_image(img, params, bcfg,
                              float(cfg.get("prob_thresh", 0.5)),
                              float(cfg.get("nms_thresh", 0.5)))
            plots.overlay_figure(outdir / f"{stem}_pred.png", img,
                                 res.labels, res.proposals.proposals,
                                 title=f"{stem} (predicted)")
        plots.overlay_figure(outdir / f"{stem}_gt.png", img, mask,
                             title=f"{stem} (reference)")
    click.echo(f"wrote figures for {len(samples)} images to {outdir}")


def main() -> None:
    try:
        cli(standalone_mode=False)
    except click.ClickException as e:
        e.show()
        sys.exit(2)
    except click.Abort:
        sys.exit(2)
    except ConfigError as e:
        click.echo(f"config error: {e}", err=True)
        sys.exit(2)
    except IOFailure as e:
        click.echo(f"i/o failure: {e}", err=True)
        sys.exit(3)
    except ContractViolation as e:
        click.echo(f"contract violation: {e}", err=True)
        sys.exit(4)
    except StarpolyError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(4)


if __name__ == "__main__":
    main()
