"""Command-line entry point: ``sst-parking <subcommand> [--config run.json] [flags]``.

Configuration is a JSON file whose sections mirror :class:`RunConfig`;
flags override file values.  Every subcommand writes ``manifest.<command>.json``
(resolved config, seed, SHA-256 of inputs, outputs) next to its outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import pandas as pd

from . import demand as dm
from . import pcz
from . import pipeline as pl
from .checkpoint import CheckpointError
from .evaluate import (
    HORIZONS,
    EvalError,
    evaluate_model,
    plot_lookback,
    run_feature_ablation,
    run_finetune_comparison,
    run_lookback_sweep,
    windows_for,
    write_table,
)
from .features import FeatureConfig
from .finetune import TrainConfig, TuneStrategy, finetune, predict
from .model import ConfigError, ModelConfig, SSTModel, TimeFeatureSpec, describe
from .optim import TrainingError
from .ssl import MaskError, MaskSpec, pretrain, write_curve_csv
from .tensor import ShapeError

OUTPUT_ROOT_ENV = "SST_OUTPUT_ROOT"

EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_SCHEMA = 4
EXIT_TRAINING = 5


class CLIError(Exception):
    def __init__(self, message: str, code: int = EXIT_CONFIG):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- configuration


@dataclass
class Paths:
    lots: str | None = None
    trips: str | None = None
    occupancy: str | None = None
    out: str | None = None


@dataclass
class RunConfig:
    paths: Paths = field(default_factory=Paths)
    pipeline: pl.PipelineConfig = field(default_factory=pl.PipelineConfig)
    synth: pl.SynthConfig = field(default_factory=pl.SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    mask: MaskSpec = field(default_factory=MaskSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    strategy: str = "full"
    protocol: str = "temporal"
    seed: int = 0

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.to_dict() if hasattr(v, "to_dict") else (asdict(v) if hasattr(v, "__dataclass_fields__") else v)
        return out


_SECTIONS = {
    "paths": Paths,
    "pipeline": pl.PipelineConfig,
    "synth": pl.SynthConfig,
    "model": ModelConfig,
    "mask": MaskSpec,
    "train": TrainConfig,
    "features": FeatureConfig,
}


def _build(cls, values: dict):
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise CLIError(f"unknown keys for [{cls.__name__}]: {unknown}")
    kw = {}
    for k, v in values.items():
        if isinstance(v, list):
            v = tuple(v)
        kw[k] = v
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise CLIError(f"invalid [{cls.__name__}] settings: {exc}") from exc


def load_config(path: str | None, overrides: dict[str, dict] | None = None, top: dict | None = None) -> RunConfig:
    raw: dict = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise CLIError(f"config file not found: {p}", EXIT_MISSING)
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise CLIError(f"cannot parse config {p}: {exc}") from exc
        if not isinstance(raw, dict):
            raise CLIError(f"config {p} must hold a JSON object")
    overrides = overrides or {}
    top = top or {}
    bad = sorted(set(raw) - set(_SECTIONS) - {"strategy", "protocol", "seed"})
    if bad:
        raise CLIError(f"unknown config sections: {bad}")
    merged = {}
    for name, cls in _SECTIONS.items():
        values = dict(raw.get(name, {}))
        values.update({k: v for k, v in overrides.get(name, {}).items() if v is not None})
        if name == "synth":
            for key in ("coupling", "trip_rate"):
                if key in values:
                    values[key] = {**getattr(pl.SynthConfig(), key), **values[key]}
        merged[name] = _build(cls, values)
    scalars = {k: raw[k] for k in ("strategy", "protocol", "seed") if k in raw}
    scalars.update({k: v for k, v in top.items() if v is not None})
    cfg = RunConfig(**merged, **scalars)
    try:
        TuneStrategy.parse(cfg.strategy)
    except ValueError as exc:
        raise CLIError(str(exc)) from exc
    return cfg


def parse_set(items) -> dict[str, dict]:
    """``--set section.key=value`` pairs; values are parsed as JSON when possible."""
    out: dict[str, dict] = {}
    for item in items or ():
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise CLIError(f"--set expects section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        section, name = key.split(".", 1)
        if section not in _SECTIONS:
            raise CLIError(f"--set: unknown section {section!r}")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        out.setdefault(section, {})[name] = parsed
    return out


# ---------------------------------------------------------------- manifest helpers


def sha256(path) -> str:
    h = hashlib.sha256()
    p = Path(path)
    files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
    for q in files:
        if p.is_dir():
            h.update(str(q.relative_to(p)).encode())
        with open(q, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, command: str, cfg: RunConfig, inputs: dict, outputs: list, extra: dict | None = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "inputs": {k: {"path": str(v), "sha256": sha256(v)} for k, v in inputs.items() if v is not None},
        "outputs": [str(o) for o in outputs],
    }
    if extra:
        manifest.update(extra)
    path = out_dir / f"manifest.{command}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
    (out_dir / "config.resolved.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True, default=str))
    return path


def _need(path, what: str) -> Path:
    if path is None:
        raise CLIError(f"missing required input: {what}", EXIT_CONFIG)
    p = Path(path)
    if not p.exists():
        raise CLIError(f"{what} not found: {p}", EXIT_MISSING)
    return p


def _out_path(value, default_name: str) -> Path:
    if value:
        return Path(value)
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    return root / default_name


def _say(msg: str) -> None:
    print(msg, flush=True)


# ---------------------------------------------------------------- subcommands


def cmd_synth(args, cfg: RunConfig) -> None:
    out = _out_path(args.out or cfg.paths.out, "synth")
    out.mkdir(parents=True, exist_ok=True)
    synth = pl.SynthConfig(**{**asdict(cfg.synth), "seed": cfg.seed})
    data = pl.synth_generate(synth)
    pcz.write_lots_csv(out / "lots.csv", data.lots)
    dm.write_trips_csv(out / "trips.csv", data.trips)
    pl.write_occupancy_csv(out / "occupancy.csv", data.occupancy)
    outputs = [out / "lots.csv", out / "trips.csv", out / "occupancy.csv"]
    write_manifest(out, "synth", cfg, {}, outputs)
    _say(f"synth: {len(data.lots)} lots, {len(data.trips)} trips, {len(data.occupancy)} occupancy records -> {out}")


def cmd_preprocess(args, cfg: RunConfig) -> None:
    occ = _need(args.occupancy or cfg.paths.occupancy, "occupancy CSV")
    lots_path = args.lots or cfg.paths.lots
    lot_ids = [lot.id for lot in pcz.read_lots_csv(_need(lots_path, "lots CSV"))] if lots_path else None
    out = _out_path(args.out, "processed.csv")
    grid = pl.preprocess(pl.read_occupancy_csv(occ), cfg.pipeline.bin_minutes, cfg.pipeline.cutoff_per_day, lot_ids)
    out.parent.mkdir(parents=True, exist_ok=True)
    pl.write_occupancy_csv(out, pl.grid_to_frame(grid))
    write_manifest(out.parent, "preprocess", cfg, {"occupancy": occ, "lots": lots_path}, [out])
    _say(f"preprocess: {len(grid.lot_ids)} lots x {grid.n_steps} steps -> {out}")


def cmd_cluster(args, cfg: RunConfig) -> None:
    lots_path = _need(args.lots or cfg.paths.lots, "lots CSV")
    lots = pcz.read_lots_csv(lots_path)
    out = _out_path(args.out, "zones.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    p = cfg.pipeline
    res = pcz.kmeans(lots, p.k, p.p_minkowski, seed=cfg.seed, buffer_radius=p.buffer_radius)
    pcz.write_zones(out, res.zones)
    write_manifest(out.parent, "cluster", cfg, {"lots": lots_path}, [out, out.with_suffix(".json")],
                   {"inertia_trace": res.inertia_trace})
    _say(f"cluster: {len(res.zones)} zones after {res.n_iter} iterations -> {out}")


def _read_grid(path) -> pl.Grid:
    return pl.frame_to_grid(pl.read_occupancy_csv(path))


def cmd_fuse(args, cfg: RunConfig) -> None:
    trips_path = _need(args.trips or cfg.paths.trips, "trips CSV")
    lots_path = _need(args.lots or cfg.paths.lots, "lots CSV")
    zones_path = _need(args.zones, "zones CSV")
    grid_path = _need(args.grid, "processed availability CSV")
    lots = pcz.read_lots_csv(lots_path)
    zones = pcz.read_zones(zones_path, lots)
    grid = _read_grid(grid_path)
    series = dm.fuse(dm.read_trips_csv(trips_path), zones, lots, grid.index[0], grid.n_steps, cfg.pipeline.bin_minutes)
    out = _out_path(args.out, "demand.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    dm.write_demand_csv(out, series)
    write_manifest(out.parent, "fuse", cfg, {"trips": trips_path, "lots": lots_path, "zones": zones_path, "grid": grid_path},
                   [out], {"n_rejected": series.n_rejected})
    _say(f"fuse: {len(zones)} zones x {series.n_steps} steps, {series.n_rejected} trips rejected -> {out}")


def cmd_dataset(args, cfg: RunConfig) -> None:
    grid_path = _need(args.grid, "processed availability CSV")
    lots_path = _need(args.lots or cfg.paths.lots, "lots CSV")
    zones_path = _need(args.zones, "zones CSV")
    demand_path = _need(args.demand, "demand CSV")
    lots = pcz.read_lots_csv(lots_path)
    zones = pcz.read_zones(zones_path, lots)
    grid = _read_grid(grid_path)
    zone_ids, ts, arr = dm.read_demand_csv(demand_path)
    if len(ts) != grid.n_steps or ts[0] != grid.index[0]:
        raise CLIError(f"demand covers {len(ts)} steps from {ts[0]}, grid covers {grid.n_steps} from {grid.index[0]}", EXIT_SCHEMA)
    order = {z: i for i, z in enumerate(zone_ids)}
    missing = [z.id for z in zones if z.id not in order]
    if missing:
        raise CLIError(f"demand file lacks zones {missing}", EXIT_SCHEMA)
    idx = [order[z.id] for z in zones]
    norm = arr[idx][:, :, :4].transpose(2, 0, 1)
    series = dm.DemandSeries([z.id for z in zones], grid.index[0], cfg.pipeline.bin_minutes,
                             np.zeros(norm.shape, dtype=np.int64), norm, arr[idx][:, :, 4])
    p = cfg.pipeline
    data = pl.build_dataset(grid, zones, series, lots, TimeFeatureSpec(tuple(p.time_features)), p.ratios, p.target_fraction)
    out = _out_path(args.out, "dataset")
    pl.save_dataset(data, out)
    write_manifest(out, "dataset", cfg, {"grid": grid_path, "lots": lots_path, "zones": zones_path, "demand": demand_path},
                   [out / "schema.json"] + [out / f"{s}.bin" for s in pl.SPLITS])
    sizes = {k: b - a for k, (a, b) in data.splits.items()}
    _say(f"dataset: {len(lots)} lots, {data.n_steps} steps/lot, splits {sizes} -> {out}")


def _load_data(path) -> pl.ProcessedDataset:
    p = _need(path, "dataset directory")
    try:
        return pl.load_dataset(p)
    except (KeyError, ValueError, OSError) as exc:
        raise CLIError(f"cannot read dataset {p}: {exc}", EXIT_SCHEMA) from exc


def _train_kw(cfg: RunConfig) -> dict:
    t = cfg.train
    return dict(lr=t.lr, batch_size=t.batch_size, seed=cfg.seed, max_batches=t.max_batches)


def cmd_pretrain(args, cfg: RunConfig) -> None:
    data = _load_data(args.data)
    wins = windows_for(data, cfg.model, cfg.train, cfg.features, cfg.protocol)
    model = SSTModel(cfg.model, cfg.seed)
    epochs = cfg.train.pretrain_epochs
    mask = MaskSpec(**{**cfg.mask.to_dict(), "seed": cfg.mask.seed})
    res = pretrain(model, wins, mask, epochs, log=_say, **_train_kw(cfg))
    out = _out_path(args.out, "pretrained.ckpt")
    model.save(out, {"features": cfg.features.to_dict(), "mask": res.spec.to_dict(), "stage": "pretrain",
                     "recon_curve": res.curve})
    curve = out.with_suffix(".curve.csv")
    write_curve_csv(curve, res.curve, "recon_mse")
    write_manifest(out.parent, "pretrain", cfg, {"data": args.data}, [out, curve])
    _say(f"pretrain: {epochs} epochs -> {out}")


def _load_model(path) -> tuple[SSTModel, dict]:
    p = _need(path, "checkpoint")
    try:
        return SSTModel.load(p)
    except (CheckpointError, KeyError, ValueError, OSError) as exc:
        raise CLIError(f"cannot read checkpoint {p}: {exc}", EXIT_SCHEMA) from exc


def cmd_finetune(args, cfg: RunConfig) -> None:
    data = _load_data(args.data)
    if args.ckpt and args.ckpt != "none":
        model, meta = _load_model(args.ckpt)
        features = FeatureConfig.from_dict(meta.get("features", cfg.features.to_dict()))
        seq_len = model.config.seq_len
        mcfg = ModelConfig.from_dict({**model.config.to_dict(), "pred_len": cfg.model.pred_len})
    else:
        model, features, mcfg = SSTModel(cfg.model, cfg.seed), cfg.features, cfg.model
        seq_len = mcfg.seq_len
    cfg.model = mcfg
    cfg.features = features
    wins = pl.make_windows(data, seq_len, mcfg.pred_len, cfg.train.stride, features, cfg.protocol,
                           stride_eval=cfg.train.stride_eval)
    strategy = TuneStrategy.parse(args.strategy or cfg.strategy)
    res = finetune(model, wins, strategy, cfg.train.epochs, log=_say, **_train_kw(cfg))
    out = _out_path(args.out, "finetuned.ckpt")
    model.save(out, {"features": features.to_dict(), "stage": "finetune", "strategy": strategy.value,
                     "train_curve": res.train_curve, "val_curve": res.val_curve, "best_epoch": res.best_epoch})
    curve = out.with_suffix(".curve.csv")
    pd.DataFrame({"epoch": range(len(res.train_curve)), "train_mse": res.train_curve,
                  "val_mse": res.val_curve or [float("nan")] * len(res.train_curve)}).to_csv(curve, index=False)
    write_manifest(out.parent, "finetune", cfg, {"data": args.data, "ckpt": None if args.ckpt in (None, "none") else args.ckpt},
                   [out, curve])
    _say(f"finetune[{strategy.value}]: best epoch {res.best_epoch} -> {out}")


def cmd_predict(args, cfg: RunConfig) -> None:
    model, meta = _load_model(args.ckpt)
    data = _load_data(args.data)
    features = FeatureConfig.from_dict(meta.get("features", {}))
    try:
        zone = data.zone(args.zone) if args.zone else data.zones[0]
    except KeyError:
        raise CLIError(f"unknown zone {args.zone!r}; dataset has {[z.zone_id for z in data.zones]}", EXIT_SCHEMA) from None
    chans, grid, targets = pl.select_features(zone, features)
    names = [c.name for c in chans]
    L = model.config.seq_len
    if args.window:
        win = pd.read_csv(_need(args.window, "window CSV"))
        missing = [n for n in names if n not in win.columns]
        if missing:
            raise CLIError(f"window CSV lacks channels {missing}", EXIT_SCHEMA)
        x = win[names].to_numpy(np.float64)
        source = {"window": args.window}
    else:
        start = args.start if args.start is not None else data.splits["test"][0]
        x = grid[start : start + L]
        source = {"data": args.data}
    if x.shape[0] != L:
        raise CLIError(f"window length {x.shape[0]} does not match the model look-back L={L}", EXIT_SCHEMA)
    lot_ids = [chans[j].lot_id for j in targets]
    stats = [data.stats[lid] for lid in lot_ids]
    caps = [data.capacity[lid] for lid in lot_ids]
    y = predict(model, x, targets, stats, caps)
    out = _out_path(args.out, "prediction.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    df = pd.DataFrame(y, columns=lot_ids)
    df.insert(0, "step", np.arange(1, len(df) + 1))
    df.to_csv(out, index=False, float_format="%.6f")
    write_manifest(out.parent, "predict", cfg, {"ckpt": args.ckpt, **source}, [out])
    _say(f"predict: {zone.zone_id}, {len(lot_ids)} lots x {len(df)} steps -> {out}")


def cmd_eval(args, cfg: RunConfig) -> None:
    model, meta = _load_model(args.ckpt)
    data = _load_data(args.data)
    features = FeatureConfig.from_dict(meta.get("features", {}))
    wins = pl.make_windows(data, model.config.seq_len, model.config.pred_len, cfg.train.stride, features, cfg.protocol,
                           stride_eval=cfg.train.stride_eval)
    horizons = [h for h in (args.horizons or ()) if h <= model.config.pred_len]
    rep = evaluate_model(model, wins, args.split, horizons)
    out = _out_path(args.out, "metrics.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps({"split": args.split, "metrics": rep.to_dict(), "model": model.config.to_dict(),
                               "features": features.to_dict()}, indent=2))
    write_manifest(out.parent, "eval", cfg, {"ckpt": args.ckpt, "data": args.data}, [out])
    _say(f"eval[{args.split}]: mse={rep.mse:.6f} mae={rep.mae:.6f} mape={rep.mape:.3f}% "
         f"(excluded {rep.n_mape_excluded}) -> {out}")


def _train_cfg(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(**{**cfg.train.to_dict(), "seed": cfg.seed})


def cmd_ablate(args, cfg: RunConfig) -> None:
    data = _load_data(args.data)
    table = run_feature_ablation(data, cfg.model, _train_cfg(cfg), args.configs, args.paradigms, args.variants,
                                 cfg.features.setting)
    stem = _out_path(args.out, "ablation")
    paths = write_table(table, stem)
    write_manifest(stem.parent, "ablate", cfg, {"data": args.data}, list(paths))
    for r in table.where(row="delta"):
        _say(f"ablate {r['paradigm']} {r['config']}: dMSE={r['mse']:+.4f} dMAE={r['mae']:+.4f}")


def cmd_sweep(args, cfg: RunConfig) -> None:
    data = _load_data(args.data)
    table = run_lookback_sweep(data, cfg.model, _train_cfg(cfg), args.lookbacks, cfg.model.pred_len)
    stem = _out_path(args.out, "lookback")
    paths = list(write_table(table, stem))
    svg = plot_lookback(table, stem.with_suffix(".svg")) if not args.no_plot else None
    if svg:
        paths.append(svg)
    write_manifest(stem.parent, "sweep-lookback", cfg, {"data": args.data}, paths)
    for r in table.rows:
        _say(f"L={r['lookback']}: mse={r['mse']:.6f} mae={r['mae']:.6f} mape={r['mape']:.3f}%")


def cmd_compare(args, cfg: RunConfig) -> None:
    data = _load_data(args.data)
    pretrained = None
    inputs = {"data": args.data}
    if args.ckpt:
        model, _ = _load_model(args.ckpt)
        pretrained = model.state_dict()
        inputs["ckpt"] = args.ckpt
    table = run_finetune_comparison(data, cfg.model, _train_cfg(cfg), args.strategies, args.horizons, cfg.mask, pretrained)
    stem = _out_path(args.out, "finetune_comparison")
    paths = write_table(table, stem)
    write_manifest(stem.parent, "compare-finetune", cfg, inputs, list(paths))
    for r in table.rows:
        _say(f"{r['strategy']:>6} 1-{r['horizon']}: mse={r['mse']:.6f} mae={r['mae']:.6f}")


def cmd_describe(args, cfg: RunConfig) -> None:
    if args.ckpt:
        model, _ = _load_model(args.ckpt)
    else:
        model = SSTModel(cfg.model, cfg.seed)
    info = describe(model, args.channels, args.targets)
    text = json.dumps(info, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    _say(text)


# ---------------------------------------------------------------- parser


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _strs(text: str) -> list[str]:
    return [v for v in text.split(",") if v]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sst-parking", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="global seed (overrides config)")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override one config value, e.g. --set model.d_model=32 (repeatable)")
        p.set_defaults(fn=fn)
        return p

    p = add("synth", cmd_synth, "generate a seeded synthetic city (lots, trips, occupancy records)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--n-lots", type=int, dest="synth_n_lots")
    p.add_argument("--n-zones", type=int, dest="synth_n_zones")
    p.add_argument("--days", type=int, dest="synth_days")

    p = add("preprocess", cmd_preprocess, "aggregate occupancy to 10-minute bins and low-pass filter")
    p.add_argument("--occupancy", help="occupancy CSV (lot_id,timestamp,available)")
    p.add_argument("--lots", help="lots CSV; every lot must have records")
    p.add_argument("--out", help="processed availability CSV")
    p.add_argument("--cutoff", type=float, dest="pipeline_cutoff_per_day", help="low-pass cutoff in cycles/day")

    p = add("cluster", cmd_cluster, "build parking cluster zones with K-means")
    p.add_argument("--lots", help="lots CSV (lot_id,x,y,capacity)")
    p.add_argument("--out", help="zones CSV (pcz_id,lot_id); a JSON summary is written alongside")
    p.add_argument("--k", type=int, dest="pipeline_k")
    p.add_argument("--p", type=float, dest="pipeline_p_minkowski", help="Minkowski order")
    p.add_argument("--radius", type=float, dest="pipeline_buffer_radius", help="buffer radius in metres")

    p = add("fuse", cmd_fuse, "count, normalise and integrate multimodal trip demand per zone")
    p.add_argument("--trips", help="trips CSV")
    p.add_argument("--lots", help="lots CSV")
    p.add_argument("--zones", help="zones CSV")
    p.add_argument("--grid", help="processed availability CSV (defines the time grid)")
    p.add_argument("--out", help="demand CSV")

    p = add("dataset", cmd_dataset, "assemble per-zone channels, split 60/10/30 and z-score availability")
    p.add_argument("--grid", help="processed availability CSV")
    p.add_argument("--lots", help="lots CSV")
    p.add_argument("--zones", help="zones CSV")
    p.add_argument("--demand", help="demand CSV")
    p.add_argument("--out", help="dataset directory")

    p = add("pretrain", cmd_pretrain, "masked reconstruction pretraining")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", help="checkpoint path")
    p.add_argument("--epochs", type=int, dest="train_pretrain_epochs")

    p = add("finetune", cmd_finetune, "forecast training with a freezing strategy")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--ckpt", help="pretrained checkpoint, or 'none' to train from scratch")
    p.add_argument("--strategy", choices=[s.value for s in TuneStrategy])
    p.add_argument("--out", help="checkpoint path")
    p.add_argument("--epochs", type=int, dest="train_epochs")

    p = add("predict", cmd_predict, "forecast one window with a trained checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="dataset directory (schema, statistics, capacities)")
    p.add_argument("--zone", help="zone id (default: first zone)")
    p.add_argument("--window", help="CSV with L rows and one column per zone channel (normalised units)")
    p.add_argument("--start", type=int, help="absolute step index of the window when --window is absent")
    p.add_argument("--out", help="prediction CSV (vacant spaces per target lot)")

    p = add("eval", cmd_eval, "score a checkpoint on a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=pl.SPLITS)
    p.add_argument("--horizons", type=_ints, help="comma-separated horizon prefixes")
    p.add_argument("--out", help="metrics JSON")

    p = add("ablate", cmd_ablate, "feature ablation over demand modes and APL/TPL paradigms")
    p.add_argument("--data", required=True)
    p.add_argument("--configs", type=_strs, default=["F", "F-M", "F-B", "F-R", "F-T"])
    p.add_argument("--paradigms", type=_strs, default=["APL", "TPL"])
    p.add_argument("--variants", type=_strs, default=["dual", "channel", "series", "linear"])
    p.add_argument("--out", help="output stem (CSV and JSON)")

    p = add("sweep-lookback", cmd_sweep, "train one model per look-back length")
    p.add_argument("--data", required=True)
    p.add_argument("--lookbacks", type=_ints, default=[36, 72, 144, 288])
    p.add_argument("--out", help="output stem (CSV, JSON, SVG)")
    p.add_argument("--no-plot", action="store_true")

    p = add("compare-finetune", cmd_compare, "compare freezing strategies across forecast horizons")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", help="pretrained checkpoint (default: pretrain inside the run)")
    p.add_argument("--strategies", type=_strs, default=[s.value for s in TuneStrategy])
    p.add_argument("--horizons", type=_ints, default=list(HORIZONS))
    p.add_argument("--out", help="output stem (CSV and JSON)")

    p = add("describe", cmd_describe, "parameter and MAC counts of a model configuration")
    p.add_argument("--ckpt", help="describe a checkpoint instead of the configured model")
    p.add_argument("--channels", type=int, help="channel count C for MAC accounting")
    p.add_argument("--targets", type=int, help="forecast target count M")
    p.add_argument("--out", help="write the JSON here as well")
    return parser


def _overrides(args) -> dict[str, dict]:
    out = parse_set(getattr(args, "set", None))
    for key, value in vars(args).items():
        for section in _SECTIONS:
            prefix = section + "_"
            if key.startswith(prefix) and value is not None:
                out.setdefault(section, {})[key[len(prefix):]] = value
    return out


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        top = {"seed": args.seed}
        if getattr(args, "strategy", None):
            top["strategy"] = args.strategy
        cfg = load_config(args.config, _overrides(args), top)
        args.fn(args, cfg)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ShapeError, pl.PipelineError, dm.DemandError, pcz.ClusterError, EvalError, CheckpointError) as exc:
        print(f"error: schema or shape mismatch: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (ConfigError, MaskError) as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingError as exc:
        print(f"error: training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    return 0


if __name__ == "__main__":
    sys.exit(main())
