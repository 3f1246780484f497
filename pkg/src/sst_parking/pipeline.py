"""Occupancy preprocessing, dataset assembly, windowing, and the synthetic city generator.

Processing order: aggregate raw occupancy records onto a 10-minute grid,
low-pass them in the Fourier domain, attach zone demand and calendar
channels per parking zone, split chronologically 60/10/30, z-score
availability with training statistics, and cut sliding windows.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .demand import DEMAND_COLUMNS, MODES, DemandSeries, TripTable, broadcast_to_lots, fuse
from .features import FeatureConfig
from .model import CHANNEL_KINDS, MASKABLE_KINDS, TimeFeatureSpec, encode_time_features
from .pcz import PCZ, ParkingLot, kmeans
from .tensor import make_rng

SPLITS = ("train", "val", "test")


class PipelineError(ValueError):
    pass


@dataclass(frozen=True)
class OccupancyRecord:
    lot_id: str
    timestamp: pd.Timestamp
    available: float


# ---------------------------------------------------------------- aggregation


@dataclass
class Grid:
    """Availability on a uniform time grid: ``values[t, lot]``."""

    index: pd.DatetimeIndex
    lot_ids: list[str]
    values: np.ndarray

    @property
    def n_steps(self) -> int:
        return len(self.index)


def _records_frame(records) -> pd.DataFrame:
    if isinstance(records, pd.DataFrame):
        df = records[["lot_id", "timestamp", "available"]].copy()
    else:
        df = pd.DataFrame(
            [(r.lot_id, r.timestamp, r.available) for r in records],
            columns=["lot_id", "timestamp", "available"],
        )
    df["lot_id"] = df["lot_id"].astype(str)
    df["timestamp"] = pd.to_datetime(df["timestamp"])
    return df.dropna()


def aggregate(records, bin_minutes: int = 10, lot_ids: Sequence[str] | None = None) -> Grid:
    """Last observation per (lot, bin); interior gaps forward-filled, leading gaps dropped."""
    df = _records_frame(records)
    if lot_ids is not None:
        empty = sorted(set(lot_ids) - set(df["lot_id"]))
        if empty:
            raise PipelineError(f"lots without any occupancy records: {empty}")
    if df.empty:
        raise PipelineError("no occupancy records")
    freq = f"{bin_minutes}min"
    df["bin"] = df["timestamp"].dt.floor(freq)
    df = df.sort_values(["lot_id", "timestamp"], kind="stable")
    last = df.groupby(["lot_id", "bin"], sort=True)["available"].last()
    wide = last.unstack("lot_id")
    if lot_ids is not None:
        wide = wide[list(lot_ids)]
    start = wide.apply(pd.Series.first_valid_index).max()
    full = pd.date_range(start, wide.index.max(), freq=freq)
    wide = wide.reindex(full).ffill()
    return Grid(pd.DatetimeIndex(full), [str(c) for c in wide.columns], wide.to_numpy(np.float64))


def fourier_denoise(series: np.ndarray, cutoff_per_day: float = 24.0, steps_per_day: float = 144.0) -> np.ndarray:
    """Zero every frequency above ``cutoff_per_day`` cycles/day (along axis 0)."""
    if cutoff_per_day <= 0:
        raise PipelineError("cutoff must be positive")
    x = np.asarray(series, dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        raise PipelineError("series needs at least two samples")
    spec = np.fft.rfft(x, axis=0)
    freqs = np.fft.rfftfreq(n, d=1.0 / steps_per_day)
    keep = freqs <= cutoff_per_day
    spec[~keep] = 0.0
    return np.fft.irfft(spec, n=n, axis=0)


# ---------------------------------------------------------------- normalisation and split


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    flagged: np.ndarray  # zero-variance channels, only centred

    def to_dict(self) -> dict:
        return {k: np.asarray(v).tolist() for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["mean"], float), np.asarray(d["std"], float), np.asarray(d["flagged"], bool))


def normalize_fit(train: np.ndarray) -> NormStats:
    train = np.asarray(train, dtype=np.float64)
    mean = train.mean(axis=0)
    std = train.std(axis=0)
    # exact constancy; the computed std of a constant column can be a rounding residue
    flagged = (np.ptp(train, axis=0) == 0) | (std == 0)
    return NormStats(mean, np.where(flagged, 1.0, std), flagged)


def normalize_apply(x: np.ndarray, stats: NormStats) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) - stats.mean) / stats.std


def denormalize(x: np.ndarray, stats: NormStats) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) * stats.std + stats.mean


def split_ranges(n_steps: int, ratios: Sequence[float] = (0.6, 0.1, 0.3), min_len: int = 0) -> dict[str, tuple[int, int]]:
    """Contiguous chronological ``[start, end)`` blocks for train, val and test."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise PipelineError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    n_train = int(round(n_steps * ratios[0], 9))
    n_val = int(round(n_steps * ratios[1], 9))
    bounds = {"train": (0, n_train), "val": (n_train, n_train + n_val), "test": (n_train + n_val, n_steps)}
    for name, (a, b) in bounds.items():
        if b - a < min_len:
            raise PipelineError(f"{name} split has {b - a} steps, needs at least {min_len} (L+T)")
    return bounds


def n_windows(length: int, seq_len: int, pred_len: int, stride: int = 1) -> int:
    if seq_len < 1 or pred_len < 1 or stride < 1:
        raise PipelineError("L, T and stride must be >= 1")
    span = seq_len + pred_len
    return 0 if length < span else (length - span) // stride + 1


# ---------------------------------------------------------------- dataset assembly


@dataclass(frozen=True)
class Channel:
    name: str
    kind: str
    lot_id: str | None = None

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "lot_id": self.lot_id}


@dataclass
class ZoneData:
    """All channels of one zone over the full time axis; availability already z-scored."""

    zone_id: str
    lot_ids: list[str]
    target_ids: list[str]
    channels: list[Channel]
    grid: np.ndarray  # [n_steps, C]


@dataclass
class ProcessedDataset:
    zones: list[ZoneData]
    index: pd.DatetimeIndex
    splits: dict[str, tuple[int, int]]
    stats: dict[str, tuple[float, float]]  # lot -> (mean, std) of availability on train
    capacity: dict[str, int]
    time_spec: TimeFeatureSpec
    bin_minutes: int = 10
    meta: dict = field(default_factory=dict)

    @property
    def n_steps(self) -> int:
        return len(self.index)

    def zone(self, zone_id: str) -> ZoneData:
        for z in self.zones:
            if z.zone_id == zone_id:
                return z
        raise KeyError(zone_id)


def pick_targets(members: Sequence[str], fraction: float) -> list[str]:
    """First ``ceil(fraction * n)`` members as targets, keeping at least one related lot if n > 1."""
    n = len(members)
    k = max(1, math.ceil(fraction * n))
    if n > 1:
        k = min(k, n - 1)
    return list(members[:k])


def build_dataset(
    grid: Grid,
    zones: Sequence[PCZ],
    demand: DemandSeries,
    lots: Sequence[ParkingLot],
    time_spec: TimeFeatureSpec | None = None,
    ratios: Sequence[float] = (0.6, 0.1, 0.3),
    target_fraction: float = 0.4,
) -> ProcessedDataset:
    time_spec = time_spec or TimeFeatureSpec()
    if demand.n_steps != grid.n_steps:
        raise PipelineError(f"demand has {demand.n_steps} steps but availability grid has {grid.n_steps}")
    splits = split_ranges(grid.n_steps, ratios)
    tr0, tr1 = splits["train"]
    col = {lid: i for i, lid in enumerate(grid.lot_ids)}
    per_lot = broadcast_to_lots(demand, zones, grid.lot_ids)
    tfeat = encode_time_features(grid.index, time_spec, _minutes(grid.index))
    stats: dict[str, tuple[float, float]] = {}
    out = []
    for zone in zones:
        channels: list[Channel] = []
        cols: list[np.ndarray] = []
        for lid in zone.members:
            y = grid.values[:, col[lid]]
            st = normalize_fit(y[tr0:tr1, None])
            stats[lid] = (float(st.mean[0]), float(st.std[0]))
            channels.append(Channel(f"{lid}.availability", "availability", lid))
            cols.append(normalize_apply(y[:, None], st)[:, 0])
            for j, kind in enumerate(DEMAND_COLUMNS):
                channels.append(Channel(f"{lid}.{kind}", kind, lid))
                cols.append(per_lot[lid][:, j])
        for j, name in enumerate(time_spec.channel_names()):
            channels.append(Channel(name, "time"))
            cols.append(tfeat[:, j])
        out.append(
            ZoneData(zone.id, list(zone.members), pick_targets(zone.members, target_fraction), channels, np.column_stack(cols))
        )
    capacity = {lot.id: lot.capacity for lot in lots}
    return ProcessedDataset(out, grid.index, splits, stats, capacity, time_spec, _minutes(grid.index))


def _minutes(index: pd.DatetimeIndex) -> int:
    if len(index) < 2:
        return 10
    return int((index[1] - index[0]).total_seconds() // 60)


def select_features(zone: ZoneData, features: FeatureConfig) -> tuple[list[Channel], np.ndarray, list[int]]:
    """Channel subset of a zone under ``features``; integrated demand recomputed over enabled modes.

    Returns the channels, their ``[n_steps, C']`` grid and the target channel indices.
    """
    t_hist, t_dem, r_hist, r_dem = features.blocks
    targets = set(zone.target_ids)
    lots = [lid for lid in zone.lot_ids if lid in targets or features.paradigm == "APL"]
    by_name = {c.name: i for i, c in enumerate(zone.channels)}
    picked: list[int] = []
    for lid in lots:
        is_t = lid in targets
        if t_hist if is_t else r_hist:
            picked.append(by_name[f"{lid}.availability"])
        if t_dem if is_t else r_dem:
            picked += [by_name[f"{lid}.{m}"] for m in features.modes]
            picked.append(by_name[f"{lid}.integrated"])
    picked += [i for i, c in enumerate(zone.channels) if c.kind == "time"]
    chans = [zone.channels[i] for i in picked]
    grid = zone.grid[:, picked].copy()
    for j, c in enumerate(chans):
        if c.kind == "integrated":
            parts = [by_name[f"{c.lot_id}.{m}"] for m in features.modes]
            grid[:, j] = zone.grid[:, parts].sum(axis=1) if parts else 0.0
    tgt = [j for j, c in enumerate(chans) if c.kind == "availability" and c.lot_id in targets]
    return chans, grid, tgt


# ---------------------------------------------------------------- windows


@dataclass
class ZoneWindows:
    zone_id: str
    channels: list[Channel]
    targets: list[int]
    grid: np.ndarray  # [split_len, C], normalised
    offset: int  # absolute step index of grid[0]
    seq_len: int
    pred_len: int
    stride: int = 1

    def __post_init__(self):
        self.starts = np.arange(0, n_windows(len(self.grid), self.seq_len, self.pred_len, self.stride) * self.stride, self.stride)
        self.kinds = np.array([CHANNEL_KINDS.index(c.kind) for c in self.channels])
        self._xv = np.lib.stride_tricks.sliding_window_view(self.grid, self.seq_len, axis=0)

    def __len__(self) -> int:
        return len(self.starts)

    @property
    def n_channels(self) -> int:
        return self.grid.shape[1]

    @property
    def maskable(self) -> np.ndarray:
        return self.kinds < len(MASKABLE_KINDS)

    def x(self, idx) -> np.ndarray:
        s = self.starts[np.asarray(idx)]
        return np.ascontiguousarray(self._xv[s].transpose(0, 2, 1))

    def y(self, idx) -> np.ndarray:
        s = self.starts[np.asarray(idx)]
        rows = s[:, None] + self.seq_len + np.arange(self.pred_len)[None, :]
        return self.grid[rows][:, :, self.targets]

    def window_bounds(self) -> np.ndarray:
        """Absolute ``[x_start, x_end, y_start, y_end)`` step indices per window."""
        s = self.starts + self.offset
        return np.stack([s, s + self.seq_len, s + self.seq_len, s + self.seq_len + self.pred_len], axis=1)


@dataclass
class WindowedDataset:
    splits: dict[str, list[ZoneWindows]]
    seq_len: int
    pred_len: int
    features: FeatureConfig
    source: ProcessedDataset | None = None

    def n_windows(self, split: str) -> int:
        return sum(len(z) for z in self.splits[split])

    def schema(self) -> dict:
        zones = {}
        for zw in self.splits["train"] + self.splits["test"]:
            zones[zw.zone_id] = {
                "channels": [c.to_dict() for c in zw.channels],
                "targets": zw.targets,
            }
        return {"seq_len": self.seq_len, "pred_len": self.pred_len, "features": self.features.to_dict(), "zones": zones}


def make_windows(
    data: ProcessedDataset,
    seq_len: int,
    pred_len: int,
    stride: int = 1,
    features: FeatureConfig | None = None,
    protocol: str = "temporal",
    test_zone_fraction: float = 0.3,
    stride_eval: int | None = None,
) -> WindowedDataset:
    """Sliding windows inside each chronological split.

    ``protocol="spatial"`` holds out the last zones (by order) for testing and
    trains on the others, on top of the chronological split.
    """
    features = features or FeatureConfig()
    span = seq_len + pred_len
    for name, (a, b) in data.splits.items():
        if b - a < span:
            raise PipelineError(f"{name} split has {b - a} steps, shorter than L+T={span}")
    if protocol not in ("temporal", "spatial"):
        raise PipelineError(f"unknown protocol {protocol!r}")
    zone_ids = [z.zone_id for z in data.zones]
    n_test_z = max(1, round(test_zone_fraction * len(zone_ids))) if protocol == "spatial" else 0
    test_zones = set(zone_ids[len(zone_ids) - n_test_z :]) if n_test_z else set(zone_ids)
    train_zones = set(zone_ids) - test_zones if n_test_z else set(zone_ids)
    if not train_zones:
        raise PipelineError("spatial protocol needs at least two zones")
    out: dict[str, list[ZoneWindows]] = {s: [] for s in SPLITS}
    for zone in data.zones:
        chans, grid, tgt = select_features(zone, features)
        for split in SPLITS:
            keep = zone.zone_id in (test_zones if split == "test" else train_zones)
            if not keep:
                continue
            a, b = data.splits[split]
            st = stride if split == "train" or stride_eval is None else stride_eval
            out[split].append(ZoneWindows(zone.zone_id, chans, tgt, grid[a:b], a, seq_len, pred_len, st))
    return WindowedDataset(out, seq_len, pred_len, features, data)


# ---------------------------------------------------------------- synthetic city


@dataclass
class SynthConfig:
    n_lots: int = 20
    n_zones: int = 4
    days: int = 30
    start: str = "2021-09-01 00:00:00"
    bin_minutes: int = 10
    daily_amplitude: float = 1.0
    coupling: dict[str, float] = field(
        default_factory=lambda: {"ridehailing": 1.0, "taxi": 0.6, "bus": 0.15, "metro": 0.15}
    )
    trip_rate: dict[str, float] = field(
        default_factory=lambda: {"ridehailing": 6.0, "taxi": 5.0, "bus": 4.0, "metro": 4.0}
    )
    demand_timescale: float = 144.0  # steps
    lag_range: tuple[int, int] = (36, 144)
    noise: float = 0.03
    zone_spacing: float = 3000.0
    lot_spread: float = 150.0
    seed: int = 0

    def __post_init__(self):
        if any(w < 0 for w in self.coupling.values()):
            raise PipelineError("coupling weights must be non-negative")
        if set(self.coupling) != set(MODES) or set(self.trip_rate) != set(MODES):
            raise PipelineError(f"coupling and trip_rate need one entry per mode {MODES}")
        if self.n_zones < 1 or self.n_lots < self.n_zones:
            raise PipelineError("need n_lots >= n_zones >= 1")

    @property
    def steps_per_day(self) -> int:
        return 24 * 60 // self.bin_minutes


@dataclass
class SynthData:
    config: SynthConfig
    lots: list[ParkingLot]
    zone_of: dict[str, int]  # generating zone per lot
    trips: TripTable
    occupancy: pd.DataFrame  # lot_id, timestamp, available
    index: pd.DatetimeIndex
    availability: np.ndarray  # [t, lot] clean generated availability
    zone_occupancy: np.ndarray  # [t, zone] mean occupancy fraction


def _ou(rng, n: int, tau: float, size=()) -> np.ndarray:
    rho = math.exp(-1.0 / tau)
    eps = rng.normal(size=(n, *np.atleast_1d(size))) if size else rng.normal(size=n)
    out = np.empty_like(eps)
    out[0] = eps[0]
    scale = math.sqrt(1.0 - rho * rho)
    for t in range(1, n):
        out[t] = rho * out[t - 1] + scale * eps[t]
    return out


def daily_profile(index: pd.DatetimeIndex) -> np.ndarray:
    """Standardised weekday commute-shaped profile, damped on weekends."""
    h = index.hour.to_numpy() + index.minute.to_numpy() / 60.0
    prof = np.exp(-(((h - 10.0) / 2.5) ** 2)) + 0.8 * np.exp(-(((h - 15.5) / 3.0) ** 2))
    prof = np.where(index.dayofweek.to_numpy() >= 5, 0.6 * prof, prof)
    return (prof - prof.mean()) / prof.std()


def synth_generate(cfg: SynthConfig) -> SynthData:
    """Seeded synthetic lots, multimodal trips and raw occupancy records.

    Each zone has one latent demand driver per mode (independent slow
    processes).  Lot occupancy follows a lagged mix of the drivers weighted by
    ``coupling``; each mode's trip counts follow its own driver, so a mode's
    predictive value for occupancy scales with its coupling weight.
    """
    rng = make_rng(cfg.seed, 10)
    spd = cfg.steps_per_day
    n = cfg.days * spd
    lag_hi = cfg.lag_range[1]
    burn = lag_hi + 1
    index = pd.date_range(cfg.start, periods=n, freq=f"{cfg.bin_minutes}min")
    full_index = pd.date_range(index[0] - burn * index.freq, periods=n + burn, freq=index.freq)

    # geometry
    side = math.ceil(math.sqrt(cfg.n_zones))
    centers = np.array(
        [((i % side) * cfg.zone_spacing, (i // side) * cfg.zone_spacing) for i in range(cfg.n_zones)], float
    )
    centers += rng.normal(scale=0.1 * cfg.zone_spacing, size=centers.shape)
    zone_idx = np.arange(cfg.n_lots) % cfg.n_zones
    xy = centers[zone_idx] + rng.normal(scale=cfg.lot_spread, size=(cfg.n_lots, 2))
    caps = rng.integers(60, 300, size=cfg.n_lots)
    lots = [ParkingLot(f"L{i:03d}", float(xy[i, 0]), float(xy[i, 1]), int(caps[i])) for i in range(cfg.n_lots)]

    # latent drivers [t, zone, mode]
    daily = daily_profile(full_index)
    u = _ou(rng, n + burn, cfg.demand_timescale, (cfg.n_zones, len(MODES)))
    w = np.array([cfg.coupling[m] for m in MODES])
    wn = math.sqrt(cfg.daily_amplitude**2 + float((w * w).sum())) or 1.0
    drive = (cfg.daily_amplitude * daily[:, None] + (u * w).sum(-1)) / wn  # [t, zone], ~unit variance

    # occupancy
    lags = rng.integers(cfg.lag_range[0], lag_hi + 1, size=cfg.n_lots)
    gains = rng.uniform(0.15, 0.25, size=cfg.n_lots)
    base = rng.uniform(0.4, 0.6, size=cfg.n_lots)
    lot_noise = cfg.noise * _ou(rng, n, 12.0, (cfg.n_lots,)) + 0.5 * cfg.noise * rng.normal(size=(n, cfg.n_lots))
    occ = np.empty((n, cfg.n_lots))
    for i in range(cfg.n_lots):
        lagged = drive[burn - lags[i] : burn - lags[i] + n, zone_idx[i]]
        occ[:, i] = base[i] + gains[i] * lagged + lot_noise[:, i]
    occ = np.clip(occ, 0.02, 0.98)
    avail = np.clip(np.rint(caps * (1.0 - occ)), 0, caps).astype(float)
    zone_occ = np.stack([occ[:, zone_idx == z].mean(1) for z in range(cfg.n_zones)], axis=1)

    trips = _synth_trips(cfg, rng, index, daily[burn:], u[burn:], xy, zone_idx, centers)
    occupancy = _synth_records(cfg, rng, index, lots, avail)
    return SynthData(cfg, lots, {lot.id: int(zone_idx[i]) for i, lot in enumerate(lots)}, trips, occupancy, index, avail, zone_occ)


def _synth_trips(cfg, rng, index, daily, u, xy, zone_idx, centers) -> TripTable:
    n = len(index)
    lo = centers.min(0) - 1500.0
    hi = centers.max(0) + 1500.0
    bin_ns = np.int64(cfg.bin_minutes * 60 * 10**9)
    t0 = index[0].value
    modes, oxy, dxy, ts = [], [], [], []
    for z in range(cfg.n_zones):
        members = np.flatnonzero(zone_idx == z)
        for mi, mode in enumerate(MODES):
            lam = cfg.trip_rate[mode] * np.exp(0.5 * (0.5 * daily + u[:, z, mi]))
            k = rng.poisson(lam)
            total = int(k.sum())
            bins = np.repeat(np.arange(n), k)
            at_zone = xy[rng.choice(members, size=total)] + rng.normal(scale=120.0, size=(total, 2))
            other = rng.uniform(lo, hi, size=(total, 2))
            if mode == "bus":
                o, d = at_zone, np.full((total, 2), np.nan)
            else:
                flip = rng.random(total) < 0.5
                o = np.where(flip[:, None], other, at_zone)
                d = np.where(flip[:, None], at_zone, other)
            stamp = t0 + bins.astype(np.int64) * bin_ns + rng.integers(0, bin_ns, size=total)
            modes.append(np.full(total, mi))
            oxy.append(o)
            dxy.append(d)
            ts.append(stamp)
    stamp = np.concatenate(ts)
    order = np.argsort(stamp, kind="stable")
    return TripTable(
        np.concatenate(modes)[order].astype(np.int64),
        np.concatenate(oxy)[order],
        np.concatenate(dxy)[order],
        stamp[order].astype("datetime64[ns]"),
    )


def _synth_records(cfg, rng, index, lots, avail) -> pd.DataFrame:
    n, m = avail.shape
    bin_ns = cfg.bin_minutes * 60 * 10**9
    base = index.asi8[:, None] + np.zeros((1, m), dtype=np.int64)
    offs = rng.integers(bin_ns // 2, bin_ns, size=(n, m))
    keep = rng.random((n, m)) >= 0.01
    keep[0] = True
    lot_ids = np.array([lot.id for lot in lots])
    recs = pd.DataFrame(
        {
            "lot_id": np.broadcast_to(lot_ids, (n, m))[keep],
            "timestamp": pd.to_datetime((base + offs)[keep]),
            "available": avail[keep],
        }
    )
    # stale earlier reading in ~1% of bins; the later one must win
    dup = rng.random((n, m)) < 0.01
    dup &= keep
    stale = pd.DataFrame(
        {
            "lot_id": np.broadcast_to(lot_ids, (n, m))[dup],
            "timestamp": pd.to_datetime((base + rng.integers(0, bin_ns // 2, size=(n, m)))[dup]),
            "available": np.clip(avail[dup] + rng.integers(-5, 6, size=int(dup.sum())), 0, None),
        }
    )
    return pd.concat([recs, stale]).sort_values("timestamp", kind="stable").reset_index(drop=True)


# ---------------------------------------------------------------- end-to-end helpers


@dataclass
class PipelineConfig:
    bin_minutes: int = 10
    cutoff_per_day: float = 24.0
    k: int | None = None
    p_minkowski: float = 1.0
    buffer_radius: float = 500.0
    target_fraction: float = 0.4
    ratios: tuple[float, float, float] = (0.6, 0.1, 0.3)
    time_features: tuple[str, ...] = ("hour", "dayofweek")
    seed: int = 0


def preprocess(records, bin_minutes: int = 10, cutoff_per_day: float = 24.0, lot_ids=None) -> Grid:
    grid = aggregate(records, bin_minutes, lot_ids)
    spd = 24 * 60 / bin_minutes
    return Grid(grid.index, grid.lot_ids, fourier_denoise(grid.values, cutoff_per_day, spd))


def prepare_synthetic(synth: SynthConfig | SynthData, cfg: PipelineConfig | None = None) -> ProcessedDataset:
    """synth -> preprocess -> cluster -> fuse -> dataset, all in memory."""
    cfg = cfg or PipelineConfig()
    data = synth if isinstance(synth, SynthData) else synth_generate(synth)
    grid = preprocess(data.occupancy, cfg.bin_minutes, cfg.cutoff_per_day, [lot.id for lot in data.lots])
    k = cfg.k if cfg.k is not None else data.config.n_zones
    zones = kmeans(data.lots, k, cfg.p_minkowski, seed=cfg.seed, buffer_radius=cfg.buffer_radius).zones
    demand = fuse(data.trips, zones, data.lots, grid.index[0], grid.n_steps, cfg.bin_minutes)
    return build_dataset(
        grid, zones, demand, data.lots, TimeFeatureSpec(cfg.time_features), cfg.ratios, cfg.target_fraction
    )


# ---------------------------------------------------------------- files


def read_occupancy_csv(path) -> pd.DataFrame:
    df = pd.read_csv(path, dtype={"lot_id": str})
    return _records_frame(df)


def write_occupancy_csv(path, df: pd.DataFrame) -> None:
    out = df[["lot_id", "timestamp", "available"]].copy()
    out["timestamp"] = pd.to_datetime(out["timestamp"]).dt.strftime("%Y-%m-%d %H:%M:%S")
    out.to_csv(path, index=False, float_format="%.17g")


def grid_to_frame(grid: Grid) -> pd.DataFrame:
    wide = pd.DataFrame(grid.values, index=grid.index, columns=grid.lot_ids)
    long = wide.stack().rename("available").reset_index()
    long.columns = ["timestamp", "lot_id", "available"]
    return long[["lot_id", "timestamp", "available"]].sort_values(["lot_id", "timestamp"], kind="stable")


def frame_to_grid(df: pd.DataFrame) -> Grid:
    wide = df.pivot(index="timestamp", columns="lot_id", values="available").sort_index()
    if wide.isna().any().any():
        raise PipelineError("processed availability grid has missing bins")
    return Grid(pd.DatetimeIndex(wide.index), [str(c) for c in wide.columns], wide.to_numpy(np.float64))


def _write_arrays(path: Path, arrays: Sequence[np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(arrays)))
        for a in arrays:
            a = np.ascontiguousarray(a, dtype="<f8")
            fh.write(struct.pack("<I", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}Q", *a.shape))
            fh.write(a.tobytes())


def _read_arrays(path: Path) -> list[np.ndarray]:
    raw = path.read_bytes()
    (count,) = struct.unpack_from("<I", raw, 0)
    pos, out = 4, []
    for _ in range(count):
        (ndim,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        dims = struct.unpack_from(f"<{ndim}Q", raw, pos)
        pos += 8 * ndim
        size = int(np.prod(dims, dtype=np.int64))
        out.append(np.frombuffer(raw, "<f8", size, pos).astype(np.float64).reshape(dims))
        pos += 8 * size
    return out


def save_dataset(data: ProcessedDataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    schema = {
        "format_version": 1,
        "start": str(data.index[0]),
        "n_steps": data.n_steps,
        "bin_minutes": data.bin_minutes,
        "splits": {k: list(v) for k, v in data.splits.items()},
        "stats": {k: list(v) for k, v in data.stats.items()},
        "capacity": data.capacity,
        "time_features": list(data.time_spec.features),
        "zones": [
            {
                "zone_id": z.zone_id,
                "lot_ids": z.lot_ids,
                "target_ids": z.target_ids,
                "channels": [c.to_dict() for c in z.channels],
            }
            for z in data.zones
        ],
        "meta": data.meta,
    }
    (out / "schema.json").write_text(json.dumps(schema, indent=2))
    for split, (a, b) in data.splits.items():
        _write_arrays(out / f"{split}.bin", [z.grid[a:b] for z in data.zones])
    return out


def load_dataset(path) -> ProcessedDataset:
    path = Path(path)
    if not (path / "schema.json").exists():
        raise PipelineError(f"{path} is not a processed dataset directory (schema.json missing)")
    schema = json.loads((path / "schema.json").read_text())
    parts = {s: _read_arrays(path / f"{s}.bin") for s in SPLITS}
    zones = []
    for i, z in enumerate(schema["zones"]):
        grid = np.concatenate([parts[s][i] for s in SPLITS], axis=0)
        chans = [Channel(c["name"], c["kind"], c["lot_id"]) for c in z["channels"]]
        zones.append(ZoneData(z["zone_id"], z["lot_ids"], z["target_ids"], chans, grid))
    index = pd.date_range(schema["start"], periods=schema["n_steps"], freq=f"{schema['bin_minutes']}min")
    return ProcessedDataset(
        zones,
        index,
        {k: tuple(v) for k, v in schema["splits"].items()},
        {k: tuple(v) for k, v in schema["stats"].items()},
        {k: int(v) for k, v in schema["capacity"].items()},
        TimeFeatureSpec(tuple(schema["time_features"])),
        schema["bin_minutes"],
        schema.get("meta", {}),
    )


def zone_batches(windows: Sequence[ZoneWindows], batch_size: int, rng=None, max_batches: int | None = None):
    """Yield ``(zone_windows, window_indices)``; each batch comes from a single zone.

    With ``rng`` the window order inside each zone and the batch order are
    shuffled; otherwise batches come out in storage order.
    """
    if batch_size < 1:
        raise PipelineError("batch_size must be >= 1")
    batches = []
    for zw in windows:
        order = rng.permutation(len(zw)) if rng is not None else np.arange(len(zw))
        for i in range(0, len(order), batch_size):
            batches.append((zw, order[i : i + batch_size]))
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    if max_batches is not None:
        batches = batches[:max_batches]
    yield from batches
