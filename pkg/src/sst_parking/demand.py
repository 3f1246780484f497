"""Multimodal trip demand per parking cluster zone.

Trips are assigned to zones (bus by origin only; other modes by origin, else
destination, independently per zone), counted per time bin, min-max
normalised per (mode, zone) along time and summed across modes.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .pcz import PCZ, ParkingLot, points_in_pcz

MODES = ("bus", "metro", "taxi", "ridehailing")
DEMAND_COLUMNS = (*MODES, "integrated")


class DemandError(ValueError):
    pass


@dataclass(frozen=True)
class TripRecord:
    mode: str
    origin: tuple[float, float]
    destination: tuple[float, float] | None
    timestamp: pd.Timestamp


@dataclass
class TripTable:
    """Columnar trips: mode codes index :data:`MODES`; missing destinations are NaN."""

    mode: np.ndarray
    origin: np.ndarray
    destination: np.ndarray
    timestamp: np.ndarray  # datetime64[ns]

    def __len__(self) -> int:
        return len(self.mode)

    @classmethod
    def from_records(cls, records: Sequence[TripRecord]) -> "TripTable":
        mode = np.array([MODES.index(r.mode) for r in records], dtype=np.int64)
        origin = np.array([r.origin for r in records], dtype=np.float64).reshape(-1, 2)
        dest = np.array(
            [r.destination if r.destination is not None else (np.nan, np.nan) for r in records],
            dtype=np.float64,
        ).reshape(-1, 2)
        ts = pd.DatetimeIndex([r.timestamp for r in records]).to_numpy()
        return cls(mode, origin, dest, ts)

    def records(self) -> list[TripRecord]:
        out = []
        for i in range(len(self)):
            d = self.destination[i]
            out.append(
                TripRecord(
                    MODES[self.mode[i]],
                    (float(self.origin[i, 0]), float(self.origin[i, 1])),
                    None if np.isnan(d).any() else (float(d[0]), float(d[1])),
                    pd.Timestamp(self.timestamp[i]),
                )
            )
        return out


@dataclass
class DemandSeries:
    zone_ids: list[str]
    start: pd.Timestamp
    bin_minutes: int
    counts: np.ndarray  # [mode, zone, t] int64
    norm: np.ndarray  # [mode, zone, t] in [0, 1]
    integrated: np.ndarray  # [zone, t] in [0, 4]
    n_rejected: int = 0

    @property
    def n_steps(self) -> int:
        return self.counts.shape[-1]


def time_bins(timestamps: np.ndarray, start, n_steps: int, bin_minutes: int) -> np.ndarray:
    """Bin index per timestamp, -1 outside ``[start, start + n_steps bins)``."""
    start = np.datetime64(pd.Timestamp(start).to_datetime64(), "ns")
    width = np.timedelta64(int(bin_minutes * 60), "s").astype("timedelta64[ns]")
    delta = np.asarray(timestamps, dtype="datetime64[ns]") - start
    idx = np.floor_divide(delta.astype(np.int64), width.astype(np.int64))
    return np.where((delta >= np.timedelta64(0, "ns")) & (idx < n_steps), idx, -1)


def valid_trip_mask(trips: TripTable) -> np.ndarray:
    """Non-bus trips without a destination are rejected."""
    no_dest = np.isnan(trips.destination).any(1)
    return ~(no_dest & (trips.mode != MODES.index("bus")))


def count_trips(
    trips: TripTable,
    zones: Sequence[PCZ],
    lots: Mapping[str, ParkingLot],
    start,
    n_steps: int,
    bin_minutes: int = 10,
) -> tuple[np.ndarray, int]:
    """Counts ``[mode, zone, t]`` plus the number of rejected records."""
    ok = valid_trip_mask(trips)
    n_rejected = int((~ok).sum())
    t = time_bins(trips.timestamp, start, n_steps, bin_minutes)
    ok &= t >= 0
    is_bus = trips.mode == MODES.index("bus")
    counts = np.zeros((len(MODES), len(zones), n_steps), dtype=np.int64)
    for zi, zone in enumerate(zones):
        o_in = points_in_pcz(trips.origin, zone, lots)
        d_in = points_in_pcz(trips.destination, zone, lots)
        # origin, else destination: one increment per zone at most
        hit = ok & np.where(is_bus, o_in, o_in | d_in)
        for mi in range(len(MODES)):
            sel = hit & (trips.mode == mi)
            counts[mi, zi] = np.bincount(t[sel], minlength=n_steps)
    return counts, n_rejected


def normalize_counts(counts: np.ndarray) -> np.ndarray:
    """Min-max along the last (time) axis; constant series map to zeros."""
    counts = np.asarray(counts, dtype=np.float64)
    lo = counts.min(axis=-1, keepdims=True)
    span = counts.max(axis=-1, keepdims=True) - lo
    return np.where(span > 0, (counts - lo) / np.where(span > 0, span, 1.0), 0.0)


def integrate(norm, modes: Sequence[str] = MODES) -> np.ndarray:
    """Sum normalised demand over ``modes``.

    ``norm`` is either an array stacked in :data:`MODES` order or a mapping
    from mode name to array; absent modes count as zeros (with a warning).
    """
    if isinstance(norm, Mapping):
        present = [m for m in modes if m in norm]
        missing = [m for m in modes if m not in norm]
        if missing:
            warnings.warn(f"missing demand modes treated as zeros: {missing}", stacklevel=2)
        if not present:
            raise DemandError("no demand modes to integrate")
        return np.sum([np.asarray(norm[m], dtype=np.float64) for m in present], axis=0)
    norm = np.asarray(norm, dtype=np.float64)
    return norm[[MODES.index(m) for m in modes]].sum(axis=0)


def fuse(
    trips: TripTable,
    zones: Sequence[PCZ],
    lots: Sequence[ParkingLot] | Mapping[str, ParkingLot],
    start,
    n_steps: int,
    bin_minutes: int = 10,
) -> DemandSeries:
    lot_map = lots if isinstance(lots, Mapping) else {lot.id: lot for lot in lots}
    counts, rejected = count_trips(trips, zones, lot_map, start, n_steps, bin_minutes)
    norm = normalize_counts(counts)
    return DemandSeries(
        [z.id for z in zones], pd.Timestamp(start), bin_minutes, counts, norm, integrate(norm), rejected
    )


def broadcast_to_lots(series: DemandSeries, zones: Sequence[PCZ], lot_ids: Sequence[str] | None = None) -> dict[str, np.ndarray]:
    """Per-lot ``[t, 5]`` demand channels (four modes, then integrated) inherited from the lot's zone."""
    zi = {zid: i for i, zid in enumerate(series.zone_ids)}
    out: dict[str, np.ndarray] = {}
    for zone in zones:
        i = zi[zone.id]
        block = np.column_stack([*series.norm[:, i, :], series.integrated[i]])
        for m in zone.members:
            out[m] = block
    if lot_ids is not None:
        missing = [lid for lid in lot_ids if lid not in out]
        if missing:
            raise DemandError(f"lots without a zone: {missing}")
    return out


# ---------------------------------------------------------------- files


def read_trips_csv(path) -> TripTable:
    df = pd.read_csv(path, dtype={"mode": str})
    bad = ~df["mode"].isin(MODES)
    if bad.any():
        raise DemandError(f"unknown trip modes: {sorted(df.loc[bad, 'mode'].unique())}")
    return TripTable(
        df["mode"].map(MODES.index).to_numpy(np.int64),
        df[["o_x", "o_y"]].to_numpy(np.float64),
        df[["d_x", "d_y"]].to_numpy(np.float64),
        pd.to_datetime(df["timestamp"]).to_numpy(),
    )


def write_trips_csv(path, trips: TripTable) -> None:
    df = pd.DataFrame(
        {
            "mode": np.array(MODES)[trips.mode],
            "o_x": trips.origin[:, 0],
            "o_y": trips.origin[:, 1],
            "d_x": trips.destination[:, 0],
            "d_y": trips.destination[:, 1],
            "timestamp": pd.DatetimeIndex(trips.timestamp).strftime("%Y-%m-%d %H:%M:%S"),
        }
    )
    df.to_csv(path, index=False, float_format="%.3f")


def write_demand_csv(path, series: DemandSeries) -> None:
    ts = pd.date_range(series.start, periods=series.n_steps, freq=f"{series.bin_minutes}min")
    frames = []
    for i, zid in enumerate(series.zone_ids):
        f = pd.DataFrame({"pcz_id": zid, "t": ts.strftime("%Y-%m-%d %H:%M:%S")})
        for mi, m in enumerate(MODES):
            f[m] = series.norm[mi, i]
        f["integrated"] = series.integrated[i]
        frames.append(f)
    pd.concat(frames).to_csv(path, index=False, float_format="%.17g")


def read_demand_csv(path) -> tuple[list[str], pd.DatetimeIndex, np.ndarray]:
    """Zone ids, time index and ``[zone, t, 5]`` demand channels."""
    df = pd.read_csv(path, dtype={"pcz_id": str})
    zone_ids = list(dict.fromkeys(df["pcz_id"]))
    ts = pd.DatetimeIndex(pd.to_datetime(df.loc[df["pcz_id"] == zone_ids[0], "t"]))
    arr = np.stack([df.loc[df["pcz_id"] == z, list(DEMAND_COLUMNS)].to_numpy(np.float64) for z in zone_ids])
    return zone_ids, ts, arr
