"""Parking cluster zones: K-means over lots and Minkowski buffer membership."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .tensor import make_rng


class ClusterError(ValueError):
    pass


@dataclass(frozen=True)
class ParkingLot:
    id: str
    x: float
    y: float
    capacity: int

    def __post_init__(self):
        if self.capacity <= 0:
            raise ClusterError(f"lot {self.id}: capacity must be positive")


@dataclass
class PCZ:
    id: str
    members: list[str]
    centroid: tuple[float, float]
    buffer_radius: float = 500.0
    p_minkowski: float = 1.0


@dataclass
class KMeansResult:
    zones: list[PCZ]
    labels: np.ndarray
    inertia_trace: list[float] = field(default_factory=list)
    n_iter: int = 0


def minkowski_distance(a, b, p: float = 1.0) -> float:
    if p < 1:
        raise ClusterError(f"Minkowski order must be >= 1, got {p}")
    dx, dy = abs(a[0] - b[0]), abs(a[1] - b[1])
    return (dx**p + dy**p) ** (1.0 / p)


def pairwise_minkowski(x: np.ndarray, c: np.ndarray, p: float) -> np.ndarray:
    """Distances between rows of ``x`` [n, f] and ``c`` [k, f]."""
    if p < 1:
        raise ClusterError(f"Minkowski order must be >= 1, got {p}")
    diff = np.abs(x[:, None, :] - c[None, :, :])
    if p == 1:
        return diff.sum(-1)
    if p == 2:
        return np.sqrt((diff * diff).sum(-1))
    return (diff**p).sum(-1) ** (1.0 / p)


def default_k(n_lots: int) -> int:
    # 168 lots -> 30 zones in the reference deployment
    return max(1, -(-n_lots * 5 // 28))  # ceil(n / 5.6) in integers


def lot_features(lots: Sequence[ParkingLot], flows: np.ndarray | None = None, flow_weight: float = 0.0) -> np.ndarray:
    """Coordinates, optionally augmented with min-max scaled in/outflow statistics.

    Flow columns are scaled to the coordinate span times ``flow_weight``.
    """
    xy = np.array([[lot.x, lot.y] for lot in lots], dtype=np.float64)
    if flows is None or flow_weight == 0.0:
        return xy
    flows = np.asarray(flows, dtype=np.float64).reshape(len(lots), -1)
    span = float(np.ptp(xy, axis=0).max()) or 1.0
    lo, hi = flows.min(0), flows.max(0)
    scaled = np.where(hi > lo, (flows - lo) / np.where(hi > lo, hi - lo, 1.0), 0.0)
    return np.hstack([xy, flow_weight * span * scaled])


def _kmeanspp(x: np.ndarray, k: int, p: float, rng) -> np.ndarray:
    n = len(x)
    centers = [x[rng.integers(n)]]
    for _ in range(1, k):
        d = pairwise_minkowski(x, np.array(centers), p).min(1) ** 2
        total = d.sum()
        idx = rng.integers(n) if total == 0 else rng.choice(n, p=d / total)
        centers.append(x[idx])
    return np.array(centers, dtype=np.float64)


def _cost(x: np.ndarray, c: np.ndarray, p: float) -> float:
    return float((pairwise_minkowski(x, c[None, :], p)[:, 0] ** 2).sum())


def kmeans_features(x: np.ndarray, k: int, p: float = 1.0, max_iter: int = 100, seed: int = 0) -> tuple[np.ndarray, np.ndarray, list[float], int]:
    """Lloyd iterations under Minkowski distance; returns labels, centers, inertia trace, iterations.

    Inertia is the sum of squared Minkowski distances to the assigned center.
    Centers move to the coordinate-wise mean of their members unless that
    raises the cluster's cost (possible for p != 2), which keeps the trace
    non-increasing.
    """
    n = len(x)
    if not 1 <= k <= n:
        raise ClusterError(f"k={k} must lie in [1, {n}]")
    rng = make_rng(seed, 3)
    centers = _kmeanspp(x, k, p, rng)
    labels = np.full(n, -1)
    trace: list[float] = []
    it = 0
    for it in range(1, max_iter + 1):
        dist = pairwise_minkowski(x, centers, p)
        new_labels = dist.argmin(1)
        trace.append(float((dist[np.arange(n), new_labels] ** 2).sum()))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        spare = dist[np.arange(n), labels].copy()
        for j in range(k):
            pts = x[labels == j]
            if len(pts) == 0:
                # re-seed with the point farthest from its current center
                far = int(spare.argmax())
                spare[far] = -1.0
                centers[j] = x[far]
                continue
            cand = pts.mean(0)
            if _cost(pts, cand, p) <= _cost(pts, centers[j], p):
                centers[j] = cand
    return labels, centers, trace, it


def kmeans(
    lots: Sequence[ParkingLot],
    k: int | None = None,
    p: float = 1.0,
    max_iter: int = 100,
    seed: int = 0,
    buffer_radius: float = 500.0,
    flows: np.ndarray | None = None,
    flow_weight: float = 0.0,
) -> KMeansResult:
    ids = [lot.id for lot in lots]
    if len(set(ids)) != len(ids):
        raise ClusterError("lot ids must be unique")
    k = default_k(len(lots)) if k is None else k
    x = lot_features(lots, flows, flow_weight)
    labels, _, trace, n_iter = kmeans_features(x, k, p, max_iter, seed)
    # zone ids ordered by first member appearance so output is stable
    order = list(dict.fromkeys(labels.tolist()))
    zones = []
    for zi, lab in enumerate(order):
        members = [lots[i] for i in np.flatnonzero(labels == lab)]
        cx = float(np.mean([m.x for m in members]))
        cy = float(np.mean([m.y for m in members]))
        zones.append(PCZ(f"pcz{zi:03d}", [m.id for m in members], (cx, cy), buffer_radius, p))
    relabel = {lab: zi for zi, lab in enumerate(order)}
    return KMeansResult(zones, np.array([relabel[v] for v in labels.tolist()]), trace, n_iter)


def point_in_pcz(pt, zone: PCZ, lots: Mapping[str, ParkingLot]) -> bool:
    """True iff ``pt`` lies inside the union of member-lot Minkowski balls."""
    return any(
        minkowski_distance(pt, (lots[m].x, lots[m].y), zone.p_minkowski) <= zone.buffer_radius
        for m in zone.members
    )


def points_in_pcz(pts: np.ndarray, zone: PCZ, lots: Mapping[str, ParkingLot]) -> np.ndarray:
    """Vectorised :func:`point_in_pcz` over ``pts`` [n, 2]; NaN rows are outside."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    members = np.array([[lots[m].x, lots[m].y] for m in zone.members])
    out = np.zeros(len(pts), dtype=bool)
    ok = ~np.isnan(pts).any(1)
    if ok.any():
        d = pairwise_minkowski(pts[ok], members, zone.p_minkowski)
        out[ok] = d.min(1) <= zone.buffer_radius
    return out


# ---------------------------------------------------------------- files


def read_lots_csv(path) -> list[ParkingLot]:
    with open(path, newline="") as fh:
        return [
            ParkingLot(row["lot_id"], float(row["x"]), float(row["y"]), int(float(row["capacity"])))
            for row in csv.DictReader(fh)
        ]


def write_lots_csv(path, lots: Sequence[ParkingLot]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lot_id", "x", "y", "capacity"])
        for lot in lots:
            w.writerow([lot.id, repr(float(lot.x)), repr(float(lot.y)), lot.capacity])


def write_zones(csv_path, zones: Sequence[PCZ], json_path=None) -> None:
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pcz_id", "lot_id"])
        for z in zones:
            for m in z.members:
                w.writerow([z.id, m])
    json_path = Path(json_path) if json_path else Path(csv_path).with_suffix(".json")
    summary = {
        "zones": [
            {"pcz_id": z.id, "centroid": list(z.centroid), "n_lots": len(z.members)} for z in zones
        ],
        "buffer_radius": zones[0].buffer_radius if zones else None,
        "p_minkowski": zones[0].p_minkowski if zones else None,
    }
    json_path.write_text(json.dumps(summary, indent=2))


def read_zones(csv_path, lots: Sequence[ParkingLot], buffer_radius: float | None = None, p: float | None = None) -> list[PCZ]:
    json_path = Path(csv_path).with_suffix(".json")
    meta = json.loads(json_path.read_text()) if json_path.exists() else {}
    radius = buffer_radius if buffer_radius is not None else meta.get("buffer_radius") or 500.0
    order = p if p is not None else meta.get("p_minkowski") or 1.0
    by_id = {lot.id: lot for lot in lots}
    members: dict[str, list[str]] = {}
    with open(csv_path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["lot_id"] not in by_id:
                raise ClusterError(f"zone file references unknown lot {row['lot_id']}")
            members.setdefault(row["pcz_id"], []).append(row["lot_id"])
    zones = []
    for zid, ms in members.items():
        cx = float(np.mean([by_id[m].x for m in ms]))
        cy = float(np.mean([by_id[m].y for m in ms]))
        zones.append(PCZ(zid, ms, (cx, cy), float(radius), float(order)))
    return zones
