import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from sst_parking.pcz import (
    PCZ,
    ClusterError,
    ParkingLot,
    default_k,
    kmeans,
    kmeans_features,
    minkowski_distance,
    pairwise_minkowski,
    point_in_pcz,
    points_in_pcz,
    read_lots_csv,
    read_zones,
    write_lots_csv,
    write_zones,
)

from .oracles import best_partition_cost

points = hnp.arrays(np.float64, st.tuples(st.integers(3, 30), st.just(2)), elements=st.floats(-1e3, 1e3))


@given(points, st.sampled_from([1.0, 1.5, 2.0, 3.0]), st.integers(1, 4), st.integers(0, 50))
def test_inertia_never_increases(x, p, k, seed):
    k = min(k, len(x))
    _, _, trace, _ = kmeans_features(x, k, p, seed=seed)
    assert all(b <= a * (1 + 1e-12) + 1e-9 for a, b in zip(trace, trace[1:]))


@pytest.mark.parametrize("p", [1.0, 2.0])
def test_four_point_fixture_recovers_optimum(p):
    x = np.array([[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.5]])
    labels, _, trace, _ = kmeans_features(x, 2, p, seed=0)
    cost, best = best_partition_cost(x, 2, p)
    assert (labels == labels[0]).tolist() == (best == best[0]).tolist()
    assert trace[-1] == pytest.approx(cost, rel=1e-12)


def test_seeded_determinism():
    rng = np.random.default_rng(0)
    lots = [ParkingLot(f"L{i}", *rng.uniform(0, 5000, 2), 50) for i in range(40)]
    a = kmeans(lots, 6, seed=3)
    b = kmeans(lots, 6, seed=3)
    assert np.array_equal(a.labels, b.labels)
    assert [z.members for z in a.zones] == [z.members for z in b.zones]
    assert sorted(sum((z.members for z in a.zones), [])) == sorted(lot.id for lot in lots)


def test_kmeans_validation():
    lots = [ParkingLot("a", 0, 0, 1), ParkingLot("a", 1, 1, 1)]
    with pytest.raises(ClusterError):
        kmeans(lots, 1)
    with pytest.raises(ClusterError):
        kmeans_features(np.zeros((2, 2)), 3)
    with pytest.raises(ClusterError):
        ParkingLot("x", 0, 0, 0)
    with pytest.raises(ClusterError):
        minkowski_distance((0, 0), (1, 1), 0.5)


def test_default_k():
    assert default_k(168) == 30
    assert default_k(5) == 1
    assert default_k(20) == 4


@given(st.floats(1.0, 4.0), st.integers(0, 1000))
def test_vectorised_membership_matches_scalar(p, seed):
    rng = np.random.default_rng(seed)
    lots = {f"L{i}": ParkingLot(f"L{i}", *rng.uniform(0, 1000, 2), 10) for i in range(4)}
    zone = PCZ("z", list(lots), (0.0, 0.0), 250.0, p)
    pts = rng.uniform(-200, 1200, size=(60, 2))
    pts[0] = np.nan
    got = points_in_pcz(pts, zone, lots)
    want = [False] + [point_in_pcz(pt, zone, lots) for pt in pts[1:]]
    assert got.tolist() == want


def test_pairwise_matches_scalar_distance():
    rng = np.random.default_rng(1)
    x, c = rng.normal(size=(5, 2)), rng.normal(size=(3, 2))
    for p in (1.0, 2.0, 2.5):
        d = pairwise_minkowski(x, c, p)
        for i in range(5):
            for j in range(3):
                assert d[i, j] == pytest.approx(minkowski_distance(x[i], c[j], p), rel=1e-12)


def test_membership_boundary_is_inclusive():
    lots = {"a": ParkingLot("a", 0.0, 0.0, 1)}
    zone = PCZ("z", ["a"], (0.0, 0.0), 500.0, 1.0)
    assert point_in_pcz((300.0, 200.0), zone, lots)
    assert not point_in_pcz((300.0, 200.5), zone, lots)


def test_lot_and_zone_files_roundtrip(tmp_path):
    lots = [ParkingLot("a", 0.1, 2.0, 5), ParkingLot("b", 1e3 / 3, 4.0, 7), ParkingLot("c", 9.0, 9.0, 1)]
    write_lots_csv(tmp_path / "lots.csv", lots)
    assert read_lots_csv(tmp_path / "lots.csv") == lots
    res = kmeans(lots, 2, buffer_radius=123.0, p=2.0)
    write_zones(tmp_path / "pcz.csv", res.zones)
    summary = json.loads((tmp_path / "pcz.json").read_text())
    assert summary["buffer_radius"] == 123.0 and len(summary["zones"]) == 2
    back = read_zones(tmp_path / "pcz.csv", lots)
    assert [(z.id, z.members, z.buffer_radius, z.p_minkowski) for z in back] == [
        (z.id, z.members, z.buffer_radius, z.p_minkowski) for z in res.zones
    ]
    with pytest.raises(ClusterError):
        read_zones(tmp_path / "pcz.csv", lots[:1])
