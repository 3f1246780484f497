"""Independent reference implementations used as test oracles."""

from __future__ import annotations

import itertools
import math

import numpy as np

from sst_parking import tensor as tn
from sst_parking.finetune import forecast_loss
from sst_parking.tensor import Tensor


def model_gradient_errors(model, x, y, targets, h=1e-5):
    """Relative error per parameter between the tape gradient and central differences.

    Uses ``||g_a - g_n|| / max(||g_a|| + ||g_n||, 1e-12)`` per tensor;
    parameters without a gradient path are compared against zeros.
    """
    model.eval()
    for p in model.parameters():
        p.grad = None
    loss = forecast_loss(model.forecast(Tensor(x), targets), y)
    tn.backward(loss)
    errors = {}
    for name, p in model.named_parameters():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            with tn.no_grad():
                up = forecast_loss(model.forecast(Tensor(x), targets), y).item()
            flat[i] = old - h
            with tn.no_grad():
                down = forecast_loss(model.forecast(Tensor(x), targets), y).item()
            flat[i] = old
            numeric.reshape(-1)[i] = (up - down) / (2 * h)
        denom = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
        errors[name] = float(np.linalg.norm(analytic - numeric) / denom)
    return errors


def brute_force_counts(trips, zones, lots, start, n_steps, bin_minutes=10):
    """Per-trip, per-zone scalar loop over the assignment rules."""
    from sst_parking.demand import MODES

    start = np.datetime64(start, "ns")
    width = np.timedelta64(bin_minutes * 60 * 10**9, "ns")
    counts = np.zeros((len(MODES), len(zones), n_steps), dtype=np.int64)
    rejected = 0
    for i in range(len(trips.mode)):
        mode = MODES[int(trips.mode[i])]
        o = trips.origin[i]
        d = trips.destination[i]
        has_d = not (math.isnan(d[0]) or math.isnan(d[1]))
        if mode != "bus" and not has_d:
            rejected += 1
            continue
        dt = np.datetime64(trips.timestamp[i], "ns") - start
        if dt < np.timedelta64(0, "ns"):
            continue
        t = int(dt // width)
        if t >= n_steps:
            continue
        for zi, z in enumerate(zones):

            def inside(pt):
                for m in z.members:
                    lot = lots[m]
                    dist = (abs(pt[0] - lot.x) ** z.p_minkowski + abs(pt[1] - lot.y) ** z.p_minkowski) ** (1 / z.p_minkowski)
                    if dist <= z.buffer_radius:
                        return True
                return False

            if mode == "bus":
                hit = inside(o)
            else:
                hit = inside(o) or inside(d)
            if hit:
                counts[MODES.index(mode), zi, t] += 1
    return counts, rejected


def brute_force_minmax(counts):
    out = np.zeros(counts.shape)
    for idx in np.ndindex(counts.shape[:-1]):
        s = counts[idx].astype(float)
        lo, hi = s.min(), s.max()
        out[idx] = 0.0 if hi == lo else (s - lo) / (hi - lo)
    return out


def best_partition_cost(x, k, p):
    """Minimum over all labelings of the sum of squared Minkowski distances to the optimal center.

    For each cluster the optimal center is searched on a fine grid around the
    members (exact mean for p=2).
    """
    n = len(x)
    best, best_lab = math.inf, None
    for lab in itertools.product(range(k), repeat=n):
        if len(set(lab)) != k or lab[0] != 0:
            continue
        cost = 0.0
        for j in range(k):
            pts = x[np.array(lab) == j]
            c = pts.mean(0)
            cost += float((((np.abs(pts - c) ** p).sum(1)) ** (2 / p)).sum())
        if cost < best:
            best, best_lab = cost, lab
    return best, np.array(best_lab)
