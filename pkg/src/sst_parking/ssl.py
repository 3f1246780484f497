"""Masked reconstruction pretraining.

Masks hide whole patch-aligned time segments across every maskable channel
and, on top of that, entire channels.  Hidden entries take the learnable
token of their channel kind; calendar channels are never hidden.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as tn
from .model import MASKABLE_KINDS, SSTModel
from .optim import Adam, TrainingError
from .pipeline import WindowedDataset, zone_batches
from .tensor import Tensor, make_rng


class MaskError(ValueError):
    pass


@dataclass(frozen=True)
class MaskSpec:
    temporal_ratio: float = 0.25
    segment_len: int | None = None  # None -> the model's patch length
    spatial_ratio: float = 0.10
    seed: int = 0

    def __post_init__(self):
        for name in ("temporal_ratio", "spatial_ratio"):
            r = getattr(self, name)
            if not 0.0 <= r <= 1.0:
                raise MaskError(f"{name} must lie in [0, 1], got {r}")
        if self.segment_len is not None and self.segment_len < 1:
            raise MaskError("segment_len must be >= 1")

    def resolved(self, patch_len: int) -> "MaskSpec":
        if self.segment_len is not None:
            return self
        return MaskSpec(self.temporal_ratio, patch_len, self.spatial_ratio, self.seed)

    def to_dict(self) -> dict:
        return {
            "temporal_ratio": self.temporal_ratio,
            "segment_len": self.segment_len,
            "spatial_ratio": self.spatial_ratio,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MaskSpec":
        return cls(**{k: d[k] for k in ("temporal_ratio", "segment_len", "spatial_ratio", "seed") if k in d})


@dataclass
class MaskedBatch:
    x_masked: Tensor
    mask: np.ndarray  # bool [B, L, C], True = hidden
    x_orig: np.ndarray

    @property
    def n_mask(self) -> int:
        return int(self.mask.sum())


def temporal_mask(seq_len: int, ratio: float, segment_len: int, rng) -> np.ndarray:
    """Boolean ``[seq_len]``: segments picked from the grid of aligned slots until the ratio is met."""
    if segment_len > seq_len:
        raise MaskError(f"segment_len {segment_len} exceeds window length {seq_len}")
    need = math.ceil(ratio * seq_len - 1e-9)
    out = np.zeros(seq_len, dtype=bool)
    if need <= 0:
        return out
    starts = np.arange(0, seq_len, segment_len)
    for s in starts[rng.permutation(len(starts))]:
        out[s : s + segment_len] = True
        if out.sum() >= need:
            break
    return out


def sample_mask(shape, spec: MaskSpec, rng, maskable: np.ndarray | None = None) -> np.ndarray:
    b, seq, c = shape
    maskable = np.ones(c, dtype=bool) if maskable is None else np.asarray(maskable, dtype=bool)
    cols = np.flatnonzero(maskable)
    seg = spec.segment_len or seq
    n_spatial = math.ceil(spec.spatial_ratio * len(cols) - 1e-9)
    mask = np.zeros((b, seq, c), dtype=bool)
    for i in range(b):
        t = temporal_mask(seq, spec.temporal_ratio, seg, rng)
        mask[i][np.ix_(t, cols)] = True
        if n_spatial:
            mask[i][:, rng.choice(cols, size=n_spatial, replace=False)] = True
    return mask


def apply_mask(
    x,
    spec: MaskSpec,
    rng,
    kinds: Sequence[int] | None = None,
    token: Tensor | None = None,
) -> MaskedBatch:
    """Hide entries of ``x`` ``[B, L, C]``.

    ``kinds`` gives each channel's kind index; channels whose kind has no mask
    token (calendar features) are left visible.  ``token`` holds one value per
    maskable kind and defaults to zeros.
    """
    x = tn.as_tensor(x)
    b, seq, c = x.shape
    kinds = np.zeros(c, dtype=np.int64) if kinds is None else np.asarray(kinds, dtype=np.int64)
    maskable = kinds < len(MASKABLE_KINDS)
    mask = sample_mask(x.shape, spec, rng, maskable)
    if token is None:
        token = Tensor(np.zeros(len(MASKABLE_KINDS)))
    fill = tn.take(token, np.where(maskable, kinds, 0), axis=0)  # [C]
    return MaskedBatch(tn.where(mask, fill, x), mask, x.data)


def reconstruction_loss(recon: Tensor, batch: MaskedBatch) -> Tensor:
    """Mean squared error over hidden entries only."""
    if recon.shape != batch.mask.shape:
        raise tn.ShapeError(f"reconstruction {recon.shape} vs mask {batch.mask.shape}")
    if batch.n_mask == 0:
        raise MaskError("mask hides nothing; the reconstruction loss is undefined")
    return tn.mse(tn.masked_select(recon, batch.mask), batch.x_orig[batch.mask])


@dataclass
class PretrainResult:
    model: SSTModel
    curve: list[float] = field(default_factory=list)
    spec: MaskSpec | None = None


def pretrain_parameters(model: SSTModel) -> list[Tensor]:
    """Everything that receives a reconstruction gradient."""
    return [p for n, p in model.named_parameters() if model.group_of(n) not in ("head_forecast", "linear")]


def pretrain(
    model: SSTModel,
    data: WindowedDataset,
    spec: MaskSpec | None = None,
    epochs: int = 10,
    optimizer: Adam | None = None,
    lr: float = 1e-3,
    batch_size: int = 32,
    seed: int = 0,
    max_batches: int | None = None,
    log=None,
) -> PretrainResult:
    """Train on the masked reconstruction objective over the training windows.

    Returns the same model object plus the mean loss per epoch.
    """
    spec = (spec or MaskSpec(seed=seed)).resolved(model.config.patch_len)
    if epochs < 0:
        raise TrainingError("epochs must be >= 0")
    if epochs == 0:
        return PretrainResult(model, [], spec)
    windows = data.splits["train"]
    if not windows or data.n_windows("train") == 0:
        raise TrainingError("no training windows")
    opt = optimizer or Adam(pretrain_parameters(model), lr=lr)
    token = model.params["mask_token"]
    curve: list[float] = []
    model.train()
    try:
        for epoch in range(epochs):
            order_rng = make_rng(seed, 30, epoch)
            mask_rng = make_rng(spec.seed, 31, epoch)
            drop_rng = make_rng(seed, 32, epoch)
            total, count = 0.0, 0
            for zw, idx in zone_batches(windows, batch_size, order_rng, max_batches):
                opt.zero_grad()
                batch = apply_mask(zw.x(idx), spec, mask_rng, zw.kinds, token)
                try:
                    loss = reconstruction_loss(model.reconstruct(batch.x_masked, drop_rng), batch)
                    value = loss.item()
                    tn.backward(loss)
                    opt.step()
                except (TrainingError, tn.NonFiniteError) as exc:
                    raise TrainingError(f"pretraining diverged at epoch {epoch}: {exc}") from exc
                total += value * len(idx)
                count += len(idx)
            curve.append(total / count)
            if log:
                log(f"pretrain epoch {epoch}: recon_mse={curve[-1]:.6f}")
    finally:
        tn.current_tape().clear()
        model.eval()
    return PretrainResult(model, curve, spec)


def masked_mean_baseline(data: WindowedDataset, spec: MaskSpec, split: str = "val", batch_size: int = 64) -> tuple[float, float]:
    """MSE on hidden entries of predicting the per-channel training mean, and the number of entries."""
    if spec.segment_len is None:
        raise MaskError("resolve the mask spec against a patch length first")
    total, n = 0.0, 0
    rng = make_rng(spec.seed, 33)
    train = {zw.zone_id: zw.grid.mean(0) for zw in data.splits["train"]}
    for zw, idx in zone_batches(data.splits[split], batch_size):
        x = zw.x(idx)
        mask = sample_mask(x.shape, spec, rng, zw.maskable)
        mu = np.broadcast_to(train[zw.zone_id], x.shape)
        total += float(((x - mu)[mask] ** 2).sum())
        n += int(mask.sum())
    return total / max(n, 1), n


def evaluate_reconstruction(model: SSTModel, data: WindowedDataset, spec: MaskSpec, split: str = "val", batch_size: int = 64) -> float:
    """Masked-entry MSE with dropout off, using the same mask stream as :func:`masked_mean_baseline`."""
    spec = spec.resolved(model.config.patch_len)
    rng = make_rng(spec.seed, 33)
    total, n = 0.0, 0
    model.eval()
    with tn.no_grad():
        for zw, idx in zone_batches(data.splits[split], batch_size):
            batch = apply_mask(zw.x(idx), spec, rng, zw.kinds, model.params["mask_token"])
            recon = model.reconstruct(batch.x_masked).data
            total += float(((recon - batch.x_orig)[batch.mask] ** 2).sum())
            n += batch.n_mask
    return total / max(n, 1)


def write_curve_csv(path, curve: Sequence[float], column: str = "recon_mse") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", column])
        for i, v in enumerate(curve):
            w.writerow([i, repr(float(v))])
