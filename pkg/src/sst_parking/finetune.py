"""Forecast training with parameter freezing, plus inference."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from . import tensor as tn
from .model import SSTModel
from .optim import Adam, TrainingError
from .pipeline import WindowedDataset, ZoneWindows, zone_batches
from .tensor import Tensor, make_rng


class TuneStrategy(str, Enum):
    FULL = "full"
    PROBE = "probe"
    ATTN = "attn"
    SATTN = "sattn"
    CATTN = "cattn"

    @classmethod
    def parse(cls, value) -> "TuneStrategy":
        if isinstance(value, cls):
            return value
        aliases = {
            "linearprobe": "probe",
            "linear_probe": "probe",
            "attntuning": "attn",
            "sattntuning": "sattn",
            "cattntuning": "cattn",
        }
        key = str(value).lower().replace("-", "")
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ValueError(f"unknown strategy {value!r}; choose from {[s.value for s in cls]}") from None


HEAD_GROUPS = ("head_forecast", "linear")
ATTN_GROUPS = {"series": ("series_attn",), "channel": ("channel_attn",)}
# whole-block variant: attention plus the block's norms and FNN
BLOCK_GROUPS = {
    "series": ("series_attn", "series_norm", "series_ffn"),
    "channel": ("channel_attn", "channel_norm", "channel_ffn"),
}


def frozen_groups(strategy, include_block: bool = False) -> set[str] | None:
    """Groups frozen by ``strategy``; ``None`` means everything outside the forecast head."""
    s = TuneStrategy.parse(strategy)
    table = BLOCK_GROUPS if include_block else ATTN_GROUPS
    if s is TuneStrategy.FULL:
        return set()
    if s is TuneStrategy.PROBE:
        return None
    if s is TuneStrategy.SATTN:
        return set(table["series"])
    if s is TuneStrategy.CATTN:
        return set(table["channel"])
    return set(table["series"]) | set(table["channel"])


def freeze(model: SSTModel, strategy, include_block: bool = False) -> tuple[list[str], list[str]]:
    """Split parameter names into (trainable, frozen) and set ``requires_grad`` to match."""
    groups = frozen_groups(strategy, include_block)
    trainable, frozen = [], []
    for name, p in model.named_parameters():
        g = model.group_of(name)
        is_frozen = g not in HEAD_GROUPS if groups is None else g in groups
        p.requires_grad = not is_frozen
        (frozen if is_frozen else trainable).append(name)
    return trainable, frozen


def unfreeze(model: SSTModel) -> None:
    for p in model.parameters():
        p.requires_grad = True


def forecast_loss(pred: Tensor, target) -> Tensor:
    target = tn.as_tensor(target)
    if pred.shape != target.shape:
        raise tn.ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    return tn.mse(pred, target)


@dataclass
class FinetuneResult:
    model: SSTModel
    train_curve: list[float] = field(default_factory=list)
    val_curve: list[float] = field(default_factory=list)
    best_epoch: int | None = None
    steps: int = 0
    trainable: list[str] = field(default_factory=list)
    frozen: list[str] = field(default_factory=list)


def evaluate_loss(model: SSTModel, windows: Sequence[ZoneWindows], batch_size: int = 64) -> float:
    """Mean squared forecast error over all windows, dropout off."""
    total, n = 0.0, 0
    was = model.training
    model.eval()
    with tn.no_grad():
        for zw, idx in zone_batches(windows, batch_size):
            pred = model.forecast(Tensor(zw.x(idx)), zw.targets).data
            err = pred - zw.y(idx)
            total += float((err * err).sum())
            n += err.size
    model.train(was)
    if n == 0:
        raise TrainingError("no windows to evaluate")
    return total / n


def finetune(
    model: SSTModel,
    data: WindowedDataset,
    strategy="full",
    epochs: int = 10,
    optimizer: Adam | None = None,
    lr: float = 1e-3,
    batch_size: int = 32,
    seed: int = 0,
    max_batches: int | None = None,
    max_steps: int | None = None,
    select_best: bool = True,
    include_block: bool = False,
    log=None,
) -> FinetuneResult:
    """Train the forecast objective with the parameters frozen by ``strategy``.

    A forecast head sized for another horizon is reinitialised.  With
    ``select_best`` the weights from the epoch with the lowest validation MSE
    are restored at the end.
    """
    if epochs < 0:
        raise TrainingError("epochs must be >= 0")
    if model.config.pred_len != data.pred_len:
        model.reset_forecast_head(data.pred_len, seed)
    if model.config.seq_len != data.seq_len:
        raise tn.ShapeError(f"model expects L={model.config.seq_len}, dataset has L={data.seq_len}")
    trainable, frozen = freeze(model, strategy, include_block)
    result = FinetuneResult(model, trainable=trainable, frozen=frozen)
    if epochs == 0:
        unfreeze(model)
        return result
    windows = data.splits["train"]
    if data.n_windows("train") == 0:
        raise TrainingError("no training windows")
    params = [model.params[n] for n in trainable]
    opt = optimizer or Adam(params, lr=lr)
    has_val = data.n_windows("val") > 0
    best, best_val = None, math.inf
    try:
        for epoch in range(epochs):
            model.train()
            order_rng = make_rng(seed, 40, epoch)
            drop_rng = make_rng(seed, 41, epoch)
            total, count = 0.0, 0
            for zw, idx in zone_batches(windows, batch_size, order_rng, max_batches):
                if max_steps is not None and result.steps >= max_steps:
                    break
                opt.zero_grad()
                try:
                    loss = forecast_loss(model.forecast(Tensor(zw.x(idx)), zw.targets, drop_rng), zw.y(idx))
                    value = loss.item()
                    tn.backward(loss)
                    opt.step()
                except (TrainingError, tn.NonFiniteError) as exc:
                    raise TrainingError(f"fine-tuning diverged at epoch {epoch}: {exc}") from exc
                result.steps += 1
                total += value * len(idx)
                count += len(idx)
            if count == 0:
                break
            result.train_curve.append(total / count)
            if has_val:
                val = evaluate_loss(model, data.splits["val"], max(batch_size, 64))
                result.val_curve.append(val)
                if select_best and val < best_val:
                    best_val, best, result.best_epoch = val, model.state_dict(), epoch
            if log:
                tail = f" val_mse={result.val_curve[-1]:.6f}" if has_val else ""
                log(f"finetune epoch {epoch}: train_mse={result.train_curve[-1]:.6f}{tail}")
    finally:
        tn.current_tape().clear()
        model.eval()
        unfreeze(model)
    if best is not None:
        model.load_state_dict(best)
    return result


def train_from_scratch(model: SSTModel, data: WindowedDataset, epochs: int, **kw) -> FinetuneResult:
    return finetune(model, data, "full", epochs, **kw)


def predict(
    model: SSTModel,
    window,
    targets: Sequence[int],
    stats: Sequence[tuple[float, float]] | None = None,
    capacity: Sequence[float] | None = None,
) -> np.ndarray:
    """Deterministic ``[T, M]`` forecast for one ``[L, C]`` window.

    With ``stats`` (mean, std per target) the output is mapped back to
    vacant-space counts, and with ``capacity`` clamped to ``[0, capacity]``.
    """
    x = np.asarray(window, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != model.config.seq_len:
        raise tn.ShapeError(f"window must be [L={model.config.seq_len}, C], got shape {x.shape}")
    was = model.training
    model.eval()
    with tn.no_grad():
        y = model.forecast(Tensor(x[None]), targets).data[0]
    model.train(was)
    if stats is not None:
        mu = np.array([s[0] for s in stats])
        sd = np.array([s[1] for s in stats])
        y = y * sd + mu
    if capacity is not None:
        y = np.clip(y, 0.0, np.asarray(capacity, dtype=np.float64))
    return y


def collect_predictions(model: SSTModel, windows: Sequence[ZoneWindows], batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Stacked ``[N, T]`` predictions and truths, one row per (window, target lot), in normalised units."""
    preds, truths = [], []
    model.eval()
    with tn.no_grad():
        for zw, idx in zone_batches(windows, batch_size):
            p = model.forecast(Tensor(zw.x(idx)), zw.targets).data
            preds.append(p.transpose(0, 2, 1).reshape(-1, p.shape[1]))
            truths.append(zw.y(idx).transpose(0, 2, 1).reshape(-1, p.shape[1]))
    if not preds:
        raise TrainingError("no windows to predict")
    return np.concatenate(preds), np.concatenate(truths)


@dataclass
class TrainConfig:
    """Optimisation settings shared by the harnesses and the CLI."""

    epochs: int = 20
    pretrain_epochs: int = 0
    lr: float = 1e-3
    batch_size: int = 32
    stride: int = 12
    stride_eval: int = 12
    max_batches: int | None = None
    seed: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})
