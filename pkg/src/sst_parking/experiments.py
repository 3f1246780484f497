"""Seeded qualitative experiments on the synthetic city.

Each function runs one seed and returns plain numbers, so test suites and
scripts can aggregate over seeds themselves.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

from .evaluate import collect_predictions, mse
from .features import FeatureConfig
from .finetune import evaluate_loss, finetune
from .model import ModelConfig, SSTModel
from .pipeline import PipelineConfig, ProcessedDataset, SynthConfig, make_windows, prepare_synthetic
from .ssl import MaskSpec, pretrain


@dataclass
class ExperimentConfig:
    """Model and optimisation settings shared by the seeded experiments."""

    d_model: int = 32
    n_heads: int = 4
    n_layers: int = 1
    patch_len: int = 24
    dropout: float = 0.1
    seq_len: int = 144
    pred_len: int = 144
    lr: float = 1e-3
    batch_size: int = 32
    stride: int = 24
    stride_eval: int = 12
    days: int = 30
    mask: dict = field(default_factory=dict)

    def model(self, **kw) -> ModelConfig:
        base = dict(seq_len=self.seq_len, pred_len=self.pred_len, d_model=self.d_model, n_heads=self.n_heads,
                    n_layers=self.n_layers, patch_len=self.patch_len, dropout=self.dropout)
        return ModelConfig(**{**base, **kw})

    def to_dict(self) -> dict:
        return asdict(self)


def synthetic_dataset(seed: int, days: int = 30) -> ProcessedDataset:
    """20 lots in 4 zones, generated and processed with ``seed``."""
    return prepare_synthetic(SynthConfig(days=days, seed=seed), PipelineConfig(seed=seed))


def _train_kw(cfg: ExperimentConfig, seed: int) -> dict:
    return dict(lr=cfg.lr, batch_size=cfg.batch_size, seed=seed)


def ssl_vs_scratch(seed: int, cfg: ExperimentConfig | None = None, pretrain_epochs: int = 20,
                   finetune_epochs: int = 20, scratch_epochs: int = 40, data: ProcessedDataset | None = None) -> dict:
    """Test MSE of pretrain + full fine-tune against forecast training from scratch."""
    cfg = cfg or ExperimentConfig()
    data = data or synthetic_dataset(seed, cfg.days)
    wins = make_windows(data, cfg.seq_len, cfg.pred_len, cfg.stride, stride_eval=cfg.stride_eval)
    t0 = time.time()
    ssl = SSTModel(cfg.model(), seed)
    curve = pretrain(ssl, wins, MaskSpec(**{**cfg.mask, "seed": seed}), pretrain_epochs, **_train_kw(cfg, seed)).curve
    finetune(ssl, wins, "full", finetune_epochs, **_train_kw(cfg, seed))
    ssl_mse = evaluate_loss(ssl, wins.splits["test"])
    scratch = SSTModel(cfg.model(), seed)
    finetune(scratch, wins, "full", scratch_epochs, **_train_kw(cfg, seed))
    return {"seed": seed, "ssl": ssl_mse, "scratch": evaluate_loss(scratch, wins.splits["test"]),
            "recon_curve": curve, "seconds": time.time() - t0}


def ablation_deltas(seed: int, cfg: ExperimentConfig | None = None, epochs: int = 20,
                    configs=("F", "F-R", "F-T", "F-B", "F-M"), data: ProcessedDataset | None = None) -> dict:
    """Dual-branch test MSE per feature configuration (APL), plus F under TPL.

    ``delta`` holds the relative change ``(MSE - MSE_F) / MSE_F`` per configuration.
    """
    cfg = cfg or ExperimentConfig()
    data = data or synthetic_dataset(seed, cfg.days)
    t0 = time.time()
    runs = [(name, "APL") for name in configs] + [("F", "TPL")]
    out = {}
    for name, paradigm in runs:
        wins = make_windows(data, cfg.seq_len, cfg.pred_len, cfg.stride, FeatureConfig.ablation(name, paradigm),
                            stride_eval=cfg.stride_eval)
        model = SSTModel(cfg.model(), seed)
        finetune(model, wins, "full", epochs, **_train_kw(cfg, seed))
        out[f"{name}/{paradigm}"] = evaluate_loss(model, wins.splits["test"])
    base = out["F/APL"]
    delta = {name: (out[f"{name}/APL"] - base) / base for name in configs}
    return {"seed": seed, "mse": out, "delta": delta, "seconds": time.time() - t0}


def strategy_horizons(seed: int, cfg: ExperimentConfig | None = None, horizons=(144, 288, 432),
                      strategies=("full", "probe"), pretrain_epochs: int = 20, finetune_epochs: int = 20,
                      data: ProcessedDataset | None = None) -> dict:
    """Pretrain once at the longest horizon, fine-tune per strategy, MSE over each horizon prefix."""
    cfg = cfg or ExperimentConfig()
    t_max = max(horizons)
    data = data or synthetic_dataset(seed, cfg.days)
    wins = make_windows(data, cfg.seq_len, t_max, cfg.stride, stride_eval=cfg.stride_eval)
    t0 = time.time()
    base = SSTModel(cfg.model(pred_len=t_max), seed)
    pretrain(base, wins, MaskSpec(**{**cfg.mask, "seed": seed}), pretrain_epochs, **_train_kw(cfg, seed))
    state = base.state_dict()
    out = {}
    for s in strategies:
        model = SSTModel(cfg.model(pred_len=t_max), seed)
        model.load_state_dict(state)
        finetune(model, wins, s, finetune_epochs, **_train_kw(cfg, seed))
        pred, truth = collect_predictions(model, wins.splits["test"])
        out[s] = {int(h): mse(pred[:, :h], truth[:, :h]) for h in horizons}
    return {"seed": seed, "mse": out, "seconds": time.time() - t0}
