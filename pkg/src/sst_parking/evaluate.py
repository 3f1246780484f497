"""Forecast metrics and the experiment harnesses (feature ablation, fine-tuning strategies, look-back sweep)."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .features import ABLATIONS, FeatureConfig
from .finetune import TrainConfig, TuneStrategy, collect_predictions, finetune
from .model import ModelConfig, SSTModel, count_macs, count_params
from .pipeline import ProcessedDataset, WindowedDataset, make_windows
from .ssl import MaskSpec, pretrain

MAPE_EPS = 1e-3
VARIANTS = ("dual", "channel", "series", "linear")
HORIZONS = (144, 216, 288, 360, 432)


class EvalError(ValueError):
    pass


# ---------------------------------------------------------------- metrics


def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(truth, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise EvalError(f"prediction has {p.size} values, truth has {t.size}")
    if p.size == 0:
        raise EvalError("empty input")
    return p, t


def mse(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.mean((t - p) ** 2))


def mae(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.mean(np.abs(t - p)))


def mape(pred, truth, eps: float = MAPE_EPS, return_excluded: bool = False):
    """Mean absolute percentage error over targets with ``|truth| >= eps``, in percent."""
    p, t = _pair(pred, truth)
    keep = np.abs(t) >= eps
    excluded = int((~keep).sum())
    value = float(np.mean(np.abs((t[keep] - p[keep]) / t[keep])) * 100.0) if keep.any() else float("nan")
    return (value, excluded) if return_excluded else value


@dataclass
class MetricsReport:
    mse: float
    mae: float
    mape: float
    n_test: int
    n_mape_excluded: int = 0
    params_m: float = 0.0
    macs_g: float = 0.0
    per_horizon: dict[int, dict[str, float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_horizon"] = {str(k): v for k, v in self.per_horizon.items()}
        return d


def score(pred: np.ndarray, truth: np.ndarray, horizons: Sequence[int] = ()) -> MetricsReport:
    """Metrics over ``[N, T]`` arrays; ``horizons`` adds metrics over the first ``h`` steps."""
    m, n_ex = mape(pred, truth, return_excluded=True)
    per = {}
    for h in horizons:
        if h > pred.shape[1]:
            raise EvalError(f"horizon {h} exceeds forecast length {pred.shape[1]}")
        per[int(h)] = {"mse": mse(pred[:, :h], truth[:, :h]), "mae": mae(pred[:, :h], truth[:, :h])}
    return MetricsReport(mse(pred, truth), mae(pred, truth), m, int(pred.size), n_ex, per_horizon=per)


def evaluate_model(model: SSTModel, data: WindowedDataset, split: str = "test", horizons: Sequence[int] = ()) -> MetricsReport:
    pred, truth = collect_predictions(model, data.splits[split])
    rep = score(pred, truth, horizons)
    zw = data.splits[split][0]
    rep.params_m = count_params(model) / 1e6
    rep.macs_g = count_macs(model, 1, zw.n_channels, len(zw.targets)) / 1e9
    return rep


# ---------------------------------------------------------------- training helper


def train_model(
    model_cfg: ModelConfig,
    data: WindowedDataset,
    train: TrainConfig,
    strategy="full",
    mask: MaskSpec | None = None,
    init_state: dict | None = None,
) -> SSTModel:
    """Optional masked pretraining, then forecast training; deterministic in ``train.seed``."""
    model = SSTModel(model_cfg, train.seed)
    if init_state is not None:
        model.load_state_dict(init_state, strict=False)
    kw = dict(lr=train.lr, batch_size=train.batch_size, seed=train.seed, max_batches=train.max_batches)
    if train.pretrain_epochs and model_cfg.branches != "linear":
        pretrain(model, data, mask or MaskSpec(seed=train.seed), train.pretrain_epochs, **kw)
    finetune(model, data, strategy, train.epochs, **kw)
    return model


def windows_for(data: ProcessedDataset, model_cfg: ModelConfig, train: TrainConfig, features: FeatureConfig | None = None, protocol: str = "temporal") -> WindowedDataset:
    return make_windows(
        data, model_cfg.seq_len, model_cfg.pred_len, train.stride, features, protocol, stride_eval=train.stride_eval
    )


def _variant(cfg: ModelConfig, branches: str) -> ModelConfig:
    return ModelConfig.from_dict({**cfg.to_dict(), "branches": branches})


# ---------------------------------------------------------------- harnesses


@dataclass
class ResultTable:
    kind: str
    rows: list[dict]
    config: dict

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]

    def where(self, **match) -> list[dict]:
        return [r for r in self.rows if all(r.get(k) == v for k, v in match.items())]


def check_modes(data: ProcessedDataset, modes: Iterable[str]) -> None:
    have = {c.kind for z in data.zones for c in z.channels}
    missing = sorted(set(modes) - have)
    if missing:
        raise EvalError(f"dataset lacks demand channels for {missing}")


def run_feature_ablation(
    data: ProcessedDataset,
    model_cfg: ModelConfig,
    train: TrainConfig,
    configs: Sequence[str] = tuple(ABLATIONS),
    paradigms: Sequence[str] = ("APL", "TPL"),
    variants: Sequence[str] = VARIANTS,
    setting: int = 1,
    model_fn: Callable | None = None,
) -> ResultTable:
    """Train and test every (paradigm, configuration, variant) combination.

    Besides one row per combination, a ``delta`` row per (paradigm,
    configuration) holds the sum over variants of the relative deviation of
    each metric from the all-features run ``F``.
    """
    model_fn = model_fn or train_model
    for name in configs:
        check_modes(data, FeatureConfig.ablation(name).modes)
    rows = []
    for paradigm in paradigms:
        for name in configs:
            feats = FeatureConfig.ablation(name, paradigm, setting)
            wins = windows_for(data, model_cfg, train, feats)
            for v in variants:
                model = model_fn(_variant(model_cfg, v), wins, train)
                rep = evaluate_model(model, wins)
                rows.append({"row": "run", "paradigm": paradigm, "config": name, "variant": v, **_flat(rep)})
    for paradigm in paradigms:
        base = {r["variant"]: r for r in rows if r["row"] == "run" and r["paradigm"] == paradigm and r["config"] == "F"}
        for name in configs:
            runs = [r for r in rows if r["row"] == "run" and r["paradigm"] == paradigm and r["config"] == name]
            delta = {"row": "delta", "paradigm": paradigm, "config": name, "variant": "sum"}
            for metric in ("mse", "mae", "mape"):
                if base:
                    delta[metric] = float(
                        sum((r[metric] - base[r["variant"]][metric]) / base[r["variant"]][metric] for r in runs)
                    )
                else:
                    delta[metric] = float("nan")
            rows.append(delta)
    cfg = {"model": model_cfg.to_dict(), "train": train.to_dict(), "configs": list(configs),
           "paradigms": list(paradigms), "variants": list(variants), "setting": setting}
    return ResultTable("feature_ablation", rows, cfg)


def run_finetune_comparison(
    data: ProcessedDataset,
    model_cfg: ModelConfig,
    train: TrainConfig,
    strategies: Sequence[str] = tuple(s.value for s in TuneStrategy),
    horizons: Sequence[int] = HORIZONS,
    mask: MaskSpec | None = None,
    pretrained: dict | None = None,
) -> ResultTable:
    """Pretrain once, fine-tune each strategy at the longest horizon, score horizon prefixes."""
    t_max = max(horizons)
    test_len = data.splits["test"][1] - data.splits["test"][0]
    if t_max + model_cfg.seq_len > test_len:
        raise EvalError(f"horizon {t_max} plus look-back {model_cfg.seq_len} exceeds the {test_len}-step test split")
    cfg = ModelConfig.from_dict({**model_cfg.to_dict(), "pred_len": t_max})
    wins = windows_for(data, cfg, train)
    if pretrained is None:
        base = SSTModel(cfg, train.seed)
        pretrain(base, wins, mask or MaskSpec(seed=train.seed), train.pretrain_epochs,
                 lr=train.lr, batch_size=train.batch_size, seed=train.seed, max_batches=train.max_batches)
        pretrained = base.state_dict()
    rows = []
    for s in strategies:
        strat = TuneStrategy.parse(s)
        model = SSTModel(cfg, train.seed)
        model.load_state_dict(pretrained, strict=False)
        finetune(model, wins, strat, train.epochs, lr=train.lr, batch_size=train.batch_size,
                 seed=train.seed, max_batches=train.max_batches)
        rep = evaluate_model(model, wins, horizons=horizons)
        for h in horizons:
            rows.append({"strategy": strat.value, "horizon": int(h), **rep.per_horizon[int(h)]})
    conf = {"model": cfg.to_dict(), "train": train.to_dict(), "strategies": [TuneStrategy.parse(s).value for s in strategies],
            "horizons": [int(h) for h in horizons], "mask": (mask or MaskSpec(seed=train.seed)).to_dict()}
    return ResultTable("finetune_comparison", rows, conf)


def run_lookback_sweep(
    data: ProcessedDataset,
    model_cfg: ModelConfig,
    train: TrainConfig,
    lookbacks: Sequence[int] = (36, 72, 144, 288),
    pred_len: int = 144,
    model_fn: Callable | None = None,
) -> ResultTable:
    model_fn = model_fn or train_model
    if not lookbacks:
        raise EvalError("no look-back values given")
    n_train = data.splits["train"][1] - data.splits["train"][0]
    for L in lookbacks:
        if L < model_cfg.patch_len or L > n_train - pred_len:
            raise EvalError(f"look-back {L} must lie in [{model_cfg.patch_len}, {n_train - pred_len}]")
    rows = []
    for L in lookbacks:
        cfg = ModelConfig.from_dict({**model_cfg.to_dict(), "seq_len": int(L), "pred_len": pred_len})
        wins = windows_for(data, cfg, train)
        model = model_fn(cfg, wins, train)
        rep = evaluate_model(model, wins)
        rows.append({"lookback": int(L), "mse": rep.mse, "mae": rep.mae, "mape": rep.mape,
                     "n_mape_excluded": rep.n_mape_excluded})
    conf = {"model": model_cfg.to_dict(), "train": train.to_dict(), "lookbacks": [int(v) for v in lookbacks], "pred_len": pred_len}
    return ResultTable("lookback_sweep", rows, conf)


def _flat(rep: MetricsReport) -> dict:
    return {"mse": rep.mse, "mae": rep.mae, "mape": rep.mape, "n_test": rep.n_test,
            "n_mape_excluded": rep.n_mape_excluded, "params_m": rep.params_m, "macs_g": rep.macs_g}


# ---------------------------------------------------------------- output


def write_table(table: ResultTable, stem) -> tuple[Path, Path]:
    """``<stem>.csv`` with the rows and ``<stem>.json`` with rows plus the generating config."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = stem.with_suffix(".csv"), stem.with_suffix(".json")
    cols = list(dict.fromkeys(k for r in table.rows for k in r))
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        w.writerows(table.rows)
    json_path.write_text(json.dumps({"kind": table.kind, "config": table.config, "rows": table.rows}, indent=2))
    return csv_path, json_path


def plot_lookback(table: ResultTable, path) -> Path | None:
    """SVG of each metric against look-back; skipped when matplotlib is unavailable."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return None
    ls = table.column("lookback")
    fig, axes = plt.subplots(1, 3, figsize=(10, 3))
    for ax, metric in zip(axes, ("mse", "mae", "mape")):
        ax.plot(ls, table.column(metric), marker="o")
        ax.set_xlabel("look-back L")
        ax.set_title(metric.upper())
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return Path(path)
