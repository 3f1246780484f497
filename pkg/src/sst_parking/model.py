"""Dual-branch inverted transformer for multi-lot parking availability.

Input windows are ``[B, L, C]``.  The series branch cuts every channel into
non-overlapping patches and attends over the patch axis; the channel branch
embeds each whole channel as one variate token and attends across channels.
Both produce ``[B, C, d_model]`` and are fused by concatenation followed by a
linear projection.  Two linear heads sit on top: a forecast head
(``d_model -> pred_len``) and a reconstruction head (``d_model -> seq_len``)
used during masked pretraining.

The network is agnostic to C: all weights are shared across channels, so one
model serves parking zones with different lot counts.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from . import tensor as tn
from .checkpoint import load_checkpoint, save_checkpoint
from .tensor import Tensor

# Channel kinds; every kind but "time" owns one learnable mask token.
CHANNEL_KINDS = ("availability", "bus", "metro", "taxi", "ridehailing", "integrated", "time")
MASKABLE_KINDS = CHANNEL_KINDS[:-1]

BRANCHES = ("dual", "channel", "series", "linear")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    seq_len: int = 144
    pred_len: int = 144
    n_channels: int = 34  # nominal C, used for complexity accounting only
    d_model: int = 128
    n_heads: int = 8
    n_layers: int = 2
    patch_len: int = 16
    ffn_factor: int = 4
    dropout: float = 0.1
    eps_ln: float = 1e-5
    branches: str = "dual"

    def __post_init__(self):
        if self.patch_len < 1:
            raise ConfigError("patch_len must be >= 1")
        if self.seq_len < self.patch_len:
            raise ConfigError(f"seq_len {self.seq_len} shorter than patch_len {self.patch_len}")
        if self.pred_len < 1 or self.n_channels < 1 or self.n_layers < 0:
            raise ConfigError("pred_len, n_channels must be >= 1 and n_layers >= 0")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.ffn_factor != 4:
            raise ConfigError("ffn_factor is fixed at 4")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.eps_ln <= 0:
            raise ConfigError("eps_ln must be positive")
        if self.branches not in BRANCHES:
            raise ConfigError(f"branches must be one of {BRANCHES}")

    @property
    def patch_num(self) -> int:
        return self.seq_len // self.patch_len

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


# ---------------------------------------------------------------- time features

DEFAULT_PERIODS = {"hour": 24.0, "dayofweek": 7.0, "day": 31.0, "month": 12.0}


@dataclass
class TimeFeatureSpec:
    features: tuple[str, ...] = ("hour", "dayofweek")
    periods: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_PERIODS))

    def __post_init__(self):
        self.features = tuple(self.features)
        for f in self.features:
            if f not in self.periods:
                raise ConfigError(f"unknown time feature {f!r}")

    @property
    def n_channels(self) -> int:
        return 2 * len(self.features)

    def channel_names(self) -> list[str]:
        return [f"time.{f}.{fn}" for f in self.features for fn in ("sin", "cos")]


def time_feature_value(ts: pd.DatetimeIndex, feature: str) -> np.ndarray:
    if feature == "hour":
        return ts.hour.to_numpy() + ts.minute.to_numpy() / 60.0
    if feature == "dayofweek":
        return ts.dayofweek.to_numpy().astype(float)
    if feature == "day":
        return ts.day.to_numpy().astype(float)
    if feature == "month":
        return ts.month.to_numpy().astype(float)
    raise ConfigError(f"unknown time feature {feature!r}")


def periodic_encoding(value, period: float) -> tuple[np.ndarray, np.ndarray]:
    angle = np.asarray(value, dtype=np.float64) * (2.0 * np.pi / period)
    return np.sin(angle), np.cos(angle)


def encode_time_features(timestamps, spec: TimeFeatureSpec | None = None, spacing_minutes: float = 10) -> np.ndarray:
    """Sine/cosine calendar encodings, one (sin, cos) column pair per feature."""
    from .pipeline import PipelineError

    spec = spec or TimeFeatureSpec()
    ts = pd.DatetimeIndex(timestamps)
    if len(ts) > 1:
        step = np.diff(ts.asi8)
        if not (step == int(spacing_minutes * 60e9)).all():
            raise PipelineError(f"timestamps must be strictly increasing with {spacing_minutes}-minute spacing")
    cols = []
    for f in spec.features:
        s, c = periodic_encoding(time_feature_value(ts, f), spec.periods[f])
        cols += [s, c]
    return np.stack(cols, axis=1) if cols else np.zeros((len(ts), 0))


# ---------------------------------------------------------------- model container


def _group_of(name: str) -> str:
    if name == "mask_token":
        return "mask_token"
    parts = name.split(".")
    if parts[0] in ("series", "channel"):
        if parts[1] in ("embed", "flatten"):
            return f"{parts[0]}_{parts[1]}"
        sub = parts[2]
        return f"{parts[0]}_{'norm' if sub.startswith('norm') else sub}"
    if parts[0] == "head":
        return f"head_{parts[1]}"
    return parts[0]


class SSTModel:
    """Parameter set plus forward passes of the dual-branch encoder."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.training = False
        self.params: dict[str, Tensor] = {}
        rng = tn.make_rng(seed, 1)
        for name, shape, kind in _param_layout(config):
            self.params[name] = _init_param(rng, shape, kind, name)

    # ---- parameter bookkeeping
    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    @property
    def groups(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for n in self.params:
            out.setdefault(_group_of(n), []).append(n)
        return out

    def group_of(self, name: str) -> str:
        return _group_of(name)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        for n, p in self.params.items():
            if n not in state:
                if strict:
                    raise KeyError(f"missing parameter {n}")
                continue
            arr = np.asarray(state[n], dtype=np.float64)
            if arr.shape != p.shape:
                if strict:
                    raise tn.ShapeError(f"{n}: checkpoint shape {arr.shape} vs model {p.shape}")
                continue
            p.data[...] = arr

    def train(self, mode: bool = True) -> "SSTModel":
        self.training = mode
        return self

    def eval(self) -> "SSTModel":
        return self.train(False)

    def reset_forecast_head(self, pred_len: int, seed: int = 0) -> None:
        """Swap in a freshly initialised forecast head for a new horizon."""
        new = ModelConfig.from_dict({**self.config.to_dict(), "pred_len": pred_len})
        rng = tn.make_rng(seed, 2)
        for name, shape, kind in _param_layout(new):
            if _group_of(name) in ("head_forecast", "linear"):
                self.params[name] = _init_param(rng, shape, kind, name)
        self.config = new

    def save(self, path, meta: dict | None = None) -> Path:
        return save_checkpoint(path, self.state_dict(), {"config": self.config.to_dict(), **(meta or {})})

    @classmethod
    def load(cls, path) -> tuple["SSTModel", dict]:
        params, meta = load_checkpoint(path)
        model = cls(ModelConfig.from_dict(meta["config"]))
        model.load_state_dict(params)
        return model, meta

    # ---- forward
    def forecast(self, x: Tensor, targets: Sequence[int], rng=None) -> Tensor:
        if self.config.branches == "linear":
            return linear_forecast(x, self, targets)
        return decode_forecast(encoder_forward(x, self, rng), self, targets)

    def reconstruct(self, x: Tensor, rng=None) -> Tensor:
        if self.config.branches == "linear":
            raise ConfigError("the linear variant has no reconstruction head")
        return decode_reconstruct(encoder_forward(x, self, rng), self)


def _param_layout(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    d, f = cfg.d_model, cfg.ffn_factor * cfg.d_model
    out: list[tuple[str, tuple[int, ...], str]] = []

    def lin(name, din, dout, bias=True):
        out.append((f"{name}.w", (din, dout), "weight"))
        if bias:
            out.append((f"{name}.b", (dout,), "bias"))

    def block(prefix):
        for w in ("w_q", "w_k", "w_v", "w_o"):
            out.append((f"{prefix}.attn.{w}", (d, d), "weight"))
        out.append((f"{prefix}.norm1.gamma", (d,), "ones"))
        out.append((f"{prefix}.norm1.beta", (d,), "bias"))
        lin(f"{prefix}.ffn.1", d, f)
        lin(f"{prefix}.ffn.2", f, d)
        out.append((f"{prefix}.norm2.gamma", (d,), "ones"))
        out.append((f"{prefix}.norm2.beta", (d,), "bias"))

    if cfg.branches == "linear":
        lin("linear", cfg.seq_len, cfg.pred_len)
        return out
    if cfg.branches in ("dual", "series"):
        lin("series.embed", cfg.patch_len, d)
        for i in range(cfg.n_layers):
            block(f"series.layer{i}")
        lin("series.flatten", cfg.patch_num * d, d)
    if cfg.branches in ("dual", "channel"):
        lin("channel.embed", cfg.seq_len, d)
        for i in range(cfg.n_layers):
            block(f"channel.layer{i}")
    if cfg.branches == "dual":
        lin("fusion", 2 * d, d)
    lin("head.forecast", d, cfg.pred_len)
    lin("head.reconstruct", d, cfg.seq_len)
    out.append(("mask_token", (len(MASKABLE_KINDS),), "bias"))
    return out


def _init_param(rng, shape, kind, name) -> Tensor:
    if kind == "weight":
        bound = 1.0 / math.sqrt(shape[0])
        data = rng.uniform(-bound, bound, size=shape)
    elif kind == "ones":
        data = np.ones(shape)
    else:
        data = np.zeros(shape)
    return Tensor(data, requires_grad=True, name=name)


# ---------------------------------------------------------------- primitives


def patchify(z: Tensor, patch_len: int) -> Tensor:
    """``[B, L, C] -> [B, patch_num, patch_len, C]``; trailing ``L % patch_len`` steps are dropped."""
    if z.ndim != 3:
        raise tn.ShapeError(f"patchify expects [B, L, C], got {z.shape}")
    b, seq, c = z.shape
    if patch_len > seq:
        raise tn.ShapeError(f"patch_len {patch_len} exceeds sequence length {seq}")
    n = seq // patch_len
    if n * patch_len != seq:
        z = z[:, : n * patch_len, :]
    return z.reshape(b, n, patch_len, c)


def invert(z: Tensor) -> Tensor:
    """Swap the time and channel axes: ``[B, L, C] -> [B, C, L]``."""
    if z.ndim != 3:
        raise tn.ShapeError(f"invert expects a rank-3 tensor, got {z.shape}")
    return z.permute(0, 2, 1)


def multi_head_attention(
    x: Tensor,
    w_q: Tensor,
    w_k: Tensor,
    w_v: Tensor,
    w_o: Tensor,
    n_heads: int,
    return_weights: bool = False,
):
    """Self-attention over axis -2 of ``x`` (``[..., S, d]``) with ``n_heads`` heads.

    Scores are scaled by ``sqrt(d / n_heads)``.
    """
    d = x.shape[-1]
    if d % n_heads:
        raise ConfigError(f"width {d} not divisible by {n_heads} heads")
    dh = d // n_heads
    lead, s = x.shape[:-2], x.shape[-2]
    nl = len(lead)

    def heads(t):
        # [..., S, d] -> [..., H, S, dh]
        t = t.reshape(*lead, s, n_heads, dh)
        return t.permute(*range(nl), nl + 1, nl, nl + 2)

    q, k, v = heads(x @ w_q), heads(x @ w_k), heads(x @ w_v)
    kt = k.permute(*range(nl + 1), nl + 2, nl + 1)
    weights = tn.softmax((q @ kt) * (1.0 / math.sqrt(dh)), axis=-1)
    ctx = (weights @ v).permute(*range(nl), nl + 1, nl, nl + 2).reshape(*lead, s, d)
    out = ctx @ w_o
    return (out, weights.data) if return_weights else out


def _encoder_block(x: Tensor, model: SSTModel, prefix: str, rng, return_weights: bool):
    p, cfg = model.params, model.config
    training = model.training
    attn, w = multi_head_attention(
        x,
        p[f"{prefix}.attn.w_q"],
        p[f"{prefix}.attn.w_k"],
        p[f"{prefix}.attn.w_v"],
        p[f"{prefix}.attn.w_o"],
        cfg.n_heads,
        return_weights=True,
    )
    attn = tn.dropout(attn, cfg.dropout, rng, training)
    h = tn.layer_norm(x + attn, p[f"{prefix}.norm1.gamma"], p[f"{prefix}.norm1.beta"], cfg.eps_ln)
    f = tn.relu(tn.linear(h, p[f"{prefix}.ffn.1.w"], p[f"{prefix}.ffn.1.b"]))
    f = tn.dropout(f, cfg.dropout, rng, training)
    f = tn.linear(f, p[f"{prefix}.ffn.2.w"], p[f"{prefix}.ffn.2.b"])
    out = tn.layer_norm(h + f, p[f"{prefix}.norm2.gamma"], p[f"{prefix}.norm2.beta"], cfg.eps_ln)
    return (out, w) if return_weights else out


def series_attention_block(zp: Tensor, model: SSTModel, layer: int = 0, rng=None, return_weights=False):
    """One encoder block attending over patch tokens; ``zp`` is ``[B*C, patch_num, d_model]``."""
    return _encoder_block(zp, model, f"series.layer{layer}", rng, return_weights)


def channel_attention_block(zin: Tensor, model: SSTModel, layer: int = 0, rng=None, return_weights=False):
    """One encoder block attending across variate tokens; ``zin`` is ``[B, C, d_model]``."""
    return _encoder_block(zin, model, f"channel.layer{layer}", rng, return_weights)


def series_branch(x: Tensor, model: SSTModel, rng=None) -> Tensor:
    p, cfg = model.params, model.config
    b, _, c = x.shape
    n, pl, d = cfg.patch_num, cfg.patch_len, cfg.d_model
    z = patchify(x, pl).permute(0, 3, 1, 2).reshape(b * c, n, pl)
    z = tn.linear(z, p["series.embed.w"], p["series.embed.b"])
    for i in range(cfg.n_layers):
        z = series_attention_block(z, model, i, rng)
    z = z.reshape(b, c, n * d)
    return tn.linear(z, p["series.flatten.w"], p["series.flatten.b"])


def channel_branch(x: Tensor, model: SSTModel, rng=None) -> Tensor:
    p, cfg = model.params, model.config
    z = tn.linear(invert(x), p["channel.embed.w"], p["channel.embed.b"])
    for i in range(cfg.n_layers):
        z = channel_attention_block(z, model, i, rng)
    return z


def encoder_forward(x: Tensor, model: SSTModel, rng=None) -> Tensor:
    """``[B, L, C] -> [B, C, d_model]``."""
    cfg = model.config
    if x.ndim != 3 or x.shape[1] != cfg.seq_len:
        raise tn.ShapeError(f"expected input [B, {cfg.seq_len}, C], got {x.shape}")
    if cfg.branches == "series":
        return series_branch(x, model, rng)
    if cfg.branches == "channel":
        return channel_branch(x, model, rng)
    if cfg.branches != "dual":
        raise ConfigError(f"no encoder for branches={cfg.branches!r}")
    fused = tn.concat([series_branch(x, model, rng), channel_branch(x, model, rng)], axis=-1)
    return tn.linear(fused, model.params["fusion.w"], model.params["fusion.b"])


def decode_forecast(enc: Tensor, model: SSTModel, targets: Sequence[int]) -> Tensor:
    """``[B, C, d_model] -> [B, pred_len, M]`` for the ``M`` target channels."""
    if len(targets) == 0:
        raise ConfigError("no availability channels to forecast")
    p = model.params
    y = tn.linear(tn.take(enc, targets, axis=1), p["head.forecast.w"], p["head.forecast.b"])
    return y.permute(0, 2, 1)


def decode_reconstruct(enc: Tensor, model: SSTModel) -> Tensor:
    """``[B, C, d_model] -> [B, seq_len, C]``."""
    p = model.params
    return invert(tn.linear(enc, p["head.reconstruct.w"], p["head.reconstruct.b"]))


def linear_forecast(x: Tensor, model: SSTModel, targets: Sequence[int]) -> Tensor:
    if len(targets) == 0:
        raise ConfigError("no availability channels to forecast")
    z = invert(tn.take(x, targets, axis=2))
    return tn.linear(z, model.params["linear.w"], model.params["linear.b"]).permute(0, 2, 1)


# ---------------------------------------------------------------- complexity


def linear_params(d_in: int, d_out: int, bias: bool = True) -> int:
    return d_in * d_out + (d_out if bias else 0)


def count_params(model_or_config) -> int:
    cfg = model_or_config.config if isinstance(model_or_config, SSTModel) else model_or_config
    d, f = cfg.d_model, cfg.ffn_factor * cfg.d_model
    if cfg.branches == "linear":
        return linear_params(cfg.seq_len, cfg.pred_len)
    block = 4 * d * d + 2 * d + linear_params(d, f) + linear_params(f, d) + 2 * d
    total = 0
    if cfg.branches in ("dual", "series"):
        total += linear_params(cfg.patch_len, d) + cfg.n_layers * block + linear_params(cfg.patch_num * d, d)
    if cfg.branches in ("dual", "channel"):
        total += linear_params(cfg.seq_len, d) + cfg.n_layers * block
    if cfg.branches == "dual":
        total += linear_params(2 * d, d)
    total += linear_params(d, cfg.pred_len) + linear_params(d, cfg.seq_len) + len(MASKABLE_KINDS)
    return total


def matmul_macs(m: int, k: int, n: int) -> int:
    return m * k * n


def count_macs(model_or_config, batch: int = 1, n_channels: int | None = None,
               n_targets: int | None = None, mode: str = "forecast") -> int:
    """Multiply-accumulates of one forward pass (sum of m*k*n over all matmuls)."""
    cfg = model_or_config.config if isinstance(model_or_config, SSTModel) else model_or_config
    c = n_channels or cfg.n_channels
    m_out = c if n_targets is None else n_targets
    d, L, T, H = cfg.d_model, cfg.seq_len, cfg.pred_len, cfg.n_heads
    if cfg.branches == "linear":
        return batch * m_out * L * T

    def block(tokens: int, seq: int) -> int:
        # tokens = number of independent sequences, seq = their length
        rows = tokens * seq
        proj = 4 * matmul_macs(rows, d, d)
        attn = 2 * tokens * H * matmul_macs(seq, d // H, seq)
        ffn = matmul_macs(rows, d, 4 * d) + matmul_macs(rows, 4 * d, d)
        return proj + attn + ffn

    total = 0
    if cfg.branches in ("dual", "series"):
        n = cfg.patch_num
        total += matmul_macs(batch * c * n, cfg.patch_len, d)
        total += cfg.n_layers * block(batch * c, n)
        total += matmul_macs(batch * c, n * d, d)
    if cfg.branches in ("dual", "channel"):
        total += matmul_macs(batch * c, L, d)
        total += cfg.n_layers * block(batch, c)
    if cfg.branches == "dual":
        total += matmul_macs(batch * c, 2 * d, d)
    if mode == "forecast":
        total += matmul_macs(batch * m_out, d, T)
    elif mode == "pretrain":
        total += matmul_macs(batch * c, d, L)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return total


def describe(model_or_config, n_channels: int | None = None, n_targets: int | None = None) -> dict:
    model = model_or_config if isinstance(model_or_config, SSTModel) else SSTModel(model_or_config)
    groups = {g: int(sum(model.params[n].size for n in names)) for g, names in model.groups.items()}
    return {
        "config": model.config.to_dict(),
        "groups": groups,
        "params": count_params(model),
        "params_m": count_params(model) / 1e6,
        "macs_forecast": count_macs(model, 1, n_channels, n_targets, "forecast"),
        "macs_pretrain": count_macs(model, 1, n_channels, None, "pretrain"),
        "macs_g": count_macs(model, 1, n_channels, n_targets, "forecast") / 1e9,
    }
