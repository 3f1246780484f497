import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from sst_parking import tensor as tn
from sst_parking.model import (
    ConfigError,
    ModelConfig,
    SSTModel,
    TimeFeatureSpec,
    channel_attention_block,
    count_macs,
    count_params,
    describe,
    encode_time_features,
    encoder_forward,
    invert,
    linear_params,
    matmul_macs,
    patchify,
    series_branch,
)
from sst_parking.pipeline import PipelineError
from sst_parking.tensor import Tensor

from .oracles import model_gradient_errors


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=3, max_dims=3, max_side=7), elements=st.floats(-1e6, 1e6)))
def test_invert_is_an_involution(z):
    t = Tensor(z)
    assert np.array_equal(invert(invert(t)).data, z)
    assert invert(t).shape == (z.shape[0], z.shape[2], z.shape[1])


@given(st.integers(1, 3), st.integers(1, 40), st.integers(1, 4), st.data())
def test_patchify_partitions_the_series(b, seq, c, data):
    pl = data.draw(st.integers(1, seq))
    z = np.random.default_rng(seq).normal(size=(b, seq, c))
    p = patchify(Tensor(z), pl).data
    n = seq // pl
    assert p.shape == (b, n, pl, c)
    # concatenating the patches restores the first n*pl steps in order, no overlap
    assert np.array_equal(p.reshape(b, n * pl, c), z[:, : n * pl])


def test_patchify_rejects_long_patch():
    with pytest.raises(tn.ShapeError):
        patchify(Tensor(np.ones((1, 4, 2))), 5)


@given(st.integers(0, 10_000))
def test_channel_attention_is_permutation_equivariant(seed):
    model = SSTModel(ModelConfig(seq_len=24, pred_len=8, d_model=16, n_heads=2, n_layers=1, patch_len=4, dropout=0.0), seed % 7)
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(2, 6, 16))
    perm = rng.permutation(6)
    a = channel_attention_block(Tensor(z), model).data[:, perm]
    b = channel_attention_block(Tensor(z[:, perm]), model).data
    assert np.abs(a - b).max() <= 1e-12


def test_series_branch_is_channel_independent(toy_model):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 24, 6))
    full = series_branch(Tensor(x), toy_model).data
    x2 = x.copy()
    x2[:, :, 3] += 5.0
    other = series_branch(Tensor(x2), toy_model).data
    changed = np.abs(full - other).max(axis=(0, 2)) > 0
    assert changed.tolist() == [False, False, False, True, False, False]


def test_whole_encoder_is_permutation_equivariant(toy_model):
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 24, 6))
    perm = rng.permutation(6)
    a = encoder_forward(Tensor(x), toy_model).data[:, perm]
    b = encoder_forward(Tensor(x[:, :, perm]), toy_model).data
    assert np.abs(a - b).max() <= 1e-12


@pytest.mark.parametrize("branches", ["dual", "channel", "series", "linear"])
def test_output_shapes(branches):
    cfg = ModelConfig(seq_len=24, pred_len=8, d_model=16, n_heads=2, n_layers=2, patch_len=5, branches=branches)
    model = SSTModel(cfg)
    x = Tensor(np.random.default_rng(0).normal(size=(3, 24, 7)))
    assert model.forecast(x, [0, 4]).shape == (3, 8, 2)
    if branches != "linear":
        assert model.reconstruct(x).shape == (3, 24, 7)
    else:
        with pytest.raises(ConfigError):
            model.reconstruct(x)


def test_wrong_window_length_rejected(toy_model):
    with pytest.raises(tn.ShapeError):
        toy_model.forecast(Tensor(np.ones((1, 23, 6))), [0])


@pytest.mark.parametrize("branches", ["dual", "channel", "series", "linear"])
@pytest.mark.parametrize("layers", [0, 1, 2])
def test_param_count_matches_closed_form(branches, layers):
    cfg = ModelConfig(seq_len=30, pred_len=12, d_model=8, n_heads=2, n_layers=layers, patch_len=7, branches=branches)
    model = SSTModel(cfg)
    assert count_params(cfg) == sum(p.size for p in model.parameters())


@pytest.mark.parametrize("branches", ["dual", "channel", "series", "linear"])
@pytest.mark.parametrize("mode", ["forecast", "pretrain"])
def test_mac_count_matches_instrumented_forward(branches, mode):
    if branches == "linear" and mode == "pretrain":
        return
    cfg = ModelConfig(seq_len=30, pred_len=12, d_model=8, n_heads=2, n_layers=2, patch_len=7, branches=branches)
    model = SSTModel(cfg)
    x = Tensor(np.ones((3, 30, 5)))
    with tn.count_matmul_macs() as box:
        if mode == "forecast":
            model.forecast(x, [1, 2])
        else:
            model.reconstruct(x)
    assert box[0] == count_macs(cfg, batch=3, n_channels=5, n_targets=2, mode=mode)


@given(st.integers(1, 500), st.integers(1, 500), st.booleans())
def test_linear_param_closed_form(i, o, bias):
    assert linear_params(i, o, bias) == i * o + (o if bias else 0)


@given(st.integers(1, 100), st.integers(1, 100), st.integers(1, 100))
def test_matmul_macs_closed_form(m, k, n):
    assert matmul_macs(m, k, n) == m * k * n
    with tn.count_matmul_macs() as box:
        Tensor(np.ones((m, k))) @ Tensor(np.ones((k, n)))
    assert box[0] == m * k * n


def test_parameter_groups_named_after_modules(toy_model):
    groups = toy_model.groups
    assert groups["series_attn"] == [f"series.layer0.attn.{w}" for w in ("w_q", "w_k", "w_v", "w_o")]
    assert groups["channel_attn"] == [f"channel.layer0.attn.{w}" for w in ("w_q", "w_k", "w_v", "w_o")]
    assert groups["head_forecast"] == ["head.forecast.w", "head.forecast.b"]
    assert sum(len(v) for v in groups.values()) == len(toy_model.params)


def test_full_model_gradient_check(toy_cfg):
    model = SSTModel(toy_cfg, seed=2)
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 24, 6))
    y = rng.normal(size=(2, 8, 2))
    errors = model_gradient_errors(model, x, y, [0, 3])
    assert max(errors.values()) < 1e-3, sorted(errors.items(), key=lambda kv: -kv[1])[:3]


def test_state_roundtrip_via_checkpoint(tmp_path, toy_model):
    x = Tensor(np.random.default_rng(0).normal(size=(2, 24, 6)))
    path = toy_model.save(tmp_path / "toy.ckpt", {"note": "x"})
    loaded, meta = SSTModel.load(path)
    assert meta["note"] == "x"
    assert np.array_equal(loaded.forecast(x, [1]).data, toy_model.forecast(x, [1]).data)


def test_load_state_dict_shape_mismatch(toy_model):
    state = toy_model.state_dict()
    state["head.forecast.w"] = np.zeros((16, 3))
    with pytest.raises(tn.ShapeError):
        toy_model.load_state_dict(state)
    toy_model.load_state_dict(state, strict=False)


def test_reset_forecast_head_changes_only_head(toy_model):
    before = toy_model.state_dict()
    toy_model.reset_forecast_head(12)
    assert toy_model.params["head.forecast.w"].shape == (16, 12)
    for n, v in before.items():
        if not n.startswith("head.forecast"):
            assert np.array_equal(toy_model.params[n].data, v)


@pytest.mark.parametrize(
    "kw",
    [dict(d_model=10, n_heads=3), dict(patch_len=0), dict(seq_len=4, patch_len=8), dict(dropout=1.0), dict(branches="x")],
)
def test_invalid_configs(kw):
    with pytest.raises(ConfigError):
        ModelConfig(**kw)


def test_time_features_are_periodic_and_checked():
    idx = pd.date_range("2021-09-06", periods=144 * 8, freq="10min")
    enc = encode_time_features(idx, TimeFeatureSpec(("hour", "dayofweek")))
    assert enc.shape == (len(idx), 4)
    np.testing.assert_allclose(enc[:144, :2], enc[144:288, :2], atol=1e-12)
    np.testing.assert_allclose(enc[0, 2:], enc[144 * 7, 2:], atol=1e-12)
    np.testing.assert_allclose((enc[:, ::2] ** 2 + enc[:, 1::2] ** 2), 1.0, atol=1e-12)
    with pytest.raises(PipelineError):
        encode_time_features(idx[[0, 1, 3]])
    with pytest.raises(ConfigError):
        TimeFeatureSpec(("weather",))


def test_describe_reports_counts(toy_cfg):
    info = describe(toy_cfg, n_channels=6, n_targets=2)
    assert info["params"] == count_params(toy_cfg)
    assert info["macs_forecast"] == count_macs(toy_cfg, 1, 6, 2)
    assert sum(info["groups"].values()) == info["params"]
