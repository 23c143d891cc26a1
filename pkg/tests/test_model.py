import numpy as np
import pytest

from facelivt import (
    MhlaBlock,
    ModelConfig,
    ShapeError,
    build_model,
    cosine_similarity,
    cost_report,
    count_flops,
    count_params,
    forward,
    instrumented_flop_count,
    load_config,
    mhla_complexity,
    mhsa_complexity,
    reparameterize_model,
    save_config,
    variant_config,
)
from facelivt.archive import model_to_entries

from conftest import identity_model, rng


# ---------------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------------


def test_variant_presets():
    s = variant_config("s")
    assert s.stage_dims == (40, 80, 160, 320)
    assert s.stage_blocks == (2, 4, 6, 2)
    assert s.stage_mixers[2:] == ("mhsa", "mhsa")
    m = variant_config("m")
    assert m.stage_dims == (64, 128, 256, 512)
    assert variant_config("s-li").stage_mixers[2:] == ("mhla", "mhla")
    assert variant_config("m-li").stage_resolutions == (28, 14, 7, 4)


def test_unknown_variant():
    with pytest.raises(KeyError):
        variant_config("xxl")


def test_config_rejects_bad_mixer():
    with pytest.raises(ValueError, match="mixer"):
        ModelConfig(variant="x", stage_dims=(8, 8, 8, 8), stage_mixers=("pool",) * 4, heads=2)


def test_config_rejects_indivisible_heads():
    with pytest.raises(ValueError, match="heads"):
        ModelConfig(variant="x", stage_dims=(8, 8, 12, 8), heads=8)


def test_config_rejects_broken_resolution_chain():
    with pytest.raises(ValueError, match="stride-2"):
        ModelConfig(variant="x", stage_dims=(8, 8, 8, 8), heads=4, stage_resolutions=(28, 14, 8, 4))


def test_config_file_round_trip(tmp_path):
    config = variant_config("s-li")
    path = tmp_path / "roundtrip.cfg"
    save_config(config, path)
    assert load_config(path) == config


@pytest.mark.parametrize("name", ["s", "m", "s-li", "m-li"])
def test_shipped_config_files_match_presets(name):
    from pathlib import Path

    shipped = Path(__file__).resolve().parent.parent / "configs" / f"{name}.cfg"
    assert load_config(shipped) == variant_config(name)


# ---------------------------------------------------------------------------
# builder
# ---------------------------------------------------------------------------


def test_build_mhla_token_counts():
    model = build_model(variant_config("s-li"), seed=0)
    stage3 = model.stages[2][0].mixer
    stage4 = model.stages[3][0].mixer
    assert isinstance(stage3, MhlaBlock) and stage3.token_count == 49
    assert isinstance(stage4, MhlaBlock) and stage4.token_count == 16


def test_build_is_deterministic(tiny_config):
    a = build_model(tiny_config, seed=11)
    b = build_model(tiny_config, seed=11)
    for (name_a, arr_a), (name_b, arr_b) in zip(model_to_entries(a), model_to_entries(b)):
        assert name_a == name_b
        np.testing.assert_array_equal(arr_a, arr_b)
    c = build_model(tiny_config, seed=12)
    assert any(
        not np.array_equal(x[1], y[1]) for x, y in zip(model_to_entries(a), model_to_entries(c))
    )


def test_build_determinism_extends_to_outputs(tiny_config):
    a = build_model(tiny_config, seed=13)
    b = build_model(tiny_config, seed=13)
    assert cost_report(a).total_params == cost_report(b).total_params
    x = rng(0).uniform(-1, 1, (1, 3, 112, 112)).astype(np.float32)
    np.testing.assert_array_equal(forward(a, x), forward(b, x))


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def test_forward_zero_image_identity_model(tiny_config):
    model = identity_model(tiny_config)
    out = forward(model, np.zeros((1, 3, 112, 112), np.float32))
    np.testing.assert_array_equal(out, np.zeros(512, np.float32))


def test_forward_embedding_width(tiny_config):
    model = build_model(tiny_config, seed=1)
    x = rng(1).uniform(-1, 1, (1, 3, 112, 112)).astype(np.float32)
    assert forward(model, x).shape == (512,)


def test_forward_rejects_wrong_shape(tiny_config):
    model = build_model(tiny_config, seed=2)
    with pytest.raises(ShapeError, match="input"):
        forward(model, np.zeros((1, 3, 96, 96), np.float32))
    with pytest.raises(ShapeError, match="input"):
        forward(model, np.zeros((2, 3, 112, 112), np.float32))


def test_stage_shape_pipeline(tiny_config):
    # The forward pass itself asserts each stage's spatial size; a mismatch
    # between builder and schedule would raise.
    model = build_model(tiny_config, seed=3)
    from facelivt.blocks import repmix_forward
    from facelivt.ops import batchnorm, conv2d, gelu

    x = rng(2).uniform(-1, 1, (1, 3, 112, 112)).astype(np.float32)

    for layer in model.stem:
        x = gelu(batchnorm(conv2d(x, layer.conv), layer.bn))
    assert x.shape[2:] == (28, 28)
    for stage in range(4):
        if stage > 0:
            x = repmix_forward(model.downsamplers[stage - 1], x)
        assert x.shape[2:] == (model.config.stage_resolutions[stage],) * 2


def test_train_deploy_cosine(tiny_config):
    model = build_model(tiny_config, seed=4)
    deploy, _ = reparameterize_model(model, probes=0)
    x = rng(3).uniform(-1, 1, (1, 3, 112, 112)).astype(np.float32)
    assert cosine_similarity(forward(model, x), forward(deploy, x)) >= 0.9999


def test_cosine_similarity_basics():
    v = np.array([1.0, 2.0, -3.0])
    assert cosine_similarity(v, v) == pytest.approx(1.0, abs=1e-12)
    assert cosine_similarity(v, -v) == pytest.approx(-1.0, abs=1e-12)
    with pytest.raises(ValueError):
        cosine_similarity(v, np.zeros(3))


# ---------------------------------------------------------------------------
# complexity formulas
# ---------------------------------------------------------------------------


def test_mhla_complexity_values():
    assert mhla_complexity(49, 160, 4) == 2 * 49 * (49 * 4) * 160 == 3_073_280
    assert mhla_complexity(49, 0, 4) == 0
    assert mhla_complexity(10, 8, 0) == 0
    assert mhla_complexity(10, 16, 2) == 2 * mhla_complexity(10, 8, 2)


def test_mhsa_complexity_values():
    assert mhsa_complexity(49, 160) == 4 * 49 * 160**2 + 2 * 49**2 * 160 == 5_785_920
    assert mhsa_complexity(1, 1) == 6


def test_attention_complexity_comparison_on_stage_shapes():
    # Evaluated, not presumed: record which mixer is cheaper per shape.
    shapes = [(49, 160), (49, 256), (16, 320), (16, 512)]
    winners = {}
    for n, c in shapes:
        la, sa = mhla_complexity(n, c, 4), mhsa_complexity(n, c)
        winners[(n, c)] = "mhla" if la < sa else "mhsa"
        print(f"tokens={n} channels={c}: mhla={la} mhsa={sa} -> cheaper: {winners[(n, c)]}")
    # With r=4 the linear mixer wins every stage-3/4 shape of the variants.
    assert set(winners.values()) == {"mhla"}


# ---------------------------------------------------------------------------
# cost model
# ---------------------------------------------------------------------------


def test_single_depthwise_layer_param_count():
    from facelivt.ops import ConvSpec

    spec = ConvSpec(
        weight=np.zeros((40, 1, 3, 3), np.float32),
        bias=np.zeros(40, np.float32),
        padding=1,
        groups=40,
    )
    assert spec.param_count == 40 * 9 + 40 == 400


def test_pointwise_conv_flop_convention():
    # 1x1 conv, 40 -> 40 channels at 28x28, dense: one MAC per weight-pixel.
    from facelivt.model import _conv_flops
    from facelivt.ops import ConvSpec

    spec = ConvSpec(weight=np.zeros((40, 40, 1, 1), np.float32), bias=np.zeros(40, np.float32))
    assert _conv_flops(spec, 28) == 40 * 40 * 28 * 28


@pytest.mark.parametrize("name", ["s", "m", "s-li", "m-li"])
def test_deploy_params_below_train_params(name):
    config = variant_config(name)
    train = count_params(config, form="train")
    deploy = count_params(config, form="deploy")
    assert deploy.total_params < train.total_params
    assert deploy.total_flops < train.total_flops


def test_cost_rows_sum_to_totals(tiny_config):
    report = cost_report(build_model(tiny_config, seed=5))
    assert sum(p for _, p, _ in report.per_stage) == report.total_params
    assert sum(f for _, _, f in report.per_stage) == report.total_flops
    assert sum(p for _, p, _ in report.per_kind) == report.total_params


def test_cost_monotone_in_config_dimensions():
    base = ModelConfig(variant="x", stage_dims=(8, 16, 16, 32), heads=4)
    base_flops = count_flops(base).total_flops
    wider = ModelConfig(variant="x", stage_dims=(8, 16, 32, 32), heads=4)
    deeper = ModelConfig(variant="x", stage_dims=(8, 16, 16, 32), heads=4, stage_blocks=(2, 4, 8, 2))
    fatter = ModelConfig(variant="x", stage_dims=(8, 16, 16, 32), heads=4, mlp_expansion=4)
    wider_mhla = ModelConfig(variant="x", stage_dims=(8, 16, 16, 32), heads=4, mhla_expansion=6)
    for config in (wider, deeper, fatter, wider_mhla):
        assert count_flops(config).total_flops > base_flops


def test_analytic_mhla_block_flops_equal_formula(tiny_config):
    model = build_model(tiny_config, seed=6)
    report = cost_report(model)
    mhla_total = sum(f for kind, _, f in report.per_kind if kind == "mhla")
    expected = 0
    for stage in (2, 3):
        n = tiny_config.token_count(stage)
        c = tiny_config.stage_dims[stage]
        expected += tiny_config.stage_blocks[stage] * mhla_complexity(n, c, tiny_config.mhla_expansion)
    assert mhla_total == expected


def test_analytic_mhsa_block_flops_equal_formula():
    config = ModelConfig(
        variant="x",
        stage_dims=(8, 16, 16, 32),
        heads=4,
        stage_mixers=("repmix", "repmix", "mhsa", "mhsa"),
    )
    report = cost_report(config)
    mhsa_total = sum(f for kind, _, f in report.per_kind if kind == "mhsa")
    expected = sum(
        config.stage_blocks[s] * mhsa_complexity(config.token_count(s), config.stage_dims[s])
        for s in (2, 3)
    )
    assert mhsa_total == expected


def test_instrumented_count_equals_analytic(tiny_config):
    model = build_model(tiny_config, seed=7)
    x = rng(4).uniform(-1, 1, (1, 3, 112, 112)).astype(np.float32)
    assert instrumented_flop_count(model, x) == cost_report(model).total_flops
    deploy, _ = reparameterize_model(model, probes=0)
    assert instrumented_flop_count(deploy, x) == cost_report(deploy).total_flops


def test_instrumented_count_deterministic(tiny_config):
    model = build_model(tiny_config, seed=8)
    x = rng(5).uniform(-1, 1, (1, 3, 112, 112)).astype(np.float32)
    assert instrumented_flop_count(model, x) == instrumented_flop_count(model, x)


def test_instrumented_single_linear_layer():
    from facelivt.ops import count_macs, linear

    g = rng(6)
    x = g.uniform(-1, 1, (3, 7)).astype(np.float32)
    w = g.uniform(-1, 1, (7, 2)).astype(np.float32)
    with count_macs() as counter:
        linear(x, w)
    assert counter.total == 3 * 7 * 2
