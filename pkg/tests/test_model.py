"""Configuration, graph structure, shapes and end-to-end gradients."""

import json

import numpy as np
import pytest

from conftest import toy_config
from mcnet.engine import LayerParams, Tape, bce_loss, cce_loss, grad_check, one_hot
from mcnet.errors import ConfigError, ShapeError, WiringError
from mcnet.model import (
    CROSS_MAPPINGS,
    CrossFusion,
    ModelConfig,
    assemble_model,
    parameter_count,
    shape_audit,
)
from mcnet.model.graph import INPUT, _Builder, build_encoder_submodule


@pytest.fixture(scope="module")
def default_audit():
    return shape_audit(assemble_model(ModelConfig()))


# --- config ---------------------------------------------------------------


def test_default_widths():
    cfg = ModelConfig()
    assert cfg.encoder_widths == (72, 144, 288, 288, 576)
    assert cfg.integration_widths == (72, 144, 288, 288, 576, 576)
    assert cfg.decoder_widths == (576, 288, 288, 144, 72)
    assert (cfg.depth, cfg.input_size, cfg.strategy) == (5, 256, "full")


@pytest.mark.parametrize("kw", [
    dict(encoder_widths=(72, 144, 288, 288, 577)),
    dict(depth=6),
    dict(depth=1),
    dict(input_size=250),
    dict(integration_widths=(72, 144)),
    dict(decoder_widths=(576, 288, 288, 144)),
    dict(bn_relu_order="sideways"),
    dict(cross_mapping="random"),
])
def test_invalid_configs_rejected(kw):
    with pytest.raises(ConfigError):
        ModelConfig(**kw)


def test_illegal_cross_widths_rejected_but_allowed_without_cross():
    kw = dict(depth=2, encoder_widths=(6, 12), integration_widths=(6, 12, 12),
              decoder_widths=(6, 12), input_size=32)
    with pytest.raises(ConfigError, match="cannot be added"):
        ModelConfig(**kw)
    cfg = ModelConfig(use_cross_deconv=False, **kw)
    assert assemble_model(cfg).count("add") == 0


def test_for_depth_truncation():
    cfg = ModelConfig.for_depth(3)
    assert cfg.encoder_widths == (288, 288, 576)
    assert cfg.integration_widths == (288, 288, 576, 576)
    assert cfg.decoder_widths == (576, 288, 288)
    assert ModelConfig.for_depth(5) == ModelConfig()


def test_json_round_trip():
    cfg = ModelConfig.from_encoder_widths([24, 48, 96], input_size=64, n_classes=5,
                                          cross_mapping="aligned")
    assert ModelConfig.from_json(cfg.to_json()) == cfg
    assert json.loads(cfg.to_json())["decoder_widths"] == [96, 48, 24]


def test_from_dict_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"depth": 5, "colour": "red"})


def test_strategy_flags():
    cfg = ModelConfig()
    assert cfg.with_strategy("none").use_integration_module is False
    assert cfg.with_strategy("none").use_cross_deconv is False
    assert (cfg.with_strategy("1").use_integration_module, cfg.with_strategy("1").use_cross_deconv) == (True, False)
    assert (cfg.with_strategy("2").use_integration_module, cfg.with_strategy("2").use_cross_deconv) == (False, True)
    with pytest.raises(ConfigError):
        cfg.with_strategy("3")


# --- encoder / integration / decoder shapes ------------------------------


def test_encoder_stage1_default(default_audit):
    s = default_audit.shapes
    for k in (2, 3, 4):
        assert s[f"enc1.k{k}.bn"] == (1, 24, 256, 256)
    assert s["enc1.concat"] == (1, 72, 256, 256)
    assert s["enc1.pool"] == (1, 72, 128, 128)
    assert s["enc5.pool"] == (1, 576, 8, 8)


def test_encoder_toy_branches():
    model = assemble_model(toy_config())
    shapes = model.infer_shapes((1, 1, 32, 32))
    for k in (2, 3, 4):
        assert shapes[f"enc1.k{k}.conv"][1] == 2


def test_encoder_rejects_width_not_divisible_by_three():
    cfg = toy_config()
    b = _Builder(cfg)
    object.__setattr__(cfg, "encoder_widths", (7, 6))
    with pytest.raises(ShapeError, match="divisible by 3"):
        build_encoder_submodule(b, 1, INPUT)


def test_integration_pool_sizes_default(default_audit):
    assert ModelConfig().integration_pool_sizes() == [16, 8, 4, 2, 1, 32]
    assert default_audit.integration_pool_sizes == [16, 8, 4, 2, 1, 32]
    assert default_audit.integration_output == (1, 1944, 8, 8)


def test_integration_pool_sizes_depth2_input32():
    cfg = toy_config()
    assert cfg.bottleneck == 8
    assert cfg.integration_pool_sizes() == [2, 1, 4]


def test_decoder_stage_shapes(default_audit):
    s = default_audit.shapes
    assert s["dec1.up"] == (1, 1944, 16, 16)
    for k in (2, 3, 4):
        assert s[f"dec1.k{k}.bn"] == (1, 192, 16, 16)
        assert s[f"enc5.k{k}.bn"] == (1, 192, 16, 16)
    assert s["dec1.refine.bn"] == (1, 576, 16, 16)
    assert s["dec5.refine.bn"] == (1, 72, 256, 256)
    assert s["enc1.k2.bn"] == (1, 24, 256, 256)
    fusions = [f for f, _, _ in default_audit.cross_adds if f.decoder_stage == 5]
    assert {f.encoder_stage for f in fusions} == {1}


def test_cyclic_cross_table():
    model = assemble_model(toy_config())
    stage1 = [f for f in model.cross_table if f.decoder_stage == 1]
    assert stage1 == [CrossFusion(2, 2, 1, 3), CrossFusion(2, 3, 1, 4), CrossFusion(2, 4, 1, 2)]


@pytest.mark.parametrize("mapping", sorted(CROSS_MAPPINGS))
def test_every_mapping_is_a_bijection(mapping):
    model = assemble_model(toy_config(cross_mapping=mapping))
    for stage in (1, 2):
        fs = [f for f in model.cross_table if f.decoder_stage == stage]
        assert sorted(f.encoder_kernel for f in fs) == [2, 3, 4]
        assert sorted(f.decoder_kernel for f in fs) == [2, 3, 4]
    assert CROSS_MAPPINGS["cyclic"] == {2: 3, 3: 4, 4: 2}


def test_wiring_error_names_the_quadruple():
    b = _Builder(toy_config())
    b.meta["a"] = (2, 16)
    b.meta["b"] = (4, 16)
    with pytest.raises(WiringError, match=r"encoder 1 k2 -> decoder 2 k3"):
        b.add("bad", "a", "b", CrossFusion(1, 2, 2, 3))


def test_bn_relu_order_option():
    relu_first = assemble_model(toy_config())
    bn_first = assemble_model(toy_config(bn_relu_order="bn_then_relu"))
    assert relu_first.node("enc1.k2.bn").inputs == ("enc1.k2.relu",)
    assert bn_first.node("enc1.k2.relu").inputs == ("enc1.k2.bn",)


def test_integration_has_relu_only_by_default():
    model = assemble_model(toy_config())
    assert model.node("integ1.relu").inputs == ("integ1.conv",)
    assert not any(n.name.startswith("integ") and n.kind == "bn" for n in model.nodes)
    bare = assemble_model(toy_config(integration_activation="none"))
    assert bare.node("integ1.pool").inputs == ("integ1.conv",)


# --- invariants -----------------------------------------------------------


@pytest.mark.parametrize("depth", [2, 3, 4, 5])
def test_resolution_ladder(depth):
    cfg = ModelConfig.for_depth(depth)
    report = shape_audit(assemble_model(cfg))
    for i, shape in enumerate(report.encoder_pooled, start=1):
        assert shape[2:] == (256 // 2 ** i,) * 2
        assert report.shapes[f"enc{i}.concat"][2] == 256 // 2 ** (i - 1)
    bottleneck = cfg.bottleneck
    for j, shape in enumerate(report.decoder_outputs, start=1):
        assert shape[2] == bottleneck * 2 ** j
    assert report.decoder_outputs[-1][2] == 256
    # integration branches all land at the bottleneck
    for name, shape in report.shapes.items():
        if name.startswith("integ") and name.endswith(".pool"):
            assert shape[2:] == (bottleneck, bottleneck)
    assert report.integration_output[1] == sum(cfg.integration_widths)
    assert report.cross_adds_legal
    assert report.total_params == sum(r.n_params for r in report.rows)


def test_ablation_structure():
    base = toy_config()
    full = assemble_model(base)
    s1 = assemble_model(base.with_strategy("1"))
    s2 = assemble_model(base.with_strategy("2"))
    none = assemble_model(base.with_strategy("none"))

    def integ(m):
        return sum(1 for n in m.nodes if n.name.startswith("integ"))

    assert full.count("add") > 0 and integ(full) > 0
    assert s1.count("add") == 0 and integ(s1) > 0
    assert s2.count("add") > 0 and integ(s2) == 0
    assert none.count("add") == 0 and integ(none) == 0
    assert s1.parameter_count() < full.parameter_count()
    assert none.parameter_count() < full.parameter_count()


def test_parameter_count_closed_form():
    p = LayerParams.he_normal(5, 3, 1, 1, np.random.default_rng(0))
    assert p.n_params == 20
    model = assemble_model(toy_config())
    assert parameter_count(model) == sum(p.n_params for p in model.parameters())


def test_affine_bn_adds_parameters():
    plain = assemble_model(toy_config())
    affine = assemble_model(toy_config(affine_bn=True))
    n_bn_channels = sum(n.bn.channels for n in plain.nodes if n.bn is not None)
    assert affine.parameter_count() == plain.parameter_count() + 2 * n_bn_channels


def test_graph_is_acyclic_with_single_output():
    model = assemble_model(toy_config())
    seen = {INPUT}
    consumed = set()
    for n in model.nodes:
        assert all(s in seen for s in n.inputs)
        consumed.update(n.inputs)
        seen.add(n.name)
    sinks = [n.name for n in model.nodes if n.name not in consumed]
    assert sinks == [model.output]


# --- forward --------------------------------------------------------------


def test_binary_forward_range(rng):
    model = assemble_model(toy_config())
    out = model.forward(rng.random((2, 1, 32, 32)), mode="eval").data
    assert out.shape == (2, 1, 32, 32)
    assert np.all((out > 0) & (out < 1))


def test_default_binary_output_shape():
    model = assemble_model(ModelConfig())
    assert model.infer_shapes((2, 1, 256, 256))[model.output] == (2, 1, 256, 256)


def test_multimodal_softmax(rng):
    model = assemble_model(toy_config(in_channels=4, n_classes=4))
    out = model.forward(rng.random((2, 4, 32, 32))).data
    assert out.shape == (2, 4, 32, 32)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)


def test_forward_deterministic(rng):
    x = rng.random((2, 1, 32, 32))
    a = assemble_model(toy_config()).forward(x).data
    b = assemble_model(toy_config()).forward(x).data
    np.testing.assert_array_equal(a, b)


def test_wrong_input_shape_rejected(rng):
    model = assemble_model(toy_config())
    with pytest.raises(ShapeError, match=r"\(N, 1, 32, 32\)"):
        model.forward(rng.random((1, 1, 16, 16)))
    with pytest.raises(ShapeError):
        model.forward(rng.random((1, 2, 32, 32)))


def test_eval_mode_is_pure(rng):
    model = assemble_model(toy_config())
    model.forward(rng.random((2, 1, 32, 32)), mode="train")
    stats = [a.copy() for _, a in model.state_arrays()]
    x = rng.random((2, 1, 32, 32))
    with Tape() as tape:
        a = model.forward(x, mode="eval").data
    b = model.forward(x, mode="eval").data
    np.testing.assert_array_equal(a, b)
    assert len(tape) == 0
    for before, (_, after) in zip(stats, model.state_arrays()):
        np.testing.assert_array_equal(before, after)


def test_train_mode_records_and_updates_running_stats(rng):
    model = assemble_model(toy_config())
    before = model.node("enc1.k2.bn").bn.running_mean.copy()
    with Tape() as tape:
        model.forward(rng.random((2, 1, 32, 32)), mode="train")
    assert len(tape) > 0
    assert not np.array_equal(before, model.node("enc1.k2.bn").bn.running_mean)


# --- end-to-end gradients -------------------------------------------------


def _toy_loss(model, x, y, kind="bce"):
    pred = model.forward(x)
    return bce_loss(pred, y) if kind == "bce" else cce_loss(pred, y)


@pytest.mark.parametrize("strategy", ["full", "1", "2", "none"])
def test_every_parameter_gets_nonzero_gradient(rng, strategy):
    model = assemble_model(toy_config().with_strategy(strategy))
    x = rng.random((2, 1, 32, 32))
    y = (rng.random((2, 1, 32, 32)) > 0.5).astype(np.float64)
    with Tape() as tape:
        loss = _toy_loss(model, x, y)
    tape.backward(loss)
    for name, p in model.named_parameters():
        assert p.weight.grad is not None and np.abs(p.weight.grad).max() > 0, name
        assert p.bias.grad is not None, name


def test_toy_model_gradcheck_20_samples(rng):
    model = assemble_model(toy_config())
    x = rng.random((2, 1, 32, 32))
    y = (rng.random((2, 1, 32, 32)) > 0.5).astype(np.float64)

    def build():
        tensors = []
        for name, p in model.named_parameters():
            tensors += [(f"{name}.weight", p.weight), (f"{name}.bias", p.bias)]
        return (lambda: _toy_loss(model, x, y)), tensors

    report = grad_check(build, n_samples=20, h=1e-5, tol=1e-3, seed=3)
    assert report.passed, report.summary()


def test_multiclass_gradcheck(rng):
    model = assemble_model(toy_config(n_classes=3, bn_relu_order="bn_then_relu",
                                      cross_mapping="anticyclic"))
    x = rng.random((2, 1, 32, 32))
    y = one_hot(rng.integers(0, 3, (2, 32, 32)), 3, np.float64)

    def build():
        tensors = []
        for name, p in model.named_parameters():
            tensors += [(f"{name}.weight", p.weight), (f"{name}.bias", p.bias)]
        return (lambda: _toy_loss(model, x, y, "cce")), tensors

    report = grad_check(build, n_samples=20, h=1e-5, tol=1e-3, seed=5)
    assert report.passed, report.summary()
