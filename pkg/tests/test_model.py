import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stcgat import substrate as S
from stcgat.causal_gru import unroll
from stcgat.errors import ConfigError, ContractError, DimensionError, NumericError
from stcgat.gradcheck import tiny_config
from stcgat.model import (ABLATIONS, STCGAT, ModelConfig, apply_ablation, count_parameters, l1_loss,
                          predefined_adjacency)
from stcgat.reference import reference_forward
from stcgat.substrate import Parameter, Tensor

from fdcheck import check

EDGES = [(0, 1), (1, 2), (2, 3), (0, 3)]


def build(config):
    adj = predefined_adjacency(EDGES, config.n_nodes) if config.no_node_embedding else None
    return STCGAT(config, adjacency=adj)


def expected_count(n, f, t, d, h, q, f3, levels=4, kernel=2, embed=True, resnet=True, reverse=True, tcn=True):
    """Layer-by-layer tally, written independently of the model code."""
    f_in = f + h
    per_gate = {
        "layer embedding": n * d if embed else 0,
        "head pools": q * (d if embed else 1) * f_in * h,
        "head attention": q * 2 * h,
        "out embedding": n * d if embed else 0,
        "out pool": (d if embed else 1) * (q * h) * h,
        "out attention": 2 * h,
    }
    per_direction = 3 * sum(per_gate.values()) + ((f * h + h * h) if resnet else 0)
    dirs = 2 if reverse else 1
    c = dirs * h
    tcn_total = levels * 2 * (c * c * kernel + c) if tcn else 0
    head = (t * c) * f3 + f3 + f3 * (t * f) + t * f
    return dirs * per_direction + tcn_total + head


# ------------------------------------------------------------- config

def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(n_nodes=0)
    with pytest.raises(ConfigError):
        ModelConfig(n_nodes=3, dropout=1.0)
    with pytest.raises(ConfigError):
        ModelConfig(n_nodes=3, dtype="float16")


def test_config_text_round_trip():
    cfg = ModelConfig(n_nodes=7, lr=3e-4, no_tcn=True, dropout=0.25)
    back = ModelConfig.parse(cfg.canonical())
    assert back == cfg and back.digest() == cfg.digest()
    assert "no_tcn=true" in cfg.canonical()


def test_config_parse_accepts_kebab_keys_and_rejects_unknown():
    assert ModelConfig.parse("n-nodes=4\nhead-hidden=32\n").head_hidden == 32
    with pytest.raises(ConfigError):
        ModelConfig.parse("n_nodes=4\nwidth=3\n")
    with pytest.raises(ConfigError):
        ModelConfig.parse("n_nodes=four\n")


def test_apply_ablation():
    cfg = apply_ablation(ModelConfig(n_nodes=3), "no_tcn", "no_resnet")
    assert cfg.ablations == ["no_resnet", "no_tcn"]
    with pytest.raises(ConfigError):
        apply_ablation(cfg, "no_attention")


def test_predefined_adjacency_row_normalised_with_self_loops():
    adj = predefined_adjacency([(0, 1), (1, 0)], 3)
    np.testing.assert_allclose(adj, [[0.5, 0.5, 0], [0.5, 0.5, 0], [0, 0, 1]])


# ------------------------------------------------------------- forward

def test_output_shape_matches_target_shape():
    cfg = ModelConfig(n_nodes=4, hidden=8, heads=2, head_hidden=16, embed_dim=3)
    model = STCGAT(cfg)
    x = np.random.default_rng(0).normal(size=(2, 4, 12, 1))
    assert model.forward(x).shape == (2, 4, 12, 1)


def test_bad_input_shape_is_dimension_error():
    model = STCGAT(tiny_config())
    with pytest.raises(DimensionError):
        model.forward(np.zeros((2, 4, 5, 1)))


def test_zero_parameters_output_b2():
    model = STCGAT(tiny_config())
    rng = np.random.default_rng(1)
    for p in model.params:
        if p.name.endswith(".v"):
            continue  # direction of a weight-normed filter; g = 0 zeroes the filter
        p.data = np.zeros_like(p.data)
    b2 = rng.normal(size=model.params["head.b2"].shape)
    model.params["head.b2"].data = b2
    out = model.forward(rng.normal(size=(2, 4, 6, 1))).data
    np.testing.assert_array_equal(out, np.broadcast_to(b2.reshape(1, 1, 6, 1), (2, 4, 6, 1)))


@pytest.mark.parametrize("flags", [(), ("no_node_embedding",), ("no_resnet",), ("no_reverse_gru",),
                                   ("no_tcn",), ABLATIONS])
def test_forward_matches_straight_line_reference(flags):
    cfg = apply_ablation(tiny_config(), *flags)
    model = build(cfg)
    x = np.random.default_rng(2).uniform(-1, 1, (3, 4, 6, 1))
    prm = {p.name: p.data[None] for p in model.params}
    ref = reference_forward(prm, cfg, x, model.adjacency)[0]
    np.testing.assert_allclose(model.forward(x).data, ref, rtol=0, atol=1e-10)


def test_every_input_element_reaches_the_output():
    model = STCGAT(tiny_config())
    rng = np.random.default_rng(3)
    x = rng.uniform(-1, 1, (1, 4, 6, 1))
    base = model.forward(x).data
    for idx in np.ndindex(x.shape):
        x2 = x.copy()
        x2[idx] += 0.5
        assert not np.array_equal(model.forward(x2).data, base), idx


def test_float32_training_mode():
    cfg = ModelConfig(n_nodes=4, window=6, hidden=8, heads=2, head_hidden=16, embed_dim=4)
    model = STCGAT(cfg)
    assert all(p.dtype == np.float32 for p in model.params)
    out = model.forward(np.ones((2, 4, 6, 1)), training=True, rng=np.random.default_rng(0))
    assert out.dtype == np.float32


def test_non_finite_forward_names_the_layer():
    model = STCGAT(tiny_config())
    model.params["head.b2"].data[0] = np.nan
    with pytest.raises(NumericError, match="head"):
        model.forward(np.ones((1, 4, 6, 1)))


def test_parameter_names_are_unique_paths():
    model = STCGAT(tiny_config())
    names = model.params.names()
    assert len(names) == len(set(names))
    assert "fwd_gru.gate_z.embedding" in names and "tcn.block3.conv2.g" in names
    with pytest.raises(ConfigError):
        model.params.add("head.w1", np.zeros(1))


# ------------------------------------------------------------- ablations

@pytest.mark.parametrize("flags", [c for r in range(5) for c in itertools.combinations(ABLATIONS, r)])
def test_parameter_count_closed_form(flags):
    cfg = apply_ablation(ModelConfig(n_nodes=4, window=6, hidden=8, heads=2, embed_dim=4, head_hidden=16,
                                     dtype="float64"), *flags)
    model = build(cfg)
    expected = expected_count(4, 1, 6, 4, 8, 2, 16, embed="no_node_embedding" not in flags,
                              resnet="no_resnet" not in flags, reverse="no_reverse_gru" not in flags,
                              tcn="no_tcn" not in flags)
    assert model.params.n_elements() == count_parameters(cfg) == expected


def test_default_parameter_count():
    # frozen from the layer tally at the default widths, N = 6
    assert count_parameters(ModelConfig(n_nodes=6)) == 2_554_460
    assert expected_count(6, 1, 12, 10, 64, 3, 512) == 2_554_460


def test_no_reverse_gru_halves_tcn_channels():
    full = STCGAT(tiny_config())
    fwd_only = STCGAT(tiny_config(no_reverse_gru=True))
    assert full.params["tcn.block0.conv1.v"].shape == (16, 16, 2)
    assert fwd_only.params["tcn.block0.conv1.v"].shape == (8, 8, 2)


def test_forward_only_encoder_equals_forward_half():
    full = STCGAT(tiny_config())
    fwd_only = STCGAT(tiny_config(no_reverse_gru=True))
    x = Tensor(np.random.default_rng(4).uniform(-1, 1, (2, 4, 6, 1)))
    a = unroll(full.encoder.forward_cell, x).data
    b = unroll(fwd_only.encoder.forward_cell, x).data
    np.testing.assert_array_equal(a, b)


def test_flags_off_is_bit_identical_to_full():
    x = np.random.default_rng(5).uniform(-1, 1, (2, 4, 6, 1))
    base = STCGAT(tiny_config())
    for flag in ABLATIONS:
        toggled = apply_ablation(tiny_config(), flag).replace(**{flag: False})
        again = STCGAT(toggled)
        assert toggled == base.config
        for p in base.params:
            np.testing.assert_array_equal(p.data, again.params[p.name].data)
        np.testing.assert_array_equal(again.forward(x).data, base.forward(x).data)


def test_no_node_embedding_needs_adjacency():
    with pytest.raises(ConfigError):
        STCGAT(tiny_config(no_node_embedding=True))


# ------------------------------------------------------------- loss

def test_l1_values():
    assert float(l1_loss(Tensor([1.0, 1.0]), [0.0, 3.0]).data) == 1.5
    assert float(l1_loss(Tensor([2.0, -1.0]), [2.0, -1.0]).data) == 0.0
    with pytest.raises(ContractError):
        l1_loss(Tensor([1.0, 2.0]), [1.0])


def test_l1_subgradient_and_gradient():
    p = Parameter("p", np.array([1.0, 2.0, 0.5, -3.0]))
    S.backward(l1_loss(p, np.array([1.0, 0.0, 1.0, 0.0])))
    np.testing.assert_array_equal(p.grad, [0.0, 0.25, -0.25, -0.25])
    pred, target = np.array([0.3, -0.7, 1.9]), np.array([0.0, 0.2, 1.0])
    assert check(lambda a: l1_loss(a, target), [pred]) < 1e-4


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_predict_equals_forward(seed):
    model = STCGAT(tiny_config())
    x = np.random.default_rng(seed).uniform(-1, 1, (5, 4, 6, 1))
    # BLAS blocking differs with batch size, so only same-batch calls are bit-identical
    np.testing.assert_allclose(model.predict(x, batch=2), model.forward(x).data, rtol=0, atol=1e-12)
    np.testing.assert_array_equal(model.predict(x, batch=5), model.forward(x).data)
