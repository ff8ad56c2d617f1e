import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stcgat import substrate as S
from stcgat.causal_gru import (BiRecurrentEncoder, GatedCell, ResidualCell, cell_step,
                               encode_sequence, residual_step, unroll)
from stcgat.model import STCGAT, ModelConfig
from stcgat.substrate import Tensor

from fdcheck import check
from test_nalgat import oracle_aggregate, oracle_alpha, oracle_weights, oracle_z


def tiny_model(**kw):
    values = dict(n_nodes=3, n_features=1, window=5, hidden=4, heads=2, embed_dim=3, head_hidden=8,
                  dtype="float64", seed=3)
    values.update(kw)
    return STCGAT(ModelConfig(**values))


def const_gate(value):
    return lambda xh: Tensor(np.full(xh.shape[:-1] + (4,), value))


def oracle_layer(layer, x):
    """Term-by-term NAL-GAT on one [N, F_in] slice."""
    e, e_out = layer.embedding.matrix.data, layer.out_embedding.matrix.data
    adj_logits = np.maximum(e @ e.T, 0)
    adj = np.exp(adj_logits - adj_logits.max(axis=1, keepdims=True))
    adj /= adj.sum(axis=1, keepdims=True)
    outs = []
    for head in layer.heads:
        z = oracle_z(x, oracle_weights(e, head.pool.data))
        outs.append(oracle_aggregate(z, oracle_alpha(z, head.attn.data), adj))
    joined = np.concatenate(outs, axis=-1)
    z = oracle_z(joined, oracle_weights(e_out, layer.out_head.pool.data))
    return oracle_aggregate(z, oracle_alpha(z, layer.out_head.attn.data), adj)


def sig(v):
    return 1.0 / (1.0 + np.exp(-v))


def test_saturated_update_gate_carries_state():
    h_prev = np.random.default_rng(0).normal(size=(3, 4))
    cell = GatedCell(const_gate(50.0), const_gate(0.0), const_gate(0.3), hidden=4)
    out = cell_step(cell, Tensor(np.ones((3, 1))), Tensor(h_prev)).data
    np.testing.assert_array_equal(out, h_prev)


def test_closed_gates_reset_to_candidate():
    model = tiny_model()
    gate_h = model.encoder.forward_cell.cell.gate_h
    cell = GatedCell(const_gate(-60.0), const_gate(-60.0), gate_h, hidden=4)
    rng = np.random.default_rng(1)
    x, h_prev = rng.normal(size=(3, 1)), rng.normal(size=(3, 4))
    out = cell_step(cell, Tensor(x), Tensor(h_prev)).data
    expected = np.tanh(gate_h(Tensor(np.concatenate([x, np.zeros((3, 4))], axis=-1))).data)
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-12)


def test_cell_step_matches_term_by_term_oracle():
    model = tiny_model()
    cell = model.encoder.forward_cell.cell
    rng = np.random.default_rng(2)
    x, h = rng.normal(size=(3, 1)), rng.normal(size=(3, 4)) * 0.5
    z = sig(oracle_layer(cell.gate_z, np.concatenate([x, h], axis=1)))
    r = sig(oracle_layer(cell.gate_r, np.concatenate([x, h], axis=1)))
    cand = np.tanh(oracle_layer(cell.gate_h, np.concatenate([x, r * h], axis=1)))
    expected = z * h + (1 - z) * cand
    np.testing.assert_allclose(cell_step(cell, Tensor(x), Tensor(h)).data, expected, rtol=0, atol=1e-12)


def test_gate_ranges():
    cell = tiny_model().encoder.forward_cell.cell
    rng = np.random.default_rng(3)
    xh = Tensor(np.concatenate([rng.uniform(-1, 1, (6, 3, 1)), rng.uniform(-3, 3, (6, 3, 4))], axis=-1))
    z, r = S.sigmoid(cell.gate_z(xh)).data, S.sigmoid(cell.gate_r(xh)).data
    cand = S.tanh(cell.gate_h(xh)).data
    assert np.all((z > 0) & (z < 1)) and np.all((r > 0) & (r < 1))
    assert np.all((cand > -1) & (cand < 1))


def test_residual_pass_through():
    carry = GatedCell(const_gate(50.0), const_gate(0.0), const_gate(0.0), hidden=4)
    rcell = ResidualCell(carry, Tensor(np.zeros((1, 4))), Tensor(np.eye(4)))
    h = np.abs(np.random.default_rng(4).normal(size=(3, 4)))
    out = residual_step(rcell, Tensor(np.ones((3, 1))), Tensor(h)).data
    np.testing.assert_array_equal(out, h)


def test_residual_with_zero_input():
    model = tiny_model()
    rcell = model.encoder.forward_cell
    h_prev = np.random.default_rng(5).normal(size=(3, 4))
    x = Tensor(np.zeros((3, 1)))
    cell_out = cell_step(rcell.cell, x, Tensor(h_prev)).data
    expected = np.maximum(cell_out @ rcell.w_hidden.data, 0)
    np.testing.assert_allclose(residual_step(rcell, x, Tensor(h_prev)).data, expected, rtol=0, atol=1e-15)


def test_two_chained_residual_steps_gradient():
    model = tiny_model()
    rcell = model.encoder.forward_cell
    rng = np.random.default_rng(6)
    x1, x2 = rng.normal(size=(3, 1)), rng.normal(size=(3, 1))
    w_in, w_h = rcell.w_input.data.copy(), rcell.w_hidden.data.copy()

    def build(a, b, wi, wh):
        rc = ResidualCell(rcell.cell, wi, wh)
        h = residual_step(rc, a, Tensor(np.zeros((3, 4))))
        return S.tsum(residual_step(rc, b, h) * Tensor(np.arange(12.0).reshape(3, 4)))

    assert check(build, [x1, x2, w_in, w_h]) < 1e-4


def test_single_step_bidirectional_output():
    model = tiny_model(window=1)
    enc = model.encoder
    x = np.random.default_rng(7).normal(size=(2, 3, 1, 1))
    out = encode_sequence(enc, Tensor(x)).data
    zero = Tensor(np.zeros((2, 3, 4)))
    fwd = residual_step(enc.forward_cell, Tensor(x[:, :, 0]), zero).data
    bwd = residual_step(enc.backward_cell, Tensor(x[:, :, 0]), zero).data
    assert out.shape == (2, 3, 1, 8)
    np.testing.assert_array_equal(out[:, :, 0], np.concatenate([fwd, bwd], axis=-1))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_forward_causal_backward_anticausal(seed):
    model = tiny_model(window=6)
    rng = np.random.default_rng(seed)
    t_star = int(rng.integers(0, 6))
    x = rng.uniform(-1, 1, (1, 3, 6, 1))
    late, early = x.copy(), x.copy()
    late[:, :, t_star + 1:] = rng.uniform(-1, 1, late[:, :, t_star + 1:].shape)
    early[:, :, :t_star] = rng.uniform(-1, 1, early[:, :, :t_star].shape)
    base = encode_sequence(model.encoder, Tensor(x)).data
    a = encode_sequence(model.encoder, Tensor(late)).data
    b = encode_sequence(model.encoder, Tensor(early)).data
    np.testing.assert_array_equal(a[:, :, :t_star + 1, :4], base[:, :, :t_star + 1, :4])
    np.testing.assert_array_equal(b[:, :, t_star:, 4:], base[:, :, t_star:, 4:])


def test_forward_only_encoder_width():
    model = tiny_model()
    enc = BiRecurrentEncoder(model.encoder.forward_cell)
    assert enc.out_width == 4
    assert encode_sequence(enc, Tensor(np.zeros((1, 3, 5, 1)))).shape == (1, 3, 5, 4)


def test_states_stay_bounded_over_long_sequences():
    model = tiny_model(hidden=4)
    x = np.random.default_rng(8).uniform(-1, 1, (1, 3, 512, 1))
    with S.no_grad():
        out = unroll(model.encoder.forward_cell, Tensor(x)).data
    assert out.shape == (1, 3, 512, 4)
    assert np.all(np.isfinite(out))


@pytest.mark.parametrize("reverse", [False, True])
def test_unroll_outputs_are_in_forward_time(reverse):
    model = tiny_model()
    rcell = model.encoder.forward_cell
    x = np.random.default_rng(9).normal(size=(3, 4, 1))
    out = unroll(rcell, Tensor(x), reverse=reverse).data
    h = Tensor(np.zeros((3, 4)))
    order = range(3, -1, -1) if reverse else range(4)
    for t in order:
        h = residual_step(rcell, Tensor(x[:, t]), h)
        np.testing.assert_array_equal(out[:, t], h.data)
