"""Neural building blocks: tying identities, layer norm, GRU properties,
attention, the conditional GRU decoder, output heads, and dropout."""

import numpy as np
import pytest

from knmt import tensor as T
from knmt.corpus import Vocabulary
from knmt.errors import ConfigError, ContractError, VocabularyError
from knmt.layers import (
    AttentionHead,
    CgruDecoder,
    Embeddings,
    GruCell,
    LayerNorm,
    OutputHead,
    ParamFactory,
    attend,
    cgru_step,
    dropout,
    embed,
    encode,
    gru_step,
    output_logits,
)

F64 = ParamFactory(0, np.float64)


def f64(seed=0):
    return ParamFactory(seed, np.float64)


# ---------------------------------------------------------------------------
# embeddings and tying

def test_tied3_source_equals_feedback():
    emb = Embeddings(f64(), 7, 7, 4, "tied3")
    src = embed(emb, [3], "source")
    fb = embed(emb, [3], "feedback")
    assert np.array_equal(src.data, fb.data)
    assert emb.src_table is emb.tgt_table is emb.out_matrix


def test_untied_tables_differ():
    emb = Embeddings(f64(), 7, 7, 4, "none")
    src = embed(emb, [3], "source")
    fb = embed(emb, [3], "feedback")
    assert not np.array_equal(src.data, fb.data)
    assert emb.out_matrix is not emb.tgt_table


def test_tied2_output_projection_is_feedback_storage():
    emb = Embeddings(f64(), 5, 9, 4, "tied2")
    assert emb.out_matrix is emb.tgt_table
    emb.tgt_table.data[2, :] += 1.0  # a write through one view ...
    assert np.array_equal(emb.out_matrix.data[2], emb.tgt_table.data[2])


def test_tied2_gradient_step_moves_feedback_row():
    # one gradient step through the output head changes the gold token's row
    emb = Embeddings(f64(), 5, 5, 3, "tied2")
    head = OutputHead(f64(), "head", "simple", 4, 3, 8, emb.out_matrix, 5)
    before = emb.tgt_table.data[4].copy()
    h = T.Tensor(np.ones((1, 4)), dtype=np.float64)
    logits = head.logits(h)
    loss = T.neg(T.take_rows(T.log_softmax(logits), np.array([4])))
    T.sum_(loss).backward()
    grad = emb.tgt_table.grad
    assert grad is not None and np.abs(grad[4]).max() > 0
    emb.tgt_table.data -= 0.1 * grad
    assert not np.array_equal(before, emb.tgt_table.data[4])


def test_tied3_requires_combined_vocab():
    with pytest.raises(ConfigError):
        Embeddings(f64(), 5, 7, 4, "tied3")


def test_embed_id_out_of_range():
    emb = Embeddings(f64(), 5, 5, 4, "tied2")
    with pytest.raises(VocabularyError):
        embed(emb, [5], "source")


# ---------------------------------------------------------------------------
# layer norm

def test_layer_norm_constant_input_gives_bias():
    ln = LayerNorm(f64(), "ln", 4)
    ln.bias.data[:] = [1.0, 2.0, 3.0, 4.0]
    out = ln(T.Tensor(np.full((2, 4), 7.0), dtype=np.float64))
    assert np.allclose(out.data, [[1, 2, 3, 4], [1, 2, 3, 4]])


def test_layer_norm_two_point_case():
    ln = LayerNorm(f64(), "ln", 2)
    out = ln(T.Tensor([[1.0, -1.0]], dtype=np.float64))
    assert np.allclose(out.data, [[1.0, -1.0]], atol=1e-4)


def test_layer_norm_standardizes(rng):
    ln = LayerNorm(f64(), "ln", 16)
    x = T.Tensor(rng.normal(size=(20, 16)) * 3 + 1, dtype=np.float64)
    pre = T.standardize(x, ln.eps).data
    assert np.abs(pre.mean(axis=-1)).max() < 1e-5
    assert np.abs(pre.std(axis=-1) - 1.0).max() < 1e-4


def test_layer_norm_gradients(rng):
    ln = LayerNorm(f64(), "ln", 5)
    x = T.Tensor(rng.normal(size=(3, 5)), dtype=np.float64)

    def loss():
        return T.mean_(T.mul(ln(x), T.Tensor(np.arange(5, dtype=np.float64))))

    rep = T.grad_check(loss, [("x", x), ("gain", ln.gain), ("bias", ln.bias)])
    assert rep.passed, rep.errors


# ---------------------------------------------------------------------------
# GRU

def test_gru_zero_weights_zero_state():
    cell = GruCell(f64(), "g", 3, 4)
    for _, p in cell.named_params():
        p.data[:] = 0.0
    x = T.Tensor(np.ones((2, 3)), dtype=np.float64)
    h = gru_step(cell, x, T.Tensor(np.zeros((2, 4)), dtype=np.float64))
    assert np.array_equal(h.data, np.zeros((2, 4)))


def test_gru_keeps_state_in_unit_box():
    for seed in range(100):
        r = np.random.default_rng(seed)
        cell = GruCell(ParamFactory(seed, np.float64), "g", 3, 4)
        for _, p in cell.named_params():
            if p.ndim == 2:
                p.data[:] = r.normal(size=p.shape) * 2.0
        h = T.Tensor(r.uniform(-1, 1, size=(2, 4)), dtype=np.float64)
        x = T.Tensor(r.normal(size=(2, 3)) * 3, dtype=np.float64)
        out = gru_step(cell, x, h)
        assert (np.abs(out.data) <= 1.0 + 1e-12).all()


def test_gru_step_gradients(rng):
    cell = GruCell(f64(), "g", 3, 4)
    x = T.Tensor(rng.normal(size=(2, 3)), dtype=np.float64)
    h0 = T.Tensor(rng.normal(size=(2, 4)) * 0.5, dtype=np.float64)

    def loss():
        return T.mean_(T.mul(gru_step(cell, x, h0), gru_step(cell, x, h0)))

    rep = T.grad_check(loss, [("x", x), ("h0", h0)] + list(cell.named_params()))
    assert rep.passed, rep.errors


def test_layernorm_gru_step_gradients(rng):
    cell = GruCell(f64(), "g", 3, 4, layer_norm=True)
    x = T.Tensor(rng.normal(size=(2, 3)), dtype=np.float64)
    h0 = T.Tensor(rng.normal(size=(2, 4)) * 0.5, dtype=np.float64)

    def loss():
        h = cell.step(x, h0)
        return T.mean_(T.mul(h, h))

    rep = T.grad_check(loss, [("x", x), ("h0", h0)] + list(cell.named_params()))
    assert rep.passed, rep.errors


# ---------------------------------------------------------------------------
# encoder

def _emb_steps(rng, seq, batch, dim):
    return [T.Tensor(rng.normal(size=(batch, dim)), dtype=np.float64) for _ in range(seq)]


def test_encode_single_position_concatenates_directions(rng):
    fwd = GruCell(f64(), "f", 3, 4, layer_norm=True)
    bwd = GruCell(f64(1), "b", 3, 4, layer_norm=True)
    steps = _emb_steps(rng, 1, 2, 3)
    ann = encode(steps, fwd, bwd)
    assert ann.shape == (2, 1, 8)
    f1 = fwd.step(steps[0], T.Tensor(np.zeros((2, 4)), dtype=np.float64))
    b1 = bwd.step(steps[0], T.Tensor(np.zeros((2, 4)), dtype=np.float64))
    assert np.allclose(ann.data[:, 0, :4], f1.data)
    assert np.allclose(ann.data[:, 0, 4:], b1.data)


def test_encode_reversal_swaps_direction_roles(rng):
    fwd = GruCell(f64(), "f", 3, 4, layer_norm=True)
    bwd = GruCell(f64(1), "b", 3, 4, layer_norm=True)
    steps = _emb_steps(rng, 5, 1, 3)
    ann = encode(steps, fwd, bwd).data
    ann_rev = encode(steps[::-1], bwd, fwd).data
    # position t of the original = position seq-1-t reversed, halves swapped
    for t in range(5):
        assert np.allclose(ann[0, t, :4], ann_rev[0, 4 - t, 4:], atol=1e-12)
        assert np.allclose(ann[0, t, 4:], ann_rev[0, 4 - t, :4], atol=1e-12)


def test_encode_empty_sequence_rejected():
    fwd = GruCell(f64(), "f", 3, 4)
    bwd = GruCell(f64(1), "b", 3, 4)
    with pytest.raises(ContractError):
        encode([], fwd, bwd)


def test_encode_three_step_gradients(rng):
    fwd = GruCell(f64(), "f", 2, 3, layer_norm=True)
    bwd = GruCell(f64(1), "b", 2, 3, layer_norm=True)
    steps = _emb_steps(rng, 3, 2, 2)

    def loss():
        ann = encode(steps, fwd, bwd)
        return T.mean_(T.mul(ann, ann))

    params = list(fwd.named_params()) + list(bwd.named_params())
    rep = T.grad_check(loss, params)
    assert rep.passed, rep.errors


# ---------------------------------------------------------------------------
# attention

def test_attend_single_position_is_identity(rng):
    head = AttentionHead(f64(), "att", 6, 4, 5)
    ann = T.Tensor(rng.normal(size=(1, 1, 6)), dtype=np.float64)
    state = T.Tensor(rng.normal(size=(1, 4)), dtype=np.float64)
    ctx, w = attend(head, ann, state)
    assert np.allclose(w.data, [[1.0]])
    assert np.allclose(ctx.data, ann.data[:, 0, :])


def test_attend_identical_annotations_uniform(rng):
    head = AttentionHead(f64(), "att", 6, 4, 5)
    one = rng.normal(size=6)
    ann = T.Tensor(np.tile(one, (1, 7, 1)), dtype=np.float64)
    state = T.Tensor(rng.normal(size=(1, 4)), dtype=np.float64)
    ctx, w = attend(head, ann, state)
    assert np.allclose(w.data, np.full((1, 7), 1 / 7))


def test_attend_hand_computed_two_positions():
    head = AttentionHead(f64(), "att", 2, 2, 2)
    head.w_state.data[:] = np.eye(2)
    head.w_ann.data[:] = np.eye(2)
    head.bias.data[:] = 0.0
    head.v.data[:] = [[1.0], [0.0]]
    ann = np.array([[[0.3, 0.0], [0.9, 0.0]]])
    state = np.array([[0.1, 0.0]])
    ctx, w = attend(head, T.Tensor(ann, dtype=np.float64),
                    T.Tensor(state, dtype=np.float64))
    s1, s2 = np.tanh(0.4), np.tanh(1.0)  # v . tanh(W_s s + W_a a_j)
    e1, e2 = np.exp(s1), np.exp(s2)
    w1, w2 = e1 / (e1 + e2), e2 / (e1 + e2)
    assert np.allclose(w.data, [[w1, w2]], atol=1e-12)
    assert np.allclose(ctx.data, [[0.3 * w1 + 0.9 * w2, 0.0]], atol=1e-12)


def test_attention_weights_sum_to_one(rng):
    head = AttentionHead(f64(), "att", 6, 4, 5)
    for seed in range(20):
        r = np.random.default_rng(seed)
        ann = T.Tensor(r.normal(size=(3, 9, 6)) * 2, dtype=np.float64)
        state = T.Tensor(r.normal(size=(3, 4)), dtype=np.float64)
        _, w = attend(head, ann, state)
        assert (w.data >= 0).all()
        assert np.abs(w.data.sum(axis=-1) - 1.0).max() < 1e-6


# ---------------------------------------------------------------------------
# CGRU decoder

def test_cgru_zero_everything_gives_zero_state(rng):
    dec = CgruDecoder(f64(), "dec", 3, 6, 4, 5, "zero")
    for _, p in dec.named_params():
        p.data[:] = 0.0
    ann = T.Tensor(rng.normal(size=(1, 4, 6)), dtype=np.float64)
    h0 = dec.initial_state(ann)
    assert np.array_equal(h0.data, np.zeros((1, 4)))
    y = T.Tensor(np.zeros((1, 3)), dtype=np.float64)
    h, ctx, w = cgru_step(dec, y, h0, ann)
    assert np.array_equal(h.data, np.zeros((1, 4)))
    assert abs(w.data.sum() - 1.0) < 1e-9


def test_cgru_zero_init_mode_exact():
    dec = CgruDecoder(f64(), "dec", 3, 6, 4, 5, "zero")
    ann = T.Tensor(np.random.default_rng(0).normal(size=(2, 5, 6)), dtype=np.float64)
    assert np.linalg.norm(dec.initial_state(ann).data) == 0.0


def test_cgru_mean_state_init(rng):
    dec = CgruDecoder(f64(), "dec", 3, 6, 4, 5, "mean_state")
    ann_data = rng.normal(size=(2, 5, 6))
    h0 = dec.initial_state(T.Tensor(ann_data, dtype=np.float64))
    expected = np.tanh(ann_data.mean(axis=1) @ dec.w_init.data + dec.b_init.data)
    assert np.allclose(h0.data, expected, atol=1e-12)


def test_cgru_step_gradients(rng):
    dec = CgruDecoder(f64(), "dec", 2, 4, 3, 3, "mean_state")
    ann = T.Tensor(rng.normal(size=(1, 3, 4)), dtype=np.float64)
    y = T.Tensor(rng.normal(size=(1, 2)), dtype=np.float64)

    def loss():
        h0 = dec.initial_state(ann)
        h, ctx, _ = cgru_step(dec, y, h0, ann)
        return T.mean_(T.mul(h, T.add(ctx[:, :3], h)))

    rep = T.grad_check(loss, [("ann", ann), ("y", y)] + list(dec.named_params()))
    assert rep.passed, rep.errors


# ---------------------------------------------------------------------------
# output heads

def test_simple_mode_ignores_context_and_feedback(rng):
    emb = Embeddings(f64(), 5, 5, 3, "tied2")
    head = OutputHead(f64(), "head", "simple", 4, 3, 8, emb.out_matrix, 5)
    h = T.Tensor(rng.normal(size=(2, 4)), dtype=np.float64)
    y1 = T.Tensor(rng.normal(size=(2, 3)), dtype=np.float64)
    y2 = T.Tensor(rng.normal(size=(2, 3)), dtype=np.float64)
    c1 = T.Tensor(rng.normal(size=(2, 8)), dtype=np.float64)
    c2 = T.Tensor(rng.normal(size=(2, 8)), dtype=np.float64)
    a = output_logits(head, h, y1, c1).data
    b = output_logits(head, h, y2, c2).data
    assert np.array_equal(a, b)  # bit-identical


def test_conditional_identity_projection_reflects_feedback(rng):
    # all weights zero except W_o = I (emb dim == vocab): logits = tanh(y_prev)
    emb_dim = vocab = 4
    emb = Embeddings(f64(), vocab, vocab, emb_dim, "none")
    head = OutputHead(f64(), "head", "conditional", 3, emb_dim, 6, emb.out_matrix, vocab)
    head.w_h.data[:] = 0.0
    head.b_o.data[:] = 0.0
    head.w_c.data[:] = 0.0
    head.b_logit.data[:] = 0.0
    emb.out_matrix.data[:] = np.eye(vocab)
    h = T.Tensor(rng.normal(size=(1, 3)), dtype=np.float64)
    y = T.Tensor(rng.normal(size=(1, emb_dim)), dtype=np.float64)
    c = T.Tensor(rng.normal(size=(1, 6)), dtype=np.float64)
    logits = output_logits(head, h, y, c)
    assert np.allclose(logits.data, np.tanh(y.data), atol=1e-12)


def test_output_softmax_normalized(rng):
    emb = Embeddings(f64(), 5, 5, 3, "tied2")
    head = OutputHead(f64(), "head", "conditional", 4, 3, 8, emb.out_matrix, 5)
    h = T.Tensor(rng.normal(size=(3, 4)), dtype=np.float64)
    y = T.Tensor(rng.normal(size=(3, 3)), dtype=np.float64)
    c = T.Tensor(rng.normal(size=(3, 8)), dtype=np.float64)
    p = T.softmax(output_logits(head, h, y, c)).data
    assert np.abs(p.sum(axis=-1) - 1.0).max() < 1e-6


# ---------------------------------------------------------------------------
# dropout

def test_dropout_p_zero_is_identity(rng):
    x = T.Tensor(rng.normal(size=(4, 4)))
    r = np.random.default_rng(0)
    assert dropout(x, 0.0, True, r) is x
    assert dropout(x, 0.0, False, r) is x


def test_dropout_eval_mode_identity(rng):
    x = T.Tensor(rng.normal(size=(4, 4)))
    assert dropout(x, 0.5, False, np.random.default_rng(0)) is x


def test_dropout_preserves_mean(rng):
    x = T.Tensor(np.ones((1000, 1000), dtype=np.float32))
    out = dropout(x, 0.3, True, np.random.default_rng(7))
    assert abs(out.data.mean() - 1.0) < 0.02


def test_dropout_rejects_p_one():
    with pytest.raises(ContractError):
        dropout(T.Tensor([1.0]), 1.0, True, np.random.default_rng(0))
