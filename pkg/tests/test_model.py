"""Model assembly: deterministic builds, parameter accounting against both a
hand-derived formula and the reported full-scale counts, the training loss,
and bit-exact checkpoints with tying aliases."""

import math

import numpy as np
import pytest

from conftest import tiny_config, tiny_model

from knmt import tensor as T
from knmt.corpus import Batch, Segment, ParallelCorpus, Vocabulary, make_batches
from knmt.errors import CheckpointError, ConfigError, ContractError
from knmt.model import (
    ModelConfig,
    build,
    load_checkpoint,
    param_count,
    save_checkpoint,
)


def vocab_of_size(n):
    return Vocabulary([f"w{i}" for i in range(n - 4)])


# ---------------------------------------------------------------------------
# build determinism

def test_build_is_deterministic():
    cfg = tiny_config()
    assert build(cfg, 7).param_hash() == build(cfg, 7).param_hash()
    assert build(cfg, 7).param_hash() != build(cfg, 8).param_hash()


def test_seeds_give_distinct_checkpoints(tmp_path):
    cfg = tiny_config()
    a, b = build(cfg, 1), build(cfg, 2)
    assert a.param_hash() != b.param_hash()


# ---------------------------------------------------------------------------
# parameter counting

def hand_count_toy():
    # vocab 20, emb 8, hidden 16, tied2, mean-state, conditional, layer norm
    V, E, H = 20, 8, 16
    ann, A = 2 * H, 2 * H
    total = V * E + V * E                          # src + tgt tables
    total += 2 * (3 * (E * H + H * H + H) + 3 * H)  # encoder + gains
    total += 3 * (E * H + H * H + H)               # gru1
    total += 3 * (ann * H + H * H + H)             # gru2
    total += H * A + ann * A + A + A               # attention
    total += ann * H + H                           # mean-state init
    total += H * E + E + ann * E + V               # output head
    return total


def test_toy_count_matches_hand_formula():
    cfg = ModelConfig(src_vocab=vocab_of_size(20), tgt_vocab=vocab_of_size(20),
                      emb_dim=8, enc_hidden=16, dec_hidden=16, tying_mode="tied2")
    assert param_count(cfg) == hand_count_toy()


def test_formula_matches_enumeration_across_configs():
    cases = [
        dict(),
        dict(tying_mode="none"),
        dict(tying_mode="tied3"),
        dict(init_mode="zero"),
        dict(output_mode="simple"),
        dict(layer_norm=False),
        dict(factored=True, h2o_mode="shared"),
        dict(factored=True, h2o_mode="separate"),
        dict(factored=True, h2o_mode="separate", output_mode="simple"),
        dict(factored=True, tying_mode="none"),
    ]
    for kw in cases:
        model = tiny_model(3, **kw)
        assert model.count_params() == model.enumerate_param_count(), kw


def test_tied3_minus_tied2_is_vocab_times_emb():
    for seed in range(10):
        r = np.random.default_rng(seed)
        n = int(r.integers(8, 40))
        emb = int(r.integers(4, 24))
        hid = int(r.integers(4, 32))
        v = vocab_of_size(n)
        c2 = ModelConfig(src_vocab=v, tgt_vocab=v, emb_dim=emb, enc_hidden=hid,
                         dec_hidden=hid, tying_mode="tied2")
        c3 = ModelConfig(src_vocab=v, tgt_vocab=v, emb_dim=emb, enc_hidden=hid,
                         dec_hidden=hid, tying_mode="tied3")
        assert param_count(c3) == param_count(c2) - n * emb


def test_low_resource_pair_counts_near_reported():
    # 200K-corpus subword vocabularies, 200-dim embeddings, 500-unit GRUs:
    # tied2 ~12M, tied3 (combined vocabulary) ~10.8M, ~10% reduction
    src, tgt = vocab_of_size(10041), vocab_of_size(12433)
    combined = vocab_of_size(16189)
    tied2 = param_count(ModelConfig(src_vocab=src, tgt_vocab=tgt, emb_dim=200,
                                    enc_hidden=500, dec_hidden=500, tying_mode="tied2"))
    tied3 = param_count(ModelConfig(src_vocab=combined, tgt_vocab=combined, emb_dim=200,
                                    enc_hidden=500, dec_hidden=500, tying_mode="tied3"))
    assert abs(tied2 - 12.0e6) / 12.0e6 < 0.05
    assert abs(tied3 - 10.8e6) / 10.8e6 < 0.05
    reduction = (tied2 - tied3) / tied2
    assert 0.095 <= reduction <= 0.105


def test_high_resource_pair_counts_near_reported():
    # 256/512 with 50K/53K subword vocabularies -> 35.0M
    c = ModelConfig(src_vocab=vocab_of_size(50000), tgt_vocab=vocab_of_size(53000),
                    emb_dim=256, enc_hidden=512, dec_hidden=512, tying_mode="tied2")
    assert abs(param_count(c) - 35.0e6) / 35.0e6 < 0.01
    # reverse direction at 384/640 -> 52.9M
    c = ModelConfig(src_vocab=vocab_of_size(53000), tgt_vocab=vocab_of_size(50000),
                    emb_dim=384, enc_hidden=640, dec_hidden=640, tying_mode="tied2")
    assert abs(param_count(c) - 52.9e6) / 52.9e6 < 0.01


# ---------------------------------------------------------------------------
# loss

def test_untrained_loss_near_log_vocab():
    # Xavier init keeps logits small, so per-token NLL starts near ln V
    vocab = vocab_of_size(50)
    cfg = ModelConfig(src_vocab=vocab, tgt_vocab=vocab, emb_dim=12, enc_hidden=12,
                      dec_hidden=12, tying_mode="tied2")
    r = np.random.default_rng(0)
    losses = []
    for seed in range(100):
        model = build(cfg, seed)
        src = list(r.integers(4, 50, size=5))
        tgt = list(r.integers(4, 50, size=5))
        losses.append(model.forward_loss(src, tgt).item())
    assert abs(np.mean(losses) - math.log(50)) / math.log(50) < 0.15


def test_saturated_single_token_loss_near_zero():
    # hand-saturate a conditional untied model: after bos the gold token is
    # (near) certain, after the gold token eos is; teacher-forced loss -> 0
    model = tiny_model(0, n_words=3, emb=4, tying_mode="none")
    gold = 4
    eos = model.config.tgt_vocab.eos_id
    bos = model.config.tgt_vocab.bos_id
    for _, p in model.named_params():
        if p.name.startswith(("head.", "emb.")):
            p.data[:] = 0.0
    model.emb.tgt_table.data[bos] = [50.0, 0.0, 0.0, 0.0]
    model.emb.tgt_table.data[gold] = [0.0, 50.0, 0.0, 0.0]
    model.emb.out_matrix.data[gold] = [60.0, 0.0, 0.0, 0.0]
    model.emb.out_matrix.data[eos] = [0.0, 60.0, 0.0, 0.0]
    loss = model.forward_loss([4, 5], [gold]).item()
    assert loss < 1e-8


def test_factored_loss_additivity(rng):
    model = tiny_model(5, factored=True, h2o_mode="separate")
    src, tgt, fac = [4, 5], [5, 4], [4, 4]
    full = model.forward_loss(src, tgt, fac).item()

    # lemma-only: make the factor stream certain by saturating its projection
    lemma_model = tiny_model(5, factored=True, h2o_mode="separate")
    batch = _batch_for(lemma_model.config, src, tgt, fac)
    lemma_nll = _stream_nll(lemma_model, batch, "lemma")
    factor_nll = _stream_nll(lemma_model, batch, "factor")
    assert abs(full - (lemma_nll + factor_nll)) < 1e-9


def _batch_for(config, src, tgt, fac=None):
    from knmt.model import _single_batch

    return _single_batch(config, src, tgt, fac)


def _stream_nll(model, batch, stream):
    """Teacher-forced per-stream NLL, mean per token (mirrors model.loss)."""
    src_mask = batch.src_mask.astype(model.dtype)
    ann = model._encode_batch(batch.src, src_mask)
    proj = model.dec.attention.project_annotations(ann)
    h = model.dec.initial_state(ann, src_mask)
    bos = np.full(batch.tgt.shape[0], model.config.tgt_vocab.bos_id, dtype=np.int64)
    total = 0.0
    for t in range(batch.tgt.shape[1]):
        prev = bos if t == 0 else batch.tgt[:, t - 1]
        y = model.emb.feedback(prev)
        h, ctx, _ = model.dec.step(y, h, ann, proj, src_mask)
        lo, fo = model.head.activations(h, y, ctx)
        lemma_logits, factor_logits = model.head.logits(lo, fo)
        logits = lemma_logits if stream == "lemma" else factor_logits
        gold = batch.tgt[:, t] if stream == "lemma" else batch.factors[:, t]
        total += -float(T.take_rows(T.log_softmax(logits), gold).data[0])
    return total / batch.tgt.shape[1]


def test_factored_requires_equal_length_factors():
    model = tiny_model(0, factored=True)
    with pytest.raises(ContractError):
        model.forward_loss([4], [4, 5], [4])


def test_batch_loss_is_mean_of_sentence_losses(rng):
    model = tiny_model(2, n_words=8)
    vocab = model.config.src_vocab
    segs = [Segment([vocab.id_to_token[4 + int(i)] for i in rng.integers(0, 8, size=n)],
                    [vocab.id_to_token[4 + int(i)] for i in rng.integers(0, 8, size=m)])
            for n, m in [(3, 4), (5, 2), (2, 6)]]
    batches = make_batches(ParallelCorpus(segs), vocab, vocab, 3, 0)
    assert len(batches) == 1
    batch_loss = model.loss(batches[0]).item()
    singles = [model.forward_loss(vocab.ids(s.src), vocab.ids(s.tgt)).item()
               for s in segs]
    assert abs(batch_loss - np.mean(singles)) < 1e-5


def test_loss_permutation_invariant(rng):
    model = tiny_model(2, n_words=8)
    vocab = model.config.src_vocab
    segs = [Segment([vocab.id_to_token[4 + int(i)] for i in rng.integers(0, 8, size=n)],
                    [vocab.id_to_token[4 + int(i)] for i in rng.integers(0, 8, size=m)])
            for n, m in [(3, 4), (5, 2), (2, 6), (4, 4)]]
    a = make_batches(ParallelCorpus(segs), vocab, vocab, 4, 0)[0]
    b = make_batches(ParallelCorpus(segs[::-1]), vocab, vocab, 4, 0)[0]
    assert abs(model.loss(a).item() - model.loss(b).item()) < 1e-5


def test_empty_sequences_rejected():
    model = tiny_model(0)
    with pytest.raises(ContractError):
        model.forward_loss([], [4])
    with pytest.raises(ContractError):
        model.forward_loss([4], [])


# ---------------------------------------------------------------------------
# degenerate factor vocabulary

def test_trivial_factor_vocab_gives_zero_factor_nll():
    fv = Vocabulary.singleton()
    v = vocab_of_size(8)
    cfg = ModelConfig(src_vocab=v, tgt_vocab=v, emb_dim=4, enc_hidden=5, dec_hidden=5,
                      factored=True, factor_vocab=fv, h2o_mode="shared",
                      precision="f8")
    model = build(cfg, 3)
    word_cfg = ModelConfig(src_vocab=v, tgt_vocab=v, emb_dim=4, enc_hidden=5,
                           dec_hidden=5, precision="f8")
    word = build(word_cfg, 3)
    src, tgt = [4, 5, 6], [6, 5]
    lf = model.forward_loss(src, tgt, [0, 0]).item()
    lw = word.forward_loss(src, tgt).item()
    assert abs(lf - lw) < 1e-12  # factor NLL contributes exactly 0


def test_trivial_factor_vocab_same_training_trajectory():
    from knmt.training import TrainSchedule, train

    fv = Vocabulary.singleton()
    v = vocab_of_size(10)
    words = v.id_to_token[4:]
    r = np.random.default_rng(9)
    segs_w, segs_f = [], []
    for _ in range(24):
        s = [words[int(i)] for i in r.integers(0, len(words), size=4)]
        segs_w.append(Segment(list(s), list(s)))
        segs_f.append(Segment(list(s), list(s), ["<f>"] * len(s)))
    sched = TrainSchedule(lr=1e-3, batch_size=8, validate_every=("epoch_frac", 1.0),
                          patience=50, max_epochs=3)
    base = dict(emb_dim=4, enc_hidden=5, dec_hidden=5, precision="f8")
    word = build(ModelConfig(src_vocab=v, tgt_vocab=v, **base), 3)
    fact = build(ModelConfig(src_vocab=v, tgt_vocab=v, factored=True,
                             factor_vocab=fv, h2o_mode="shared", **base), 3)
    res_w = train(word, ParallelCorpus(segs_w), sched, ParallelCorpus(segs_w[:4]), 11)
    res_f = train(fact, ParallelCorpus(segs_f), sched, ParallelCorpus(segs_f[:4]), 11)
    losses_w = [line.split("\t")[2] for line in res_w.log]
    losses_f = [line.split("\t")[2] for line in res_f.log]
    assert losses_w == losses_f  # shared parameters follow the same trajectory


# ---------------------------------------------------------------------------
# checkpoints

def test_checkpoint_roundtrip_bit_exact(tmp_path):
    model = tiny_model(4, n_words=9, factored=True, h2o_mode="separate")
    path = tmp_path / "m.knmt"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert loaded.param_hash() == model.param_hash()
    assert loaded.config == model.config
    assert loaded.tying_aliases() == model.tying_aliases()


def test_checkpoint_restores_tying_alias(tmp_path):
    model = tiny_model(4, tying_mode="tied2")
    path = tmp_path / "m.knmt"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert loaded.emb.out_matrix is loaded.emb.tgt_table
    loaded.emb.tgt_table.data[2, 0] = 123.0  # mutate one view ...
    assert loaded.emb.out_matrix.data[2, 0] == 123.0  # ... visible in the other


def test_checkpoint_stores_tied_table_once(tmp_path):
    tied = tiny_model(4, tying_mode="tied2")
    untied = tiny_model(4, tying_mode="none")
    p1, p2 = tmp_path / "a.knmt", tmp_path / "b.knmt"
    save_checkpoint(tied, p1)
    save_checkpoint(untied, p2)
    v, e = len(tied.config.tgt_vocab), tied.config.emb_dim
    assert p2.stat().st_size - p1.stat().st_size >= v * e * 4


def test_truncated_checkpoint_rejected(tmp_path):
    model = tiny_model(4)
    path = tmp_path / "m.knmt"
    save_checkpoint(model, path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 20])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "m.knmt"
    path.write_bytes(b"NOPE9\n{}\n")
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_corrupt_header_rejected(tmp_path):
    path = tmp_path / "m.knmt"
    path.write_bytes(b"KNMT1\nnot json at all\n")
    with pytest.raises(CheckpointError, match="header"):
        load_checkpoint(path)


def test_checkpoint_roundtrip_preserves_greedy_decode(tmp_path):
    from knmt.search import greedy_decode

    model = tiny_model(6, n_words=10, precision="f4")
    path = tmp_path / "m.knmt"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    r = np.random.default_rng(0)
    for _ in range(50):
        src = list(r.integers(4, 14, size=int(r.integers(1, 6))))
        a = greedy_decode(model, src, max_len=8)
        b = greedy_decode(loaded, src, max_len=8)
        assert a.tokens == b.tokens


def test_tied3_with_distinct_vocabs_rejected():
    with pytest.raises(ConfigError):
        ModelConfig(src_vocab=vocab_of_size(8), tgt_vocab=vocab_of_size(9),
                    tying_mode="tied3")


def test_factored_requires_factor_vocab():
    v = vocab_of_size(8)
    with pytest.raises(ConfigError):
        ModelConfig(src_vocab=v, tgt_vocab=v, factored=True)
