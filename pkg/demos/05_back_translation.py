"""Back-translation in miniature: train a reverse model, synthesize sources
for monolingual target text, and retrain on the combined corpus.

Run:  python demos/05_back_translation.py   (a couple of minutes)
"""

from knmt.corpus import ParallelCorpus, Segment, Vocabulary, assemble_bt_corpus
from knmt.model import ModelConfig, build
from knmt.rng import named_rng
from knmt.training import TrainSchedule, train

rng = named_rng(3, "demo-bt")
src_letters, tgt_letters = "abcdefghij", "nopqrstuvw"
mapping = dict(zip(src_letters, tgt_letters))
lex = []
seen = set()
while len(lex) < 80:
    w = "".join(src_letters[int(i)] for i in rng.integers(0, 10, size=int(rng.integers(3, 7))))
    if w not in seen:
        seen.add(w)
        lex.append(w)


def sample_pair():
    n = int(rng.integers(3, 8))
    words = [lex[int(i)] for i in rng.integers(0, len(lex), size=n)]
    return words, ["".join(mapping[c] for c in w) for w in words[::-1]]


original = [sample_pair() for _ in range(600)]
heldout = [sample_pair() for _ in range(100)]
mono_target = [sample_pair()[1] for _ in range(2000)]

src_vocab = Vocabulary.from_corpus([s for s, _ in original])
tgt_vocab = Vocabulary.from_corpus([t for _, t in original])
forward = ParallelCorpus([Segment(list(s), list(t)) for s, t in original])
reverse = ParallelCorpus([Segment(list(t), list(s)) for s, t in original])
valid = ParallelCorpus([Segment(list(s), list(t)) for s, t in heldout])

dims = dict(emb_dim=16, enc_hidden=24, dec_hidden=24, dropout_p=0.0)
# smoothed validation BLEU keeps early stopping alive before 4-gram matches
schedule = TrainSchedule(lr=3e-3, batch_size=64, validate_every=("epoch_frac", 2.0),
                         patience=8, max_epochs=40, smooth_valid_bleu=True)

baseline = build(ModelConfig(src_vocab=src_vocab, tgt_vocab=tgt_vocab, **dims), 42)
res_base = train(baseline, forward, schedule, valid, 42)
print(f"baseline held-out BLEU:      {res_base.best_metric:6.2f}")

rev_model = build(ModelConfig(src_vocab=tgt_vocab, tgt_vocab=src_vocab, **dims), 43)
res_rev = train(rev_model, reverse, schedule,
                ParallelCorpus([Segment(list(t), list(s)) for s, t in heldout]), 43)
print(f"reverse model held-out BLEU: {res_rev.best_metric:6.2f}")

augmented = assemble_bt_corpus(forward, mono_target, res_rev.model,
                               limit=len(mono_target), beam=1)
print(f"augmented corpus: {len(augmented)} pairs "
      f"({augmented.bt_skipped} monolingual sentences skipped)")

bt_model = build(ModelConfig(src_vocab=src_vocab, tgt_vocab=tgt_vocab, **dims), 42)
res_bt = train(bt_model, augmented, schedule, valid, 42)
print(f"BT-augmented held-out BLEU:  {res_bt.best_metric:6.2f}")
