"""Beam search on a tiny model: n-best lists, length normalization,
beam-1/greedy equivalence, and ensemble decoding.

Run:  python demos/04_beam_and_ensemble.py
"""

from knmt.corpus import Vocabulary
from knmt.model import ModelConfig, build
from knmt.search import beam_decode, greedy_decode

vocab = Vocabulary([f"w{i}" for i in range(8)])
config = ModelConfig(src_vocab=vocab, tgt_vocab=vocab, emb_dim=8, enc_hidden=8,
                     dec_hidden=8, tying_mode="tied2")
model = build(config, seed=1)
src = vocab.ids(["w0", "w3", "w5"])

nbest = beam_decode(model, src, beam=5, max_len=6, length_norm=True)
print("5-best (normalized score | tokens):")
for hyp in nbest:
    print(f"  {hyp.score(True):8.4f} | {' '.join(vocab.tokens(hyp.tokens))}")

greedy = greedy_decode(model, src, max_len=6)
beam1 = beam_decode(model, src, beam=1, max_len=6)[0]
print("beam-1 equals greedy:", greedy.tokens == beam1.tokens)

# an ensemble averages the per-step probability distributions of its members
members = [build(config, seed=s) for s in (1, 2, 3)]
single = beam_decode(model, src, beam=3, max_len=6)[0]
mixed = beam_decode(members, src, beam=3, max_len=6)[0]
print("single best:  ", " ".join(vocab.tokens(single.tokens)))
print("ensemble best:", " ".join(vocab.tokens(mixed.tokens)))
same = beam_decode([model, model, model], src, beam=3, max_len=6)[0]
print("ensemble of identical members reproduces the single model:",
      same.tokens == single.tokens)
