"""Factored decoding: the model emits a lemma stream and a factor stream of
equal length; a reinflection dictionary turns (lemma, factors) pairs back
into surface words.

Run:  python demos/06_factored_reinflect.py
"""

from knmt.corpus import ParallelCorpus, Segment, Vocabulary
from knmt.model import ModelConfig, build
from knmt.rng import named_rng
from knmt.search import ReinflectionDictionary, factored_beam_decode, reinflect
from knmt.training import TrainSchedule, train

# a micro factored language: lemmas carry number tags; surfaces add suffixes
lemmas = ["cat", "dog", "bird", "fish", "frog", "newt"]
tags = ["sg", "pl"]
surface = {(l, "sg"): l for l in lemmas}
surface.update({(l, "pl"): l + "s" for l in lemmas})

rng = named_rng(5, "demo-factored")
pairs = []
for _ in range(240):
    n = int(rng.integers(2, 6))
    ls = [lemmas[int(i)] for i in rng.integers(0, len(lemmas), size=n)]
    fs = [tags[int(i)] for i in rng.integers(0, 2, size=n)]
    src = [surface[(l, f)] for l, f in zip(ls, fs)]
    pairs.append(Segment(src, ls, fs))

src_vocab = Vocabulary.from_corpus([p.src for p in pairs])
lemma_vocab = Vocabulary.from_corpus([p.tgt for p in pairs])
factor_vocab = Vocabulary.from_corpus([p.factors for p in pairs])

config = ModelConfig(src_vocab=src_vocab, tgt_vocab=lemma_vocab, emb_dim=12,
                     enc_hidden=16, dec_hidden=16, factored=True,
                     factor_vocab=factor_vocab, h2o_mode="separate", dropout_p=0.0)
model = build(config, seed=5)
schedule = TrainSchedule(lr=3e-3, batch_size=32, validate_every=("epoch_frac", 2.0),
                         patience=10, max_epochs=120, smooth_valid_bleu=True)
result = train(model, ParallelCorpus(pairs), schedule, ParallelCorpus(pairs[:20]), 5)
print(f"lemma-stream BLEU on held-in data: {result.best_metric:.2f}")

dictionary = ReinflectionDictionary()
for (lemma, tag), word in surface.items():
    dictionary.add(lemma, tag, word, count=3)
dictionary.finalize()

for seg in pairs[:4]:
    hyp = factored_beam_decode(result.model, src_vocab.ids(seg.src),
                               beam=4, max_len=8, factor_k=2)[0]
    out_lemmas = lemma_vocab.to_sentence(hyp.tokens)
    out_tags = factor_vocab.to_sentence(hyp.factors)
    sentences, misses = reinflect(dictionary, out_lemmas, out_tags, k=2)
    print("source:  ", " ".join(seg.src))
    print("lemmas:  ", " ".join(out_lemmas))
    print("factors: ", " ".join(out_tags))
    print("surface: ", " ".join(sentences[0]), f"(misses={misses})")
    print()
