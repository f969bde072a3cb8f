"""Score corpora with BLEU, score sentences with a small language model, and
rerank an n-best list under tuned feature weights.

Run:  python demos/07_bleu_and_rerank.py
"""


from knmt.corpus import Vocabulary, read_tokenized
from knmt.lm import LmConfig, lm_score, lm_train, perplexity
from knmt.metrics import bleu
from knmt.rerank import rescore_nbest, tune_weights
from knmt.training import TrainSchedule

# --- BLEU: clipped n-gram precisions, brevity penalty, hard zero
refs = read_tokenized("data/toy/dev.tgt")
print("identity:", bleu(refs, refs).format())
clipped = bleu([["the", "the", "the", "the"]], [["the", "cat", "sat", "down"]])
print("degenerate hypothesis:", clipped.format())

# --- a small language model over the toy target language
sents = read_tokenized("data/toy/train.tgt")
vocab = Vocabulary.from_corpus(sents)
schedule = TrainSchedule(lr=3e-3, batch_size=64, validate_every=("epoch_frac", 1.0),
                         patience=3, max_epochs=10)
result = lm_train(sents[:250], sents[250:], LmConfig(vocab=vocab, emb_dim=16, hidden=24),
                  schedule, seed=1)
lm = result.model
print(f"LM perplexity on held-out target text: {perplexity(lm, sents[250:]):.2f}")
counts = {}
for s in sents:
    for w in s:
        counts[w] = counts.get(w, 0) + 1
by_freq = sorted(counts, key=counts.get)
frequent = by_freq[-3:]
rare = by_freq[:3]
print(f"  ln P({' '.join(frequent)})  [frequent words] = {lm_score(lm, frequent):8.2f}")
print(f"  ln P({' '.join(rare)})  [rare words]     = {lm_score(lm, rare):8.2f}")

# --- rerank an n-best list: features are named scores per candidate
nbest = [
    (["sup", "rot"], {"nmt": -2.0, "lm": lm_score(lm, ["sup", "rot"])}),
    (["sup", "sup"], {"nmt": -1.8, "lm": lm_score(lm, ["sup", "sup"])}),
    (["rot", "rot"], {"nmt": -2.2, "lm": lm_score(lm, ["rot", "rot"])}),
]
ranked = rescore_nbest(nbest, [], {"nmt": 1.0, "lm": 0.5})
print("reranked:")
for tokens, total, feats in ranked:
    print(f"  {total:7.3f}  {' '.join(tokens)}  {feats}")

# --- weight tuning maximizes corpus BLEU of the 1-best on a dev set
dev_refs = [["sup", "rot"], ["rot", "rot"]]
dev_nbest = [
    [(["sup", "rot"], {"nmt": -2.0, "oracle": 1.0}),
     (["sup", "sup"], {"nmt": -1.0, "oracle": 0.0})],
    [(["rot", "rot"], {"nmt": -2.5, "oracle": 1.0}),
     (["sup", "sup"], {"nmt": -1.5, "oracle": 0.0})],
]
weights = tune_weights(dev_nbest, dev_refs, seed=0)
print("tuned weights:", {k: round(v, 3) for k, v in weights.items()})
