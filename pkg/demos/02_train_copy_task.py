"""Train an attentive encoder-decoder on a tiny copy task and watch the
validation BLEU climb; then decode a few sentences greedily.

Run:  python demos/02_train_copy_task.py   (about half a minute)
"""

import numpy as np

from knmt.corpus import ParallelCorpus, Segment, Vocabulary
from knmt.model import ModelConfig, build
from knmt.rng import named_rng
from knmt.search import greedy_decode
from knmt.training import TrainSchedule, train

rng = named_rng(42, "demo-copy")
words = [f"w{i}" for i in range(16)]
vocab = Vocabulary(words)

pairs = []
for _ in range(200):
    n = int(rng.integers(4, 9))
    sent = [words[int(i)] for i in rng.integers(0, 16, size=n)]
    pairs.append(Segment(list(sent), list(sent)))
corpus = ParallelCorpus(pairs)

config = ModelConfig(src_vocab=vocab, tgt_vocab=vocab, emb_dim=8, enc_hidden=16,
                     dec_hidden=16, tying_mode="tied2", dropout_p=0.0)
model = build(config, seed=42)
print(f"parameters: {model.count_params():,}")

schedule = TrainSchedule(lr=3e-3, batch_size=32, validate_every=("epoch_frac", 2.0),
                         patience=10, max_epochs=120)
result = train(model, corpus, schedule, corpus, seed=42)
print("log (update, epoch, loss, BLEU, improved):")
for line in result.log[:3] + ["..."] + result.log[-3:]:
    print(" ", line)
print(f"best training-set BLEU {result.best_metric:.2f} "
      f"({result.stopped_reason} at update {result.best_update})")

for seg in pairs[:3]:
    hyp = greedy_decode(result.model, vocab.ids(seg.src), max_len=20)
    print("in: ", " ".join(seg.src))
    print("out:", " ".join(vocab.to_sentence(hyp.tokens)))
