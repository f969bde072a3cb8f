"""Learn a joint subword model, segment text, invert the segmentation, and
apply the factored variant where factor tags follow lemma splits.

Run:  python demos/03_bpe_subwords.py
"""

from knmt.corpus import read_tokenized
from knmt.subword import bpe_apply, bpe_learn, detokenize_bpe, factored_bpe_apply

src = read_tokenized("data/toy/train.src")
tgt = read_tokenized("data/toy/train.tgt")

# joint learning: one merge table over both sides of the corpus
model = bpe_learn([src, tgt], num_merges=30)
print("first ten merges:", model.merges[:10])

sentence = src[0]
pieces = bpe_apply(model, sentence)
print("words:   ", " ".join(sentence))
print("subwords:", " ".join(pieces))
assert detokenize_bpe(pieces) == sentence  # "@@" marking is exactly invertible

# factored text: each lemma's tag is repeated once per produced piece
lemmas = ["echh", "degab"]
tags = ["N-sg", "V-inf"]
sub_lemmas, sub_tags = factored_bpe_apply(model, lemmas, tags)
for piece, tag in zip(sub_lemmas, sub_tags):
    print(f"  {piece:10s} {tag}")
assert len(sub_lemmas) == len(sub_tags)
