"""Joint byte-pair-encoding subwords: learning, application, detokenization,
and the factored variant that repeats factor tags across lemma splits.

Words are split into symbols; non-final pieces carry the "@@" continuation
suffix so detokenization is the exact inverse on any in-alphabet text.
Model files start with "#bpe v1" followed by one "left right" merge per line.
"""

from __future__ import annotations

from collections import Counter

from .errors import ContractError

CONTINUATION = "@@"


class SubwordModel:
    """Ordered merge rules plus a per-word application cache."""

    def __init__(self, merges):
        self.merges = [tuple(m) for m in merges]
        self._ranks = {m: i for i, m in enumerate(self.merges)}
        self._cache: dict[str, tuple] = {}

    def __len__(self):
        return len(self.merges)

    def split_word(self, word: str) -> list[str]:
        """Symbol pieces of one word, before continuation marking."""
        cached = self._cache.get(word)
        if cached is not None:
            return list(cached)
        symbols = list(word)
        for left, right in self.merges:
            symbols = _merge_pair(symbols, left, right)
            if len(symbols) == 1:
                break
        self._cache[word] = tuple(symbols)
        return symbols

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("#bpe v1\n")
            for left, right in self.merges:
                fh.write(f"{left} {right}\n")

    @classmethod
    def load(cls, path) -> "SubwordModel":
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        if not lines or lines[0] != "#bpe v1":
            raise ContractError(f"not a bpe model file: {path}")
        merges = []
        for line in lines[1:]:
            if not line:
                continue
            left, sep, right = line.partition(" ")
            if not sep:
                raise ContractError(f"malformed merge line: {line!r}")
            merges.append((left, right))
        return cls(merges)


def _merge_pair(symbols, left, right):
    out = []
    i = 0
    n = len(symbols)
    while i < n:
        if i < n - 1 and symbols[i] == left and symbols[i + 1] == right:
            out.append(left + right)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return out


def bpe_learn(corpora, num_merges: int) -> SubwordModel:
    """Learn merges jointly over all provided token streams.

    Greedy most-frequent adjacent pair; frequency ties break lexicographically
    by (left, right).  ``corpora`` is a list of corpora, each a list of
    token-list sentences.
    """
    if num_merges < 0:
        raise ContractError("num_merges must be >= 0")
    word_freq = Counter()
    for corpus in corpora:
        for sent in corpus:
            word_freq.update(sent)
    if not word_freq:
        raise ContractError("bpe_learn: empty corpus")

    words = [(list(w), f) for w, f in sorted(word_freq.items())]
    pair_counts = Counter()
    where = {}  # pair -> set of word indexes containing it
    for idx, (symbols, freq) in enumerate(words):
        for pair in zip(symbols, symbols[1:]):
            pair_counts[pair] += freq
            where.setdefault(pair, set()).add(idx)

    merges = []
    for _ in range(num_merges):
        if not pair_counts:
            break
        best_count = max(pair_counts.values())
        if best_count <= 0:
            break
        pair = min(p for p, c in pair_counts.items() if c == best_count)
        merges.append(pair)
        left, right = pair
        for idx in sorted(where.get(pair, ())):
            symbols, freq = words[idx]
            if len(symbols) < 2:
                continue
            for p in zip(symbols, symbols[1:]):
                pair_counts[p] -= freq
                if pair_counts[p] <= 0:
                    del pair_counts[p]
            merged = _merge_pair(symbols, left, right)
            words[idx] = (merged, freq)
            for p in zip(merged, merged[1:]):
                pair_counts[p] += freq
                where.setdefault(p, set()).add(idx)
    return SubwordModel(merges)


def bpe_apply(model: SubwordModel, sentence) -> list[str]:
    """Split each word per the merge table; non-final pieces get "@@"."""
    out = []
    for word in sentence:
        pieces = model.split_word(word)
        out.extend(p + CONTINUATION for p in pieces[:-1])
        out.append(pieces[-1])
    return out


def detokenize_bpe(tokens) -> list[str]:
    """Join continuation-marked pieces back into words (inverse of apply)."""
    words = []
    buf = ""
    for tok in tokens:
        if tok.endswith(CONTINUATION):
            buf += tok[: -len(CONTINUATION)]
        else:
            words.append(buf + tok)
            buf = ""
    if buf:
        # dangling continuation at sentence end: joined as-is
        words.append(buf)
    return words


def factored_bpe_apply(model: SubwordModel, lemmas, factors):
    """Apply BPE to the lemma stream, repeating each factor per lemma piece.

    Returns equal-length (subword lemmas, repeated factors).
    """
    if len(lemmas) != len(factors):
        raise ContractError(
            f"factored streams differ in length: {len(lemmas)} vs {len(factors)}")
    out_lemmas, out_factors = [], []
    for lemma, factor in zip(lemmas, factors):
        pieces = model.split_word(lemma)
        out_lemmas.extend(p + CONTINUATION for p in pieces[:-1])
        out_lemmas.append(pieces[-1])
        out_factors.extend([factor] * len(pieces))
    return out_lemmas, out_factors
