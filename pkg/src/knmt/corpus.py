"""Vocabularies, parallel corpora, filtering, weighting, and batching.

Plain-text corpora are UTF-8, one pre-tokenized sentence per line,
space-separated.  Factored corpora carry "lemma|factors" tokens with "|"
reserved (a literal "|" inside a lemma is escaped as "\\p").  Weighted
corpus manifests hold "prefix<TAB>weight" lines referring to prefix.src /
prefix.tgt pairs.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .rng import named_rng

log = logging.getLogger("knmt")

PAD_ID, EOS_ID, UNK_ID, BOS_ID = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<eos>", "<unk>", "<bos>")


class Vocabulary:
    """Bidirectional token<->id table with reserved pad/eos/unk/bos entries."""

    def __init__(self, tokens, reserved: bool = True):
        self.reserved = reserved
        base = list(RESERVED_TOKENS) if reserved else []
        self.id_to_token = base + [t for t in tokens if t not in base]
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ContractError("vocabulary contains duplicate tokens")
        if not self.id_to_token:
            raise ContractError("empty vocabulary")

    @classmethod
    def from_corpus(cls, sentences, max_size=None, min_freq=1) -> "Vocabulary":
        counts = Counter(tok for sent in sentences for tok in sent)
        items = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        tokens = [t for t, c in items if c >= min_freq]
        if max_size is not None:
            tokens = tokens[: max(0, max_size - len(RESERVED_TOKENS))]
        return cls(tokens)

    @classmethod
    def singleton(cls, token: str = "<f>") -> "Vocabulary":
        """Degenerate single-entry vocabulary; every role aliases id 0."""
        return cls([token], reserved=False)

    @property
    def pad_id(self):
        return PAD_ID if self.reserved else 0

    @property
    def eos_id(self):
        return EOS_ID if self.reserved else 0

    @property
    def unk_id(self):
        return UNK_ID if self.reserved else 0

    @property
    def bos_id(self):
        return BOS_ID if self.reserved else 0

    def __len__(self):
        return len(self.id_to_token)

    def __contains__(self, token):
        return token in self.token_to_id

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.id_to_token == other.id_to_token

    def ids(self, tokens) -> list[int]:
        unk = self.unk_id
        return [self.token_to_id.get(t, unk) for t in tokens]

    def tokens(self, ids) -> list[str]:
        return [self.id_to_token[i] for i in ids]

    def to_sentence(self, ids) -> list[str]:
        """Token strings with reserved entries stripped."""
        skip = {self.pad_id, self.eos_id, self.bos_id} if self.reserved else set()
        return [self.id_to_token[i] for i in ids if i not in skip]


# ---------------------------------------------------------------------------
# corpora

@dataclass
class Segment:
    src: list
    tgt: list
    factors: list | None = None
    weight: int = 1


@dataclass
class ParallelCorpus:
    segments: list = field(default_factory=list)

    def __len__(self):
        return len(self.segments)

    def __iter__(self):
        return iter(self.segments)

    def extended(self, other: "ParallelCorpus") -> "ParallelCorpus":
        return ParallelCorpus(self.segments + other.segments)

    @classmethod
    def from_files(cls, src_path, tgt_path, factored=False, weight=1) -> "ParallelCorpus":
        src_lines = read_tokenized(src_path)
        tgt_lines = read_tokenized(tgt_path)
        if len(src_lines) != len(tgt_lines):
            raise ContractError(
                f"corpus sides differ in length: {len(src_lines)} vs {len(tgt_lines)}")
        segments = []
        for src, tgt in zip(src_lines, tgt_lines):
            if factored:
                lemmas, factors = split_factored(tgt)
                segments.append(Segment(src, lemmas, factors, weight))
            else:
                segments.append(Segment(src, tgt, None, weight))
        return cls(segments)

    @classmethod
    def from_manifest(cls, manifest_path, factored=False) -> "ParallelCorpus":
        corpus = cls()
        with open(manifest_path, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                prefix, weight = line.split("\t")
                part = cls.from_files(prefix + ".src", prefix + ".tgt",
                                      factored=factored, weight=int(weight))
                corpus = corpus.extended(part)
        return corpus


def read_tokenized(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [line.split() for line in fh.read().splitlines()]


def write_tokenized(path, sentences):
    with open(path, "w", encoding="utf-8") as fh:
        for sent in sentences:
            fh.write(" ".join(sent) + "\n")


def factored_token(lemma: str, factors: str) -> str:
    return lemma.replace("|", "\\p") + "|" + factors


def split_factored_token(token: str):
    head, sep, factors = token.rpartition("|")
    if not sep:
        raise ContractError(f"factored token without '|': {token!r}")
    return head.replace("\\p", "|"), factors


def split_factored(tokens):
    """A factored sentence -> equal-length (lemmas, factor tags)."""
    lemmas, factors = [], []
    for tok in tokens:
        lemma, factor = split_factored_token(tok)
        lemmas.append(lemma)
        factors.append(factor)
    return lemmas, factors


def filter_corpus(corpus: ParallelCorpus, min_len: int, max_len: int,
                  max_ratio: float | None = None) -> ParallelCorpus:
    """Keep pairs with both sides in [min_len, max_len] (inclusive) and,
    if set, length ratio at most max_ratio either way."""
    if min_len < 1 or max_len < min_len:
        raise ContractError(f"bad length bounds [{min_len}, {max_len}]")
    kept = []
    for seg in corpus:
        ls, lt = len(seg.src), len(seg.tgt)
        if not (min_len <= ls <= max_len and min_len <= lt <= max_len):
            continue
        if max_ratio is not None and max(ls / lt, lt / ls) > max_ratio:
            continue
        kept.append(seg)
    return ParallelCorpus(kept)


# ---------------------------------------------------------------------------
# batching

class Batch:
    """Padded id arrays with masks; targets carry a trailing eos."""

    def __init__(self, src, src_mask, tgt, tgt_mask, factors=None):
        self.src = src
        self.src_mask = src_mask
        self.tgt = tgt
        self.tgt_mask = tgt_mask
        self.factors = factors

    @property
    def size(self):
        return self.src.shape[0]


def _pad_ids(rows, pad_id):
    width = max(len(r) for r in rows)
    ids = np.full((len(rows), width), pad_id, dtype=np.int64)
    mask = np.zeros((len(rows), width), dtype=np.float32)
    for i, row in enumerate(rows):
        ids[i, : len(row)] = row
        mask[i, : len(row)] = 1.0
    return ids, mask


def make_batches(corpus: ParallelCorpus, src_vocab: Vocabulary, tgt_vocab: Vocabulary,
                 batch_size: int, seed, factor_vocab: Vocabulary | None = None):
    """One epoch of length-bucketed, seeded-shuffle batches.

    A segment with weight w contributes w copies.  ``seed`` may be an int or
    a numpy Generator (so a trainer can advance one stream across epochs).
    """
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else named_rng(seed, "shuffle")
    for seg in corpus:
        if int(seg.weight) != seg.weight or seg.weight < 1:
            raise ContractError(f"segment weight must be a positive integer, got {seg.weight}")
    expanded = [seg for seg in corpus for _ in range(seg.weight)]
    order = np.arange(len(expanded))
    rng.shuffle(order)
    order = sorted(order, key=lambda i: len(expanded[i].src))
    chunks = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    rng.shuffle(chunks)

    batches = []
    for chunk in chunks:
        segs = [expanded[i] for i in chunk]
        src_rows = [src_vocab.ids(s.src) for s in segs]
        tgt_rows = [tgt_vocab.ids(s.tgt) + [tgt_vocab.eos_id] for s in segs]
        src, src_mask = _pad_ids(src_rows, src_vocab.pad_id)
        tgt, tgt_mask = _pad_ids(tgt_rows, tgt_vocab.pad_id)
        factors = None
        if factor_vocab is not None:
            for s in segs:
                if s.factors is None or len(s.factors) != len(s.tgt):
                    raise ContractError("factored batch requires equal-length factor streams")
            fac_rows = [factor_vocab.ids(s.factors) + [factor_vocab.eos_id] for s in segs]
            factors, _ = _pad_ids(fac_rows, factor_vocab.pad_id)
        batches.append(Batch(src, src_mask, tgt, tgt_mask, factors))
    return batches


# ---------------------------------------------------------------------------
# back-translation

def assemble_bt_corpus(original: ParallelCorpus, mono_target, reverse_model,
                       limit: int, beam: int = 4, max_len: int | None = None) -> ParallelCorpus:
    """Append back-translated synthetic pairs to ``original``.

    The first ``limit`` monolingual target sentences are translated to the
    source language with ``reverse_model`` (beam decode; beam 1 runs the
    batched greedy path); failures are skipped and counted.  Synthetic pairs
    get weight 1.
    """
    from .search import beam_decode, greedy_decode_corpus  # avoid a module cycle

    mono = [list(s) for s in list(mono_target)[: max(0, limit)]]
    synthetic = []
    skipped = 0
    if beam == 1:
        usable = [(i, s) for i, s in enumerate(mono) if s]
        skipped += len(mono) - len(usable)
        hyps = greedy_decode_corpus(
            reverse_model,
            [reverse_model.config.src_vocab.ids(s) for _, s in usable],
            max_len=max_len)
        for (_, sent), hyp in zip(usable, hyps):
            synth = reverse_model.config.tgt_vocab.to_sentence(hyp.tokens)
            if not synth:
                skipped += 1
                continue
            synthetic.append(Segment(synth, sent, None, 1))
    else:
        for sent in mono:
            try:
                src_ids = reverse_model.config.src_vocab.ids(sent)
                hyps = beam_decode(reverse_model, src_ids, beam=beam,
                                   max_len=max_len or (2 * len(sent) + 5))
                synth = reverse_model.config.tgt_vocab.to_sentence(hyps[0].tokens)
                if not synth:
                    raise ContractError("empty translation")
            except Exception as exc:  # noqa: BLE001 - per-sentence failures are skippable
                skipped += 1
                log.debug("back-translation skipped a sentence: %s", exc)
                continue
            synthetic.append(Segment(synth, list(sent), None, 1))
    if skipped:
        log.info("back-translation skipped %d/%d sentences", skipped, limit)
    out = ParallelCorpus(original.segments + synthetic)
    out.bt_skipped = skipped
    return out
