"""Greedy, beam, and ensemble decoding for word and factored models,
n-best list I/O, and dictionary reinflection of factored hypotheses.

Scores are accumulated in python floats from per-step log-probabilities.
Ensembles average the members' per-step probability distributions
(arithmetic by default, geometric behind a flag).  Ties in pruning break
toward lower token ids so decoding is deterministic.
"""

from __future__ import annotations

import itertools
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .corpus import Vocabulary
from .errors import ConfigError, ContractError
from .subword import detokenize_bpe  # re-exported: inverse of bpe_apply

__all__ = [
    "Hypothesis", "greedy_decode", "greedy_decode_corpus", "beam_decode",
    "factored_beam_decode", "detokenize_bpe", "ReinflectionDictionary",
    "reinflect", "detokenize_factored", "load_ensemble", "write_nbest",
    "read_nbest",
]


@dataclass
class Hypothesis:
    """A finished target sequence with its per-step log-probabilities."""

    tokens: list
    logprob_sum: float
    step_logprobs: list = field(default_factory=list)
    factors: list | None = None
    forced: bool = False

    def score(self, length_norm: bool) -> float:
        if length_norm:
            return self.logprob_sum / max(1, len(self.tokens))
        return self.logprob_sum


def _as_models(model_or_list):
    models = model_or_list if isinstance(model_or_list, (list, tuple)) else [model_or_list]
    if not models:
        raise ContractError("decode requires at least one model")
    first = models[0].config
    for m in models[1:]:
        if m.config.tgt_vocab != first.tgt_vocab:
            raise ConfigError("ensemble members must share the target vocabulary")
        if m.config.factored != first.factored:
            raise ConfigError("ensemble members must agree on factored output")
    return list(models)


def load_ensemble(paths):
    """Load checkpoints and validate they share a target vocabulary."""
    from .model import load_checkpoint

    return _as_models([load_checkpoint(p) for p in paths])


class _DecodeRun:
    """Per-model decoder state advanced in lockstep over hypothesis rows."""

    def __init__(self, models, src_ids, combine, batch=None):
        if combine not in ("arith", "geom"):
            raise ConfigError(f"unknown ensemble combination {combine!r}")
        self.models = models
        self.combine = combine
        self.contexts = []
        self.states = []
        for m in models:
            if batch is not None:
                ann, ann_proj, mask, h = m.start_decode_batch(*batch)
            else:
                ann, ann_proj, mask, h = m.start_decode(src_ids)
            self.contexts.append((ann, ann_proj, mask))
            self.states.append(h)

    def _combined(self, rows_logp):
        if len(rows_logp) == 1:
            return rows_logp[0].astype(np.float64, copy=False)
        stacked = np.stack([lp.astype(np.float64, copy=False) for lp in rows_logp])
        if self.combine == "arith":
            probs = np.exp(stacked).mean(axis=0)
            return np.log(np.maximum(probs, 1e-300))
        mean_lp = stacked.mean(axis=0)
        norm = mean_lp - np.log(np.exp(mean_lp).sum(axis=-1, keepdims=True))
        return norm

    def step(self, prev_ids):
        """Returns combined (rows, vocab) log-probs (factored: a pair)."""
        prev_ids = np.asarray(prev_ids, dtype=np.int64)
        outs = []
        for i, m in enumerate(self.models):
            ann, ann_proj, mask = self.contexts[i]
            res = m.decode_step(prev_ids, self.states[i], ann, ann_proj, mask)
            self.states[i] = res[0]
            outs.append(res[1:])
        if self.models[0].config.factored:
            lemma = self._combined([o[0] for o in outs])
            factor = self._combined([o[1] for o in outs])
            return lemma, factor
        return self._combined([o[0] for o in outs])

    def select_rows(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        for i in range(len(self.states)):
            self.states[i] = T.Tensor(self.states[i].data[idx])


def _allowed_ids(vocab: Vocabulary):
    if not vocab.reserved:
        return list(range(len(vocab)))
    banned = {vocab.pad_id, vocab.bos_id}
    return [i for i in range(len(vocab)) if i not in banned]


def greedy_decode(model_or_list, src_ids, max_len: int) -> Hypothesis:
    """Argmax decoding; independent of the beam machinery except model steps."""
    models = _as_models(model_or_list)
    if models[0].config.factored:
        raise ContractError("greedy_decode supports word models only")
    vocab = models[0].config.tgt_vocab
    eos = vocab.eos_id
    banned = [vocab.pad_id, vocab.bos_id] if vocab.reserved else []
    with T.no_grad():
        run = _DecodeRun(models, src_ids, "arith")
        tokens, steps = [], []
        prev = vocab.bos_id
        for t in range(max_len + 1):
            row = run.step([prev])[0].copy()
            if banned:
                row[banned] = -np.inf
            tok = eos if t == max_len else int(np.argmax(row))
            steps.append(float(row[tok]))
            tokens.append(tok)
            if tok == eos:
                return Hypothesis(tokens, float(sum(steps)), steps, forced=(t == max_len))
            prev = tok
    return Hypothesis(tokens, float(sum(steps)), steps, forced=True)


def greedy_decode_corpus(model_or_list, src_ids_list, max_len: int | None = None,
                         batch_rows: int = 128) -> list:
    """Batched greedy decoding of many sentences (validation / bulk translate).

    Per-row generation cap is ``max_len`` or 2*source length + 5.  Tokens can
    differ from per-sentence greedy_decode only through BLAS rounding on
    near-ties, so per-sentence decoding remains the contractual path for
    beam-vs-greedy equivalence.
    """
    models = _as_models(model_or_list)
    if models[0].config.factored:
        raise ContractError("greedy_decode_corpus supports word models only")
    vocab = models[0].config.tgt_vocab
    eos = vocab.eos_id
    banned = [vocab.pad_id, vocab.bos_id] if vocab.reserved else []
    out: list[Hypothesis] = []
    for lo in range(0, len(src_ids_list), batch_rows):
        chunk = [list(s) for s in src_ids_list[lo : lo + batch_rows]]
        if any(len(s) == 0 for s in chunk):
            raise ContractError("greedy_decode_corpus: empty source sentence")
        rows = len(chunk)
        width = max(len(s) for s in chunk)
        src = np.full((rows, width), vocab.pad_id, dtype=np.int64)
        mask = np.zeros((rows, width), dtype=np.float32)
        for i, s in enumerate(chunk):
            src[i, : len(s)] = s
            mask[i, : len(s)] = 1.0
        caps = [max_len if max_len is not None else 2 * len(s) + 5 for s in chunk]
        with T.no_grad():
            run = _DecodeRun(models, None, "arith", batch=(src, mask))
            tokens = [[] for _ in range(rows)]
            steps = [[] for _ in range(rows)]
            forced = [False] * rows
            done = [False] * rows
            prev = np.full(rows, vocab.bos_id, dtype=np.int64)
            for t in range(max(caps) + 1):
                logp = run.step(prev)
                if banned:
                    logp[:, banned] = -np.inf
                picks = np.argmax(logp, axis=1)
                for i in range(rows):
                    if done[i]:
                        prev[i] = eos
                        continue
                    tok = eos if t >= caps[i] else int(picks[i])
                    forced[i] = forced[i] or (t >= caps[i])
                    tokens[i].append(tok)
                    steps[i].append(float(logp[i, tok]))
                    done[i] = tok == eos
                    prev[i] = tok
                if all(done):
                    break
        for i in range(rows):
            out.append(Hypothesis(tokens[i], float(sum(steps[i])), steps[i],
                                  forced=forced[i]))
    return out


def beam_decode(model_or_list, src_ids, beam: int, max_len: int,
                length_norm: bool = True, combine: str = "arith"):
    """Beam search; returns finished hypotheses best-first (an n-best list).

    ``max_len`` caps the number of non-eos tokens; a hypothesis still live at
    the cap is closed by scoring eos at the next step and flagged as forced.
    """
    if beam < 1 or max_len < 1:
        raise ContractError("beam and max_len must be >= 1")
    models = _as_models(model_or_list)
    if models[0].config.factored:
        raise ContractError("use factored_beam_decode for factored models")
    vocab = models[0].config.tgt_vocab
    eos = vocab.eos_id
    allowed = np.asarray(_allowed_ids(vocab), dtype=np.int64)

    with T.no_grad():
        run = _DecodeRun(models, src_ids, combine)
        live = [Hypothesis([], 0.0, [])]
        finished = []
        for step in range(max_len + 1):
            prev = [h.tokens[-1] if h.tokens else vocab.bos_id for h in live]
            logp = run.step(prev)
            if step == max_len:
                for k, h in enumerate(live):
                    lp = float(logp[k, eos])
                    finished.append(Hypothesis(h.tokens + [eos], h.logprob_sum + lp,
                                               h.step_logprobs + [lp], forced=True))
                break
            cand_scores = []
            for k, h in enumerate(live):
                cand_scores.append(h.logprob_sum + logp[k, allowed])
            flat = np.concatenate(cand_scores)
            tok_of = np.tile(allowed, len(live))
            hyp_of = np.repeat(np.arange(len(live)), len(allowed))
            take = min(beam, flat.size)
            order = np.lexsort((hyp_of, tok_of, -flat))[:take]
            next_live, next_rows = [], []
            for idx in order:
                k, tok = int(hyp_of[idx]), int(tok_of[idx])
                h = live[k]
                lp = float(logp[k, tok])
                nh = Hypothesis(h.tokens + [tok], h.logprob_sum + lp,
                                h.step_logprobs + [lp])
                if tok == eos:
                    finished.append(nh)
                else:
                    next_live.append(nh)
                    next_rows.append(k)
            if not next_live:
                break
            live = next_live
            run.select_rows(next_rows)
    finished.sort(key=lambda h: (-h.score(length_norm), h.tokens))
    return finished[: max(beam, 1)]


def factored_beam_decode(model_or_list, src_ids, beam: int, max_len: int,
                         factor_k: int = 3, length_norm: bool = True,
                         combine: str = "arith"):
    """Beam search emitting lockstep (lemma, factor) streams.

    Each live hypothesis expands to its top ``beam`` lemmas crossed with its
    top ``factor_k`` factors, scored by the sum of the two log-probs.  A
    lemma eos closes the hypothesis and forces the factor stream's eos at
    the same step, so both streams always have equal length.
    """
    if beam < 1 or max_len < 1 or factor_k < 1:
        raise ContractError("beam, max_len, and factor_k must be >= 1")
    models = _as_models(model_or_list)
    if not models[0].config.factored:
        raise ContractError("factored_beam_decode requires a factored model")
    cfg = models[0].config
    eos = cfg.tgt_vocab.eos_id
    f_eos = cfg.factor_vocab.eos_id
    lemma_ids = np.asarray(_allowed_ids(cfg.tgt_vocab), dtype=np.int64)
    # the factor stream terminates exactly when the lemma stream does, so its
    # eos is never a mid-stream candidate (kept only for the degenerate
    # single-entry vocabulary, where every role aliases one id)
    mid_factors = [i for i in _allowed_ids(cfg.factor_vocab) if i != f_eos]
    factor_ids = np.asarray(mid_factors or _allowed_ids(cfg.factor_vocab),
                            dtype=np.int64)

    with T.no_grad():
        run = _DecodeRun(models, src_ids, combine)
        live = [Hypothesis([], 0.0, [], factors=[])]
        finished = []
        for step in range(max_len + 1):
            prev = [h.tokens[-1] if h.tokens else cfg.tgt_vocab.bos_id for h in live]
            lemma_lp, factor_lp = run.step(prev)
            if step == max_len:
                for k, h in enumerate(live):
                    lp = float(lemma_lp[k, eos]) + float(factor_lp[k, f_eos])
                    finished.append(Hypothesis(h.tokens + [eos], h.logprob_sum + lp,
                                               h.step_logprobs + [lp],
                                               factors=h.factors + [f_eos], forced=True))
                break
            candidates = []  # (neg score, lemma, factor, hyp index)
            for k, h in enumerate(live):
                row_l = lemma_lp[k]
                row_f = factor_lp[k]
                top_l = lemma_ids[np.lexsort((lemma_ids, -row_l[lemma_ids]))[:beam]]
                top_f = factor_ids[np.lexsort((factor_ids, -row_f[factor_ids]))[:factor_k]]
                for li in top_l:
                    if li == eos:
                        lp = float(row_l[eos] + row_f[f_eos])
                        candidates.append((-(h.logprob_sum + lp), int(li), int(f_eos), k, lp))
                        continue
                    for fi in top_f:
                        lp = float(row_l[li] + row_f[fi])
                        candidates.append((-(h.logprob_sum + lp), int(li), int(fi), k, lp))
            candidates.sort(key=lambda c: c[:4])
            next_live, next_rows = [], []
            for neg, li, fi, k, lp in candidates[:beam]:
                h = live[k]
                nh = Hypothesis(h.tokens + [li], -neg, h.step_logprobs + [lp],
                                factors=h.factors + [fi])
                if li == eos:
                    finished.append(nh)
                else:
                    next_live.append(nh)
                    next_rows.append(k)
            if not next_live:
                break
            live = next_live
            run.select_rows(next_rows)
    finished.sort(key=lambda h: (-h.score(length_norm), h.tokens, h.factors))
    return finished[: max(beam, 1)]


# ---------------------------------------------------------------------------
# n-best list I/O (Moses-compatible)

def write_nbest(path, nbest_per_sentence, to_text, features=("nmt",)):
    """Write "index ||| tokens ||| name= value ... ||| total" lines.

    ``to_text`` maps a Hypothesis to its token string list.
    """
    with open(path, "w", encoding="utf-8") as fh:
        for idx, hyps in enumerate(nbest_per_sentence):
            for h in hyps:
                feats = " ".join(f"{name}= {h.logprob_sum:.6f}" for name in features)
                text = " ".join(to_text(h))
                fh.write(f"{idx} ||| {text} ||| {feats} ||| {h.logprob_sum:.6f}\n")


def read_nbest(path):
    """Parse an n-best file into {sentence index: [(tokens, features, total)]}."""
    table = defaultdict(list)
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            parts = [p.strip() for p in line.split("|||")]
            if len(parts) != 4:
                raise ContractError(f"malformed n-best line: {line!r}")
            idx = int(parts[0])
            tokens = parts[1].split()
            feats = {}
            items = parts[2].split()
            i = 0
            while i < len(items):
                if items[i].endswith("="):
                    feats[items[i][:-1]] = float(items[i + 1])
                    i += 2
                else:
                    i += 1
            table[idx].append((tokens, feats, float(parts[3])))
    return dict(table)


# ---------------------------------------------------------------------------
# reinflection

class ReinflectionDictionary:
    """(lemma, factor-string) -> surface words ranked by descending count."""

    def __init__(self, entries=None):
        self._table = {}
        if entries:
            for (lemma, factors), words in entries.items():
                self._table[(lemma, factors)] = sorted(words, key=lambda wc: (-wc[1], wc[0]))

    def add(self, lemma, factors, word, count=1):
        self._table.setdefault((lemma, factors), []).append((word, count))

    def finalize(self):
        merged = {}
        for key, words in self._table.items():
            counts = defaultdict(int)
            for w, c in words:
                counts[w] += c
            merged[key] = sorted(counts.items(), key=lambda wc: (-wc[1], wc[0]))
        self._table = merged
        return self

    def __len__(self):
        return len(self._table)

    def candidates(self, lemma, factors, k):
        """Top-k surface words; falls back to the lemma itself on a miss."""
        words = self._table.get((lemma, factors))
        if not words:
            return [lemma], True
        return [w for w, _ in words[:k]], False

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for (lemma, factors), words in sorted(self._table.items()):
                for word, count in words:
                    fh.write(f"{lemma}\t{factors}\t{word}\t{count}\n")

    @classmethod
    def load(cls, path) -> "ReinflectionDictionary":
        d = cls()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                lemma, factors, word, count = line.split("\t")
                d.add(lemma, factors, word, int(count))
        return d.finalize()


def detokenize_factored(lemma_subwords, factors):
    """Join BPE lemma pieces into words, collapsing each word's repeated
    factor tags to the first piece's tag."""
    if len(lemma_subwords) != len(factors):
        raise ContractError("factored streams differ in length")
    words, word_factors = [], []
    buf, buf_factor = "", None
    from .subword import CONTINUATION

    for piece, factor in zip(lemma_subwords, factors):
        if buf_factor is None:
            buf_factor = factor
        if piece.endswith(CONTINUATION):
            buf += piece[: -len(CONTINUATION)]
        else:
            words.append(buf + piece)
            word_factors.append(buf_factor)
            buf, buf_factor = "", None
    if buf:
        words.append(buf)
        word_factors.append(buf_factor)
    return words, word_factors


def reinflect(dictionary: ReinflectionDictionary, lemmas, factors, k: int,
              cap: int = 1000):
    """Expand a word-level (lemma, factor) sentence into surface sentences.

    Per position up to ``k`` ranked candidates are considered; combinations
    are enumerated best-candidates-first and capped.  Unknown pairs fall
    back to the lemma string.  Returns (sentences, miss count).
    """
    if k < 1:
        raise ContractError("reinflect: k must be >= 1")
    if len(lemmas) != len(factors):
        raise ContractError("reinflect: lemma/factor streams differ in length")
    misses = 0
    options = []
    for lemma, factor in zip(lemmas, factors):
        words, missed = dictionary.candidates(lemma, factor, k)
        misses += missed
        options.append(words)
    sentences = []
    for combo in itertools.product(*options):
        sentences.append(list(combo))
        if len(sentences) >= cap:
            break
    return sentences, misses
