"""N-best rescoring under weighted feature combinations, and dev-BLEU weight
tuning by cyclic coordinate ascent with golden-section refinement.

A candidate is a (tokens, features) pair; features are named real scores
(translation log-prob, language model log-probs, optionally word count).
Rescoring is scale-invariant: weights scaled by any positive constant give
the identical ranking.
"""

from __future__ import annotations

import logging
import math

from .metrics import bleu
from .errors import ContractError
from .rng import named_rng

log = logging.getLogger("knmt")

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def check_weights(weights: dict) -> dict:
    if not weights or all(w == 0 for w in weights.values()):
        raise ContractError("rerank weights need at least one nonzero entry")
    return weights


def compute_features(nbest_tokens, scorers):
    """Build (tokens, features) candidates; scorers are (name, fn(i, tokens))."""
    out = []
    for i, hyps in enumerate(nbest_tokens):
        row = []
        for tokens in hyps:
            feats = {name: float(fn(i, tokens)) for name, fn in scorers}
            row.append((tokens, feats))
        out.append(row)
    return out


def rescore_nbest(candidates, scorers, weights: dict):
    """Rescore one sentence's n-best list; returns (tokens, total, features)
    triples in descending total order (stable).

    ``candidates`` holds token lists or (tokens, features) pairs; ``scorers``
    (name, fn(tokens)) fill in any missing features.  Hypotheses with a
    non-finite score are dropped with a warning.
    """
    check_weights(weights)
    scored = []
    for cand in candidates:
        tokens, feats = cand if isinstance(cand, tuple) else (cand, {})
        feats = dict(feats)
        ok = True
        for name, fn in scorers or ():
            if name not in feats:
                feats[name] = float(fn(tokens))
        for name, value in feats.items():
            if not math.isfinite(value):
                log.warning("dropping hypothesis with non-finite %s score", name)
                ok = False
                break
        if ok:
            scored.append((tokens, feats))
    totals = [sum(weights.get(n, 0.0) * v for n, v in feats.items())
              for _, feats in scored]
    order = sorted(range(len(scored)), key=lambda i: -totals[i])
    return [(scored[i][0], totals[i], scored[i][1]) for i in order]


def _one_best_bleu(candidates_per_sentence, references, weights):
    picks = []
    for row in candidates_per_sentence:
        best, best_total = None, -math.inf
        for tokens, feats in row:
            total = sum(weights.get(n, 0.0) * v for n, v in feats.items())
            if total > best_total:
                best, best_total = tokens, total
        picks.append(best if best is not None else [])
    return bleu(picks, references).bleu


def tune_weights(nbest_dev, references, iterations: int = 2, seed: int = 0,
                 restarts: int = 3, span: float = 3.0) -> dict:
    """Maximize dev BLEU of the rescored 1-best over feature weights.

    Cyclic coordinate ascent: per coordinate, a coarse grid scan over
    [-span, span] followed by golden-section refinement; ``restarts`` runs
    (uniform weights first, then seeded random starts) with the best kept.
    Never returns weights scoring below the uniform starting point.
    """
    if not nbest_dev or len(nbest_dev) != len(references):
        raise ContractError("tune_weights requires aligned dev n-best lists and references")
    names = sorted({n for row in nbest_dev for _, feats in row for n in feats})
    if not names:
        raise ContractError("tune_weights requires at least one feature")
    rng = named_rng(seed, "tune_weights")

    def objective(w):
        return _one_best_bleu(nbest_dev, references, w)

    def ascend(start):
        w = dict(start)
        score = objective(w)
        for _ in range(iterations):
            improved = False
            for name in names:
                base = w[name]
                grid = [base] + [span * (k / 8.0 - 1.0) for k in range(17)]
                best_v, best_s = base, score
                for v in grid:
                    w[name] = v
                    s = objective(w)
                    if s > best_s:
                        best_v, best_s = v, s
                lo, hi = best_v - span / 8.0, best_v + span / 8.0
                a, b = lo, hi
                for _ in range(12):
                    c = b - GOLDEN * (b - a)
                    d = a + GOLDEN * (b - a)
                    w[name] = c
                    sc = objective(w)
                    w[name] = d
                    sd = objective(w)
                    if sc >= sd:
                        b = d
                        cand_v, cand_s = c, sc
                    else:
                        a = c
                        cand_v, cand_s = d, sd
                    if cand_s > best_s:
                        best_v, best_s = cand_v, cand_s
                w[name] = best_v
                if best_s > score:
                    score = best_s
                    improved = True
            if not improved:
                break
        return w, score

    uniform = {n: 1.0 for n in names}
    best_w, best_score = ascend(uniform)
    baseline = objective(uniform)
    if best_score < baseline:
        best_w, best_score = uniform, baseline
    for _ in range(max(0, restarts - 1)):
        start = {n: float(rng.uniform(-1.0, 1.0)) for n in names}
        if all(v == 0.0 for v in start.values()):
            start = dict(uniform)
        w, s = ascend(start)
        if s > best_score:
            best_w, best_score = w, s
    if all(v == 0.0 for v in best_w.values()):
        best_w = dict(uniform)
    return best_w


# ---------------------------------------------------------------------------
# scoring helpers and weights file I/O

def nmt_logprob(model, src_ids, tgt_ids) -> float:
    """Total ln P(target | source) under a word model (eos step included)."""
    from . import tensor as T

    with T.no_grad():
        loss = model.forward_loss(src_ids, tgt_ids)
    return -loss.item() * (len(tgt_ids) + 1)


def save_weights(path, weights: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for name in sorted(weights):
            fh.write(f"{name} = {weights[name]!r}\n")


def load_weights(path) -> dict:
    weights = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            name, sep, value = line.partition("=")
            if not sep:
                raise ContractError(f"malformed weights line: {line!r}")
            weights[name.strip()] = float(value.strip())
    return check_weights(weights)
