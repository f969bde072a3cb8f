"""Corpus-level BLEU with clipped n-gram precisions and brevity penalty.

Semantics follow the common tokenized corpus scorer: geometric mean of
p1..p4, zero if any precision is zero, BP = exp(1 - r/h) when the
hypothesis side is shorter.  A smoothed variant (add-one on orders > 1)
exists for early stopping on tiny validation sets.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

from .errors import ContractError


@dataclass
class BleuReport:
    bleu: float
    precisions: list
    brevity_penalty: float
    hyp_len: int
    ref_len: int

    def format(self) -> str:
        ps = "/".join(f"{100.0 * p:.1f}" for p in self.precisions)
        ratio = self.hyp_len / self.ref_len if self.ref_len else 0.0
        return (f"BLEU = {self.bleu:.2f}, {ps} "
                f"(BP={self.brevity_penalty:.3f}, ratio={ratio:.3f}, "
                f"hyp_len={self.hyp_len}, ref_len={self.ref_len})")


def _ngram_counts(tokens, order):
    return Counter(tuple(tokens[i : i + order]) for i in range(len(tokens) - order + 1))


def bleu(hypotheses, references, max_order: int = 4, smooth: bool = False) -> BleuReport:
    """Score a corpus of token-list hypotheses against single references."""
    if not hypotheses:
        raise ContractError("bleu: empty hypothesis set")
    if len(hypotheses) != len(references):
        raise ContractError(
            f"bleu: {len(hypotheses)} hypotheses vs {len(references)} references")
    matched = [0] * max_order
    total = [0] * max_order
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp = list(hyp)
        ref = list(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_order + 1):
            hc = _ngram_counts(hyp, n)
            if not hc:
                continue
            rc = _ngram_counts(ref, n)
            total[n - 1] += sum(hc.values())
            matched[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())

    precisions = []
    for n in range(max_order):
        if smooth and n > 0:
            precisions.append((matched[n] + 1.0) / (total[n] + 1.0))
        elif total[n] > 0:
            precisions.append(matched[n] / total[n])
        else:
            precisions.append(0.0)

    if min(precisions) > 0.0:
        score = math.exp(sum(math.log(p) for p in precisions) / max_order)
    else:
        score = 0.0
    bp = 1.0 if hyp_len >= ref_len or hyp_len == 0 else math.exp(1.0 - ref_len / hyp_len)
    return BleuReport(100.0 * bp * score, precisions, bp, hyp_len, ref_len)
