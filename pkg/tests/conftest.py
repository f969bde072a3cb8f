import pathlib
import sys

import numpy as np
import pytest

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parent))

from knmt.corpus import ParallelCorpus, Segment, Vocabulary
from knmt.model import ModelConfig, build

DATA_DIR = pathlib.Path(__file__).resolve().parent.parent / "data" / "toy"


def tiny_config(n_words=6, emb=4, enc=5, dec=6, factored=False, n_factors=2,
                precision="f8", **kw):
    vocab = Vocabulary([f"w{i}" for i in range(n_words)])
    factor_vocab = None
    if factored:
        factor_vocab = Vocabulary([f"f{i}" for i in range(n_factors)])
    defaults = dict(src_vocab=vocab, tgt_vocab=vocab, emb_dim=emb, enc_hidden=enc,
                    dec_hidden=dec, tying_mode="tied2", factored=factored,
                    factor_vocab=factor_vocab, precision=precision)
    defaults.update(kw)
    return ModelConfig(**defaults)


def tiny_model(seed=0, **kw):
    return build(tiny_config(**kw), seed)


def copy_task_corpus(n_pairs, vocab_words, rng, min_len=4, max_len=8):
    segments = []
    for _ in range(n_pairs):
        n = int(rng.integers(min_len, max_len + 1))
        sent = [vocab_words[int(i)] for i in rng.integers(0, len(vocab_words), size=n)]
        segments.append(Segment(list(sent), list(sent)))
    return ParallelCorpus(segments)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
