"""Recurrent language models (simple RNN or GRU) for n-best rescoring:
next-token training with perplexity-based early stopping, and sentence
log-probability scoring with per-sentence state reset.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .corpus import Vocabulary, _pad_ids
from .errors import CheckpointError, ConfigError, ContractError
from .layers import GruCell, ParamFactory, dropout
from .model import CHECKPOINT_MAGIC, _vocab_from_dict, _vocab_to_dict
from .rng import RngHub
from .training import TrainSchedule, TrainResult, _fit

LM_KINDS = ("simple-rnn", "gru")


@dataclass
class LmConfig:
    vocab: Vocabulary
    kind: str = "gru"
    emb_dim: int = 64
    hidden: int = 128
    dropout_p: float = 0.0
    precision: str = "f4"

    def __post_init__(self):
        if self.kind not in LM_KINDS:
            raise ConfigError(f"unknown language model kind {self.kind!r}")
        if self.precision not in ("f4", "f8"):
            raise ConfigError("precision must be 'f4' or 'f8'")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f4" else np.float64


class SimpleRnnCell:
    """Elman recurrence: h = tanh(W x + U h_prev + b)."""

    def __init__(self, factory, prefix, input_dim, hidden_dim):
        self.hidden_dim = hidden_dim
        self.w = factory.xavier(prefix + ".w", (input_dim, hidden_dim))
        self.u = factory.xavier(prefix + ".u", (hidden_dim, hidden_dim))
        self.b = factory.zeros(prefix + ".b", (hidden_dim,))

    def step(self, x, h_prev, mask=None):
        h = T.tanh(T.add(T.add(T.matmul(x, self.w), T.matmul(h_prev, self.u)), self.b))
        if mask is not None:
            keep = np.asarray(mask, dtype=h.dtype)
            h = T.add(T.mul(h, T.Tensor(keep)), T.mul(h_prev, T.Tensor(1.0 - keep)))
        return h

    def named_params(self):
        for p in (self.w, self.u, self.b):
            yield p.name, p


class LanguageModel:
    """Embedding, recurrent cell, and an output projection over the vocabulary."""

    def __init__(self, config: LmConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        factory = ParamFactory(seed, config.dtype)
        self.emb = factory.xavier("lm.emb", (len(config.vocab), config.emb_dim))
        if config.kind == "gru":
            self.cell = GruCell(factory, "lm.cell", config.emb_dim, config.hidden)
        else:
            self.cell = SimpleRnnCell(factory, "lm.cell", config.emb_dim, config.hidden)
        self.w_out = factory.xavier("lm.w_out", (config.hidden, len(config.vocab)))
        self.b_out = factory.zeros("lm.b_out", (len(config.vocab),))

    def named_params(self):
        yield self.emb.name, self.emb
        yield from self.cell.named_params()
        yield self.w_out.name, self.w_out
        yield self.b_out.name, self.b_out

    def param_hash(self):
        import hashlib

        digest = hashlib.sha256()
        for name, p in self.named_params():
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(p.data).tobytes())
        return digest.hexdigest()

    def _step_logits(self, prev_ids, h):
        x = T.embedding_lookup(self.emb, np.asarray(prev_ids, dtype=np.int64))
        h = self.cell.step(x, h)
        logits = T.add(T.matmul(h, self.w_out), self.b_out)
        return h, logits

    def loss(self, batch, hub=None, training: bool = False) -> T.Tensor:
        """Mean over sentences of per-sentence mean next-token NLL."""
        rows, mask = batch
        dt = self.config.dtype
        mask = mask.astype(dt, copy=False)
        n, width = rows.shape
        vocab = self.config.vocab
        h = T.Tensor(np.zeros((n, self.config.hidden), dtype=dt))
        total = T.Tensor(np.zeros(n, dtype=dt))
        p = self.config.dropout_p
        for t in range(width):
            prev = np.full(n, vocab.bos_id, dtype=np.int64) if t == 0 else rows[:, t - 1]
            x = T.embedding_lookup(self.emb, prev)
            if training and p > 0.0:
                x = dropout(x, p, True, hub.stream("dropout/lm_emb"))
            h = self.cell.step(x, h)
            hh = h
            if training and p > 0.0:
                hh = dropout(hh, p, True, hub.stream("dropout/lm_hidden"))
            logits = T.add(T.matmul(hh, self.w_out), self.b_out)
            nll = T.neg(T.take_rows(T.log_softmax(logits), rows[:, t]))
            total = T.add(total, T.mul(nll, T.Tensor(mask[:, t])))
        lens = mask.sum(axis=1)
        return T.mean_(T.div(total, T.Tensor(lens)))


def make_lm_batches(sentences, vocab: Vocabulary, batch_size: int, rng):
    """Sentences -> shuffled, length-bucketed (rows, mask) batches with eos."""
    order = np.arange(len(sentences))
    rng.shuffle(order)
    order = sorted(order, key=lambda i: len(sentences[i]))
    chunks = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    rng.shuffle(chunks)
    batches = []
    for chunk in chunks:
        rows = [vocab.ids(sentences[i]) + [vocab.eos_id] for i in chunk]
        batches.append(_pad_ids(rows, vocab.pad_id))
    return batches


def perplexity(lm: LanguageModel, sentences) -> float:
    """Corpus perplexity: exp of total NLL over total tokens (eos included)."""
    vocab = lm.config.vocab
    total_nll = 0.0
    total_tokens = 0
    with T.no_grad():
        for lo in range(0, len(sentences), 64):
            chunk = sentences[lo : lo + 64]
            rows, mask = _pad_ids([vocab.ids(s) + [vocab.eos_id] for s in chunk],
                                  vocab.pad_id)
            n, width = rows.shape
            h = T.Tensor(np.zeros((n, lm.config.hidden), dtype=lm.config.dtype))
            for t in range(width):
                prev = np.full(n, vocab.bos_id, dtype=np.int64) if t == 0 else rows[:, t - 1]
                h, logits = lm._step_logits(prev, h)
                lp = T.log_softmax(logits).data
                picked = lp[np.arange(n), rows[:, t]]
                total_nll -= float((picked * mask[:, t]).sum())
            total_tokens += int(mask.sum())
    return math.exp(total_nll / max(1, total_tokens))


def lm_train(sentences, valid_sentences, config: LmConfig, schedule: TrainSchedule,
             seed: int) -> TrainResult:
    """Next-token training with the shared loop; early stop on perplexity."""
    if not sentences:
        raise ContractError("lm_train requires a non-empty corpus")
    if not valid_sentences:
        raise ContractError("lm_train requires a validation set")
    model = LanguageModel(config, seed)
    hub = RngHub(seed)
    sched = replace(schedule, selection_metric="perplexity")

    def batches_fn(hub_):
        return make_lm_batches(sentences, config.vocab, sched.batch_size,
                               hub_.stream("shuffle"))

    def loss_fn(batch, hub_):
        return model.loss(batch, hub_, training=True)

    def validate_fn():
        ppl = perplexity(model, valid_sentences)
        return ppl, -ppl  # lower perplexity is better

    return _fit(model, batches_fn, loss_fn, validate_fn, sched, hub)


def lm_score(lm: LanguageModel, tokens) -> float:
    """Total ln P of the given tokens, conditioning the first on bos.

    State resets per call; the caller appends eos when it should be scored.
    """
    vocab = lm.config.vocab
    ids = vocab.ids(tokens)
    if not ids:
        return 0.0
    score = 0.0
    with T.no_grad():
        h = T.Tensor(np.zeros((1, lm.config.hidden), dtype=lm.config.dtype))
        prev = vocab.bos_id
        for tok in ids:
            h, logits = lm._step_logits([prev], h)
            lp = T.log_softmax(logits).data
            score += float(lp[0, tok])
            prev = tok
    return score


# ---------------------------------------------------------------------------
# checkpoints

def lm_config_to_dict(config: LmConfig) -> dict:
    return {"vocab": _vocab_to_dict(config.vocab), "kind": config.kind,
            "emb_dim": config.emb_dim, "hidden": config.hidden,
            "dropout_p": config.dropout_p, "precision": config.precision}


def save_lm(lm: LanguageModel, path) -> None:
    tensors = list(lm.named_params())
    header = {"kind": "lm", "config": lm_config_to_dict(lm.config), "seed": lm.seed,
              "tensors": [[name, list(p.shape), lm.config.precision] for name, p in tensors]}
    with open(path, "wb") as fh:
        fh.write((CHECKPOINT_MAGIC + "\n").encode())
        fh.write((json.dumps(header, ensure_ascii=False) + "\n").encode())
        for _, p in tensors:
            fh.write(np.ascontiguousarray(p.data, dtype="<" + lm.config.precision).tobytes())


def load_lm(path) -> LanguageModel:
    with open(path, "rb") as fh:
        magic = fh.readline().decode("utf-8", errors="replace").strip()
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad checkpoint magic {magic!r} (want {CHECKPOINT_MAGIC})")
        try:
            header = json.loads(fh.readline().decode())
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
        if header.get("kind") != "lm":
            raise CheckpointError(f"not a language model checkpoint: kind={header.get('kind')!r}")
        cfg = dict(header["config"])
        cfg["vocab"] = _vocab_from_dict(cfg["vocab"])
        lm = LanguageModel(LmConfig(**cfg), seed=header.get("seed", 0))
        named = dict(lm.named_params())
        for name, shape, prec in header["tensors"]:
            if name not in named:
                raise CheckpointError(f"unknown tensor {name} in checkpoint")
            param = named[name]
            if list(param.shape) != list(shape):
                raise CheckpointError(f"shape mismatch for {name}: {shape} vs {list(param.shape)}")
            nbytes = int(np.prod(shape, dtype=np.int64)) * np.dtype("<" + prec).itemsize
            raw = fh.read(nbytes)
            if len(raw) != nbytes:
                raise CheckpointError(f"truncated checkpoint while reading {name}")
            param.data[...] = np.frombuffer(raw, dtype="<" + prec).reshape(shape)
    return lm
