"""Word-level and factored sequence-to-sequence models: configuration,
construction, the training loss, parameter accounting, and checkpoints.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .corpus import Batch, Vocabulary
from .errors import CheckpointError, ConfigError, ContractError
from .layers import (
    CgruDecoder,
    Embeddings,
    FactoredHead,
    GruCell,
    OutputHead,
    ParamFactory,
    dropout,
    encode,
)

CHECKPOINT_MAGIC = "KNMT1"


@dataclass
class ModelConfig:
    src_vocab: Vocabulary
    tgt_vocab: Vocabulary
    emb_dim: int = 200
    enc_hidden: int = 500
    dec_hidden: int = 500
    align_dim: int | None = None  # defaults to the annotation size 2*enc_hidden
    tying_mode: str = "tied2"
    init_mode: str = "mean_state"
    output_mode: str = "conditional"
    factored: bool = False
    h2o_mode: str = "shared"
    factor_vocab: Vocabulary | None = None
    dropout_p: float = 0.0
    layer_norm: bool = True
    precision: str = "f4"

    def __post_init__(self):
        if self.align_dim is None:
            self.align_dim = 2 * self.enc_hidden
        if self.tying_mode == "tied3" and self.src_vocab != self.tgt_vocab:
            raise ConfigError("tied3 requires a single combined vocabulary")
        if self.factored and self.factor_vocab is None:
            raise ConfigError("factored model requires a factor vocabulary")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p must be in [0, 1)")
        if self.precision not in ("f4", "f8"):
            raise ConfigError("precision must be 'f4' or 'f8'")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f4" else np.float64

    @property
    def annotation_dim(self):
        return 2 * self.enc_hidden


def param_count(config: ModelConfig) -> int:
    """Closed-form parameter count implied by a configuration."""
    e, h, d = config.emb_dim, config.enc_hidden, config.dec_hidden
    a, ann = config.align_dim, config.annotation_dim
    s_v, t_v = len(config.src_vocab), len(config.tgt_vocab)

    def gru(in_dim, hid, ln):
        n = 3 * (in_dim * hid + hid * hid + hid)
        return n + (3 * hid if ln else 0)

    if config.tying_mode == "tied3":
        total = s_v * e
    else:
        total = s_v * e + t_v * e
    total += 2 * gru(e, h, config.layer_norm)          # bi-directional encoder
    total += gru(e, d, False) + gru(ann, d, False)     # CGRU stages
    total += d * a + ann * a + a + a                   # attention
    if config.init_mode == "mean_state":
        total += ann * d + d

    def head(vocab, own_projection):
        n = d * e + e + vocab                          # w_h, b_o, b_logit
        if config.output_mode == "conditional":
            n += ann * e
        if own_projection:
            n += vocab * e
        return n

    if config.factored:
        f_v = len(config.factor_vocab)
        total += head(t_v, config.tying_mode == "none")
        total += f_v * e + f_v                         # factor projection
        if config.h2o_mode == "separate":
            total += d * e + e
            if config.output_mode == "conditional":
                total += ann * e
    else:
        total += head(t_v, config.tying_mode == "none")
    return total


class Seq2SeqModel:
    """Encoder, conditional-GRU decoder, and output head(s) over one config."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        factory = ParamFactory(seed, config.dtype)
        self.emb = Embeddings(factory, len(config.src_vocab), len(config.tgt_vocab),
                              config.emb_dim, config.tying_mode)
        self.enc_fwd = GruCell(factory, "enc_fwd", config.emb_dim, config.enc_hidden,
                               layer_norm=config.layer_norm)
        self.enc_bwd = GruCell(factory, "enc_bwd", config.emb_dim, config.enc_hidden,
                               layer_norm=config.layer_norm)
        self.dec = CgruDecoder(factory, "dec", config.emb_dim, config.annotation_dim,
                               config.dec_hidden, config.align_dim, config.init_mode)
        if config.factored:
            self.head = FactoredHead(factory, "head", config.h2o_mode,
                                     config.output_mode, config.dec_hidden,
                                     config.emb_dim, config.annotation_dim,
                                     self.emb.out_matrix, len(config.tgt_vocab),
                                     len(config.factor_vocab))
        else:
            self.head = OutputHead(factory, "head", config.output_mode,
                                   config.dec_hidden, config.emb_dim,
                                   config.annotation_dim, self.emb.out_matrix,
                                   len(config.tgt_vocab))

    @property
    def dtype(self):
        return self.config.dtype

    def named_params(self):
        yield from self.emb.named_params()
        yield from self.enc_fwd.named_params()
        yield from self.enc_bwd.named_params()
        yield from self.dec.named_params()
        yield from self.head.named_params()

    def params(self):
        return [p for _, p in self.named_params()]

    def count_params(self) -> int:
        return param_count(self.config)

    def enumerate_param_count(self) -> int:
        """Independent count: sum of sizes of all named tensors."""
        return sum(p.size for _, p in self.named_params())

    def param_hash(self) -> str:
        import hashlib

        digest = hashlib.sha256()
        for name, p in self.named_params():
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(p.data).tobytes())
        return digest.hexdigest()

    def tying_aliases(self) -> dict:
        aliases = {"source_table": self.emb.src_table.name,
                   "feedback_table": self.emb.tgt_table.name,
                   "output_matrix": self.emb.out_matrix.name}
        return aliases

    # ------------------------------------------------------------------
    # forward passes

    def _encode_batch(self, src, src_mask, hub=None, training=False):
        p = self.config.dropout_p
        steps = []
        for t in range(src.shape[1]):
            emb_t = self.emb.source(src[:, t])
            if training and p > 0.0:
                emb_t = dropout(emb_t, p, True, hub.stream("dropout/src_emb"))
            steps.append(emb_t)
        ann = encode(steps, self.enc_fwd, self.enc_bwd, src_mask)
        if training and p > 0.0:
            ann = dropout(ann, p, True, hub.stream("dropout/enc_states"))
        return ann

    def loss(self, batch: Batch, hub=None, training: bool = False) -> T.Tensor:
        """Mean over sentences of per-sentence mean-per-token NLL.

        Factored models add the factor-stream NLL to the lemma NLL at each
        step before averaging.
        """
        if self.config.factored and batch.factors is None:
            raise ContractError("factored model requires factor ids in the batch")
        if training and self.config.dropout_p > 0.0 and hub is None:
            raise ContractError("training with dropout requires an rng hub")
        dt = self.dtype
        src_mask = batch.src_mask.astype(dt, copy=False)
        tgt_mask = batch.tgt_mask.astype(dt, copy=False)
        batch_size, tgt_len = batch.tgt.shape
        p = self.config.dropout_p

        ann = self._encode_batch(batch.src, src_mask, hub, training)
        ann_proj = self.dec.attention.project_annotations(ann)
        h = self.dec.initial_state(ann, src_mask)

        bos = np.full(batch_size, self.config.tgt_vocab.bos_id, dtype=np.int64)
        total = T.Tensor(np.zeros(batch_size, dtype=dt))
        for t in range(tgt_len):
            prev_ids = bos if t == 0 else batch.tgt[:, t - 1]
            y_emb = self.emb.feedback(prev_ids)
            h, ctx, _ = self.dec.step(y_emb, h, ann, ann_proj, src_mask)
            if self.config.factored:
                lemma_o, factor_o = self.head.activations(h, y_emb, ctx)
                if training and p > 0.0:
                    lemma_o = dropout(lemma_o, p, True, hub.stream("dropout/presoftmax"))
                    if self.config.h2o_mode == "separate":
                        factor_o = dropout(factor_o, p, True,
                                           hub.stream("dropout/presoftmax_factor"))
                    else:
                        factor_o = lemma_o
                lemma_logits, factor_logits = self.head.logits(lemma_o, factor_o)
                nll = T.neg(T.add(
                    T.take_rows(T.log_softmax(lemma_logits), batch.tgt[:, t]),
                    T.take_rows(T.log_softmax(factor_logits), batch.factors[:, t])))
            else:
                o = self.head.activation(h, y_emb, ctx)
                if training and p > 0.0:
                    o = dropout(o, p, True, hub.stream("dropout/presoftmax"))
                logits = self.head.logits_from_activation(o)
                nll = T.neg(T.take_rows(T.log_softmax(logits), batch.tgt[:, t]))
            total = T.add(total, T.mul(nll, T.Tensor(tgt_mask[:, t])))
        lens = tgt_mask.sum(axis=1)
        return T.mean_(T.div(total, T.Tensor(lens)))

    def forward_loss(self, src_ids, tgt_ids, factor_ids=None) -> T.Tensor:
        """Loss of one teacher-forced sentence (ids without the trailing eos)."""
        if len(src_ids) == 0 or len(tgt_ids) == 0:
            raise ContractError("forward_loss requires non-empty sequences")
        if self.config.factored:
            if factor_ids is None or len(factor_ids) != len(tgt_ids):
                raise ContractError("factored loss requires factor ids of equal length")
        batch = _single_batch(self.config, src_ids, tgt_ids, factor_ids)
        return self.loss(batch)

    # ------------------------------------------------------------------
    # decoding support

    def start_decode(self, src_ids):
        """Encode one source sentence; returns (annotations, proj, mask, state)."""
        src = np.asarray(src_ids, dtype=np.int64).reshape(1, -1)
        ann = self._encode_batch(src, None, None, False)
        ann_proj = self.dec.attention.project_annotations(ann)
        h = self.dec.initial_state(ann, None)
        return ann, ann_proj, None, h

    def start_decode_batch(self, src, src_mask):
        """Encode padded (batch, seq) sources; returns (ann, proj, mask, state)."""
        src_mask = src_mask.astype(self.dtype, copy=False)
        ann = self._encode_batch(src, src_mask, None, False)
        ann_proj = self.dec.attention.project_annotations(ann)
        h = self.dec.initial_state(ann, src_mask)
        return ann, ann_proj, src_mask, h

    def decode_step(self, prev_ids, h, ann, ann_proj, src_mask):
        """Advance all hypothesis rows one step.

        Returns (new state, log-prob rows) for word models and
        (new state, lemma log-probs, factor log-probs) for factored ones.
        """
        y_emb = self.emb.feedback(np.asarray(prev_ids, dtype=np.int64))
        h, ctx, _ = self.dec.step(y_emb, h, ann, ann_proj, src_mask)
        if self.config.factored:
            lemma_o, factor_o = self.head.activations(h, y_emb, ctx)
            lemma_logits, factor_logits = self.head.logits(lemma_o, factor_o)
            return (h, T.log_softmax(lemma_logits).data, T.log_softmax(factor_logits).data)
        logits = self.head.logits(h, y_emb, ctx)
        return h, T.log_softmax(logits).data


def _single_batch(config, src_ids, tgt_ids, factor_ids=None) -> Batch:
    src = np.asarray(src_ids, dtype=np.int64).reshape(1, -1)
    tgt = np.asarray(list(tgt_ids) + [config.tgt_vocab.eos_id], dtype=np.int64).reshape(1, -1)
    factors = None
    if config.factored:
        factors = np.asarray(list(factor_ids) + [config.factor_vocab.eos_id],
                             dtype=np.int64).reshape(1, -1)
    ones = np.ones_like(src, dtype=np.float32)
    return Batch(src, ones, tgt, np.ones_like(tgt, dtype=np.float32), factors)


def build(config: ModelConfig, seed: int) -> Seq2SeqModel:
    """Deterministic model construction: same (config, seed) -> same bits."""
    return Seq2SeqModel(config, seed)


def count_params(model: Seq2SeqModel) -> int:
    return model.count_params()


def forward_loss(model: Seq2SeqModel, src_ids, tgt_ids, factor_ids=None) -> T.Tensor:
    return model.forward_loss(src_ids, tgt_ids, factor_ids)


# ---------------------------------------------------------------------------
# checkpoints

def _vocab_to_dict(v: Vocabulary | None):
    if v is None:
        return None
    return {"tokens": v.id_to_token, "reserved": v.reserved}


def _vocab_from_dict(d):
    if d is None:
        return None
    if d["reserved"]:
        return Vocabulary(d["tokens"][len(("<pad>", "<eos>", "<unk>", "<bos>")):],
                          reserved=True)
    return Vocabulary(d["tokens"], reserved=False)


def config_to_dict(config: ModelConfig) -> dict:
    d = {f.name: getattr(config, f.name) for f in dataclasses.fields(config)}
    d["src_vocab"] = _vocab_to_dict(config.src_vocab)
    d["tgt_vocab"] = _vocab_to_dict(config.tgt_vocab)
    d["factor_vocab"] = _vocab_to_dict(config.factor_vocab)
    return d


def config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    d["src_vocab"] = _vocab_from_dict(d["src_vocab"])
    d["tgt_vocab"] = _vocab_from_dict(d["tgt_vocab"])
    d["factor_vocab"] = _vocab_from_dict(d["factor_vocab"])
    return ModelConfig(**d)


def save_checkpoint(model: Seq2SeqModel, path) -> None:
    tensors = list(model.named_params())
    header = {
        "kind": "seq2seq",
        "config": config_to_dict(model.config),
        "seed": model.seed,
        "tensors": [[name, list(p.shape), model.config.precision] for name, p in tensors],
        "aliases": model.tying_aliases(),
    }
    with open(path, "wb") as fh:
        fh.write((CHECKPOINT_MAGIC + "\n").encode())
        fh.write((json.dumps(header, ensure_ascii=False) + "\n").encode())
        for _, p in tensors:
            fh.write(np.ascontiguousarray(p.data, dtype="<" + model.config.precision).tobytes())


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        magic = fh.readline().decode("utf-8", errors="replace").strip()
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad checkpoint magic {magic!r} (want {CHECKPOINT_MAGIC})")
        try:
            return json.loads(fh.readline().decode())
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc


def load_checkpoint(path) -> Seq2SeqModel:
    with open(path, "rb") as fh:
        magic = fh.readline().decode("utf-8", errors="replace").strip()
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad checkpoint magic {magic!r} (want {CHECKPOINT_MAGIC})")
        try:
            header = json.loads(fh.readline().decode())
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
        if header.get("kind") != "seq2seq":
            raise CheckpointError(f"not a seq2seq checkpoint: kind={header.get('kind')!r}")
        config = config_from_dict(header["config"])
        model = Seq2SeqModel(config, seed=header.get("seed", 0))
        named = dict(model.named_params())
        order = [name for name, _ in model.named_params()]
        listed = [entry[0] for entry in header["tensors"]]
        if listed != order:
            missing = set(order) ^ set(listed)
            raise CheckpointError(f"tensor list mismatch, offending fields: {sorted(missing) or listed}")
        for name, shape, prec in header["tensors"]:
            param = named[name]
            if list(param.shape) != list(shape):
                raise CheckpointError(f"shape mismatch for {name}: {shape} vs {list(param.shape)}")
            nbytes = int(np.prod(shape, dtype=np.int64)) * np.dtype("<" + prec).itemsize
            raw = fh.read(nbytes)
            if len(raw) != nbytes:
                raise CheckpointError(f"truncated checkpoint while reading {name}")
            param.data[...] = np.frombuffer(raw, dtype="<" + prec).reshape(shape)
        if fh.read(1):
            raise CheckpointError("trailing bytes after last tensor payload")
    return model
