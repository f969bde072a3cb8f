"""Neural building blocks: embeddings with tying, layer norm, GRU cells,
additive attention, the two-stage conditional GRU decoder, dropout, and the
conditional / simple output heads.

All layers hold their parameters as named autodiff Tensors created through a
ParamFactory, which derives each parameter's initial values from
(seed, parameter name) so that adding a parameter elsewhere never changes
another one's initialization.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, VocabularyError
from .rng import named_rng

TYING_MODES = ("none", "tied2", "tied3")
INIT_MODES = ("mean_state", "zero")
OUTPUT_MODES = ("conditional", "simple")

_MASK_BIAS = -1e9  # added to attention scores at padded positions


class ParamFactory:
    """Creates named parameters with per-name deterministic initialization."""

    def __init__(self, seed: int, dtype=np.float32):
        self.seed = seed
        self.dtype = np.dtype(dtype)

    def _tensor(self, name, data):
        t = T.Tensor(data.astype(self.dtype), requires_grad=True, name=name)
        return t

    def xavier(self, name: str, shape) -> T.Tensor:
        if len(shape) == 2:
            fan_in, fan_out = shape
        else:
            fan_in, fan_out = shape[0], 1
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        rng = named_rng(self.seed, "init/" + name)
        return self._tensor(name, rng.uniform(-limit, limit, size=shape))

    def zeros(self, name: str, shape) -> T.Tensor:
        return self._tensor(name, np.zeros(shape))

    def ones(self, name: str, shape) -> T.Tensor:
        return self._tensor(name, np.ones(shape))


def dropout(x: T.Tensor, p: float, training: bool, rng: np.random.Generator) -> T.Tensor:
    """Inverted dropout: scales kept entries by 1/(1-p); identity in eval mode."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout: p must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype.type) / x.dtype.type(1.0 - p)
    return T.mul(x, T.Tensor(keep))


_standardize = T.standardize


class LayerNorm:
    """Standardize the last axis, then apply a learnable gain and bias."""

    def __init__(self, factory: ParamFactory, prefix: str, dim: int, eps: float = 1e-5):
        self.dim = dim
        self.eps = eps
        self.gain = factory.ones(prefix + ".gain", (dim,))
        self.bias = factory.zeros(prefix + ".bias", (dim,))

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return T.add(T.mul(_standardize(x, self.eps), self.gain), self.bias)

    def named_params(self):
        yield self.gain.name, self.gain
        yield self.bias.name, self.bias


class GruCell:
    """Gated recurrent unit: h = (1-z) * h_prev + z * tanh-candidate.

    With ``layer_norm`` on, each gate pre-activation is standardized and given
    a learnable gain; the gate bias then plays the normalization's bias role.
    """

    def __init__(self, factory, prefix, input_dim, hidden_dim, layer_norm=False,
                 eps: float = 1e-5):
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.layer_norm = layer_norm
        self.eps = eps
        self._params = {}
        for gate in ("z", "r", "h"):
            self._params["w_" + gate] = factory.xavier(f"{prefix}.w_{gate}", (input_dim, hidden_dim))
            self._params["u_" + gate] = factory.xavier(f"{prefix}.u_{gate}", (hidden_dim, hidden_dim))
            self._params["b_" + gate] = factory.zeros(f"{prefix}.b_{gate}", (hidden_dim,))
            if layer_norm:
                self._params["g_" + gate] = factory.ones(f"{prefix}.g_{gate}", (hidden_dim,))

    def __getattr__(self, item):
        try:
            return self.__dict__["_params"][item]
        except KeyError:
            raise AttributeError(item)

    def _preact(self, gate: str, lin: T.Tensor) -> T.Tensor:
        if self.layer_norm:
            lin = T.mul(_standardize(lin, self.eps), self._params["g_" + gate])
        return T.add(lin, self._params["b_" + gate])

    def step(self, x: T.Tensor, h_prev: T.Tensor, mask=None) -> T.Tensor:
        """One recurrence step; ``mask`` (batch,1) carries h_prev through pads."""
        z = T.sigmoid(self._preact("z", T.add(T.matmul(x, self.w_z), T.matmul(h_prev, self.u_z))))
        r = T.sigmoid(self._preact("r", T.add(T.matmul(x, self.w_r), T.matmul(h_prev, self.u_r))))
        cand = T.tanh(self._preact(
            "h", T.add(T.matmul(x, self.w_h), T.matmul(T.mul(r, h_prev), self.u_h))))
        h = T.add(T.mul(T.add(T.neg(z), 1.0), h_prev), T.mul(z, cand))
        if mask is not None:
            keep = np.asarray(mask, dtype=h.dtype)
            h = T.add(T.mul(h, T.Tensor(keep)), T.mul(h_prev, T.Tensor(1.0 - keep)))
        return h

    def named_params(self):
        order = ["w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h"]
        if self.layer_norm:
            order += ["g_z", "g_r", "g_h"]
        for key in order:
            p = self._params[key]
            yield p.name, p


def gru_step(cell: GruCell, x: T.Tensor, h_prev: T.Tensor) -> T.Tensor:
    return cell.step(x, h_prev)


class Embeddings:
    """Source/feedback embedding tables plus the output projection storage.

    tied2 shares one table between decoder feedback and the output
    projection; tied3 additionally shares it with the source side over a
    combined vocabulary.  Shared roles reference one Tensor, so an update
    through any view is visible through all of them.
    """

    def __init__(self, factory, src_vocab_size, tgt_vocab_size, dim, tying_mode):
        if tying_mode not in TYING_MODES:
            raise ConfigError(f"unknown tying mode {tying_mode!r}")
        if tying_mode == "tied3" and src_vocab_size != tgt_vocab_size:
            raise ConfigError("tied3 requires a single combined vocabulary")
        self.src_vocab_size = src_vocab_size
        self.tgt_vocab_size = tgt_vocab_size
        self.dim = dim
        self.tying_mode = tying_mode
        if tying_mode == "tied3":
            shared = factory.xavier("emb.shared", (src_vocab_size, dim))
            self.src_table = shared
            self.tgt_table = shared
            self.out_matrix = shared
        elif tying_mode == "tied2":
            self.src_table = factory.xavier("emb.src", (src_vocab_size, dim))
            self.tgt_table = factory.xavier("emb.tgt", (tgt_vocab_size, dim))
            self.out_matrix = self.tgt_table
        else:
            self.src_table = factory.xavier("emb.src", (src_vocab_size, dim))
            self.tgt_table = factory.xavier("emb.tgt", (tgt_vocab_size, dim))
            self.out_matrix = factory.xavier("emb.out", (tgt_vocab_size, dim))

    def _lookup(self, table, ids, limit):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= limit):
            raise VocabularyError(f"token id out of range (vocab size {limit})")
        return T.embedding_lookup(table, ids)

    def source(self, ids) -> T.Tensor:
        return self._lookup(self.src_table, ids, self.src_vocab_size)

    def feedback(self, ids) -> T.Tensor:
        return self._lookup(self.tgt_table, ids, self.tgt_vocab_size)

    def named_params(self):
        seen = set()
        for p in (self.src_table, self.tgt_table, self.out_matrix):
            if id(p) not in seen:
                seen.add(id(p))
                yield p.name, p


def embed(table: Embeddings, ids, role: str) -> T.Tensor:
    if role == "source":
        return table.source(ids)
    if role == "feedback":
        return table.feedback(ids)
    raise ContractError(f"embed: unknown role {role!r}")


def encode(emb_steps, fwd: GruCell, bwd: GruCell, mask=None) -> T.Tensor:
    """Bi-directional encoding of per-step embeddings.

    ``emb_steps`` is a list of (batch, emb) Tensors, one per source position;
    ``mask`` an optional (batch, seq) array.  Returns the annotation tensor
    (batch, seq, 2*hidden) with [forward ; backward] states per position.
    """
    seq = len(emb_steps)
    if seq == 0:
        raise ContractError("encode: empty source sequence")
    batch = emb_steps[0].shape[0]
    hidden = fwd.hidden_dim

    def run(cell, order):
        h = T.Tensor(np.zeros((batch, hidden), dtype=emb_steps[0].dtype))
        states = [None] * seq
        for t in order:
            m = None if mask is None else mask[:, t : t + 1]
            h = cell.step(emb_steps[t], h, m)
            states[t] = h
        return states

    fwd_states = run(fwd, range(seq))
    bwd_states = run(bwd, range(seq - 1, -1, -1))
    rows = [
        T.reshape(T.concat([fwd_states[t], bwd_states[t]], axis=1), (batch, 1, 2 * hidden))
        for t in range(seq)
    ]
    return T.concat(rows, axis=1)


class AttentionHead:
    """Additive attention over encoder annotations."""

    def __init__(self, factory, prefix, annotation_dim, state_dim, align_dim):
        self.annotation_dim = annotation_dim
        self.state_dim = state_dim
        self.align_dim = align_dim
        self.w_state = factory.xavier(prefix + ".w_state", (state_dim, align_dim))
        self.w_ann = factory.xavier(prefix + ".w_ann", (annotation_dim, align_dim))
        self.bias = factory.zeros(prefix + ".bias", (align_dim,))
        self.v = factory.xavier(prefix + ".v", (align_dim, 1))

    def project_annotations(self, annotations: T.Tensor) -> T.Tensor:
        """Precompute W_ann * annotations: (batch, seq, align)."""
        b, s, d = annotations.shape
        flat = T.matmul(T.reshape(annotations, (b * s, d)), self.w_ann)
        return T.reshape(flat, (b, s, self.align_dim))

    def step(self, state, annotations, ann_proj, mask=None):
        """Attend from decoder states; returns (context, weights).

        ``annotations`` (b, seq, dim) broadcasts against (rows, ...) states,
        so beam hypotheses can share one encoded source (b == 1, rows == beam).
        """
        rows = state.shape[0]
        s = annotations.shape[1]
        sp = T.reshape(T.add(T.matmul(state, self.w_state), self.bias),
                       (rows, 1, self.align_dim))
        scores = T.matmul(T.tanh(T.add(ann_proj, sp)), T.reshape(self.v, (self.align_dim,)))
        if mask is not None:
            bias = np.where(mask > 0, 0.0, _MASK_BIAS).astype(scores.dtype)
            scores = T.add(scores, T.Tensor(bias))
        weights = T.softmax(scores, axis=-1)
        context = T.sum_(T.mul(T.reshape(weights, (rows, s, 1)), annotations), axis=1)
        return context, weights

    def named_params(self):
        for p in (self.w_state, self.w_ann, self.bias, self.v):
            yield p.name, p


def attend(head: AttentionHead, annotations: T.Tensor, state: T.Tensor):
    """Single-call attention over (batch, seq, dim) annotations."""
    return head.step(state, annotations, head.project_annotations(annotations))


class CgruDecoder:
    """Two-stage conditional GRU: feedback GRU, attention, context GRU."""

    def __init__(self, factory, prefix, emb_dim, annotation_dim, hidden_dim,
                 align_dim, init_mode):
        if init_mode not in INIT_MODES:
            raise ConfigError(f"unknown init mode {init_mode!r}")
        self.hidden_dim = hidden_dim
        self.init_mode = init_mode
        self.gru1 = GruCell(factory, prefix + ".gru1", emb_dim, hidden_dim)
        self.gru2 = GruCell(factory, prefix + ".gru2", annotation_dim, hidden_dim)
        self.attention = AttentionHead(factory, prefix + ".att", annotation_dim,
                                       hidden_dim, align_dim)
        if init_mode == "mean_state":
            self.w_init = factory.xavier(prefix + ".w_init", (annotation_dim, hidden_dim))
            self.b_init = factory.zeros(prefix + ".b_init", (hidden_dim,))

    def initial_state(self, annotations: T.Tensor, mask=None) -> T.Tensor:
        b, s, d = annotations.shape
        if self.init_mode == "zero":
            return T.Tensor(np.zeros((b, self.hidden_dim), dtype=annotations.dtype))
        if mask is None:
            mean = T.mean_(annotations, axis=1)
        else:
            lens = mask.sum(axis=1, keepdims=True).astype(annotations.dtype)
            summed = T.sum_(T.mul(annotations, T.Tensor(mask[:, :, None])), axis=1)
            mean = T.div(summed, T.Tensor(lens))
        return T.tanh(T.add(T.matmul(mean, self.w_init), self.b_init))

    def step(self, y_prev_emb, h_prev, annotations, ann_proj, mask=None):
        """Returns (h_t, context, attention weights)."""
        s = self.gru1.step(y_prev_emb, h_prev)
        context, weights = self.attention.step(s, annotations, ann_proj, mask)
        h = self.gru2.step(context, s)
        return h, context, weights

    def named_params(self):
        yield from self.gru1.named_params()
        yield from self.gru2.named_params()
        yield from self.attention.named_params()
        if self.init_mode == "mean_state":
            yield self.w_init.name, self.w_init
            yield self.b_init.name, self.b_init


def cgru_step(dec: CgruDecoder, y_prev_emb, h_prev, annotations):
    """Single conditional-GRU step with attention precomputed on the fly."""
    ann_proj = dec.attention.project_annotations(annotations)
    return dec.step(y_prev_emb, h_prev, annotations, ann_proj)


class OutputHead:
    """Pre-softmax output layer, conditional (state+feedback+context) or
    simple (state only), projected to vocabulary logits.

    ``out_matrix`` (vocab, emb) is owned by the embedding bundle and may be
    a tied view of the feedback table; it is not re-listed here.
    """

    def __init__(self, factory, prefix, mode, state_dim, emb_dim, annotation_dim,
                 out_matrix, vocab_size):
        if mode not in OUTPUT_MODES:
            raise ConfigError(f"unknown output mode {mode!r}")
        self.mode = mode
        self.w_h = factory.xavier(prefix + ".w_h", (state_dim, emb_dim))
        self.b_o = factory.zeros(prefix + ".b_o", (emb_dim,))
        if mode == "conditional":
            self.w_c = factory.xavier(prefix + ".w_c", (annotation_dim, emb_dim))
        self.w_o = out_matrix
        self.b_logit = factory.zeros(prefix + ".b_logit", (vocab_size,))

    def activation(self, h, y_prev_emb=None, context=None) -> T.Tensor:
        lin = T.add(T.matmul(h, self.w_h), self.b_o)
        if self.mode == "conditional":
            lin = T.add(T.add(lin, y_prev_emb), T.matmul(context, self.w_c))
        return T.tanh(lin)

    def logits_from_activation(self, o: T.Tensor) -> T.Tensor:
        return T.add(T.matmul(o, T.transpose(self.w_o)), self.b_logit)

    def logits(self, h, y_prev_emb=None, context=None) -> T.Tensor:
        return self.logits_from_activation(self.activation(h, y_prev_emb, context))

    def named_params(self):
        yield self.w_h.name, self.w_h
        yield self.b_o.name, self.b_o
        if self.mode == "conditional":
            yield self.w_c.name, self.w_c
        yield self.b_logit.name, self.b_logit


def output_logits(head: OutputHead, h_t, y_prev_emb, c_t) -> T.Tensor:
    return head.logits(h_t, y_prev_emb, c_t)


class FactoredHead:
    """Dual output: a lemma stream and a factor stream of equal length.

    ``shared`` mode computes one pre-softmax activation feeding both
    projections; ``separate`` gives each stream its own activation layer.
    """

    def __init__(self, factory, prefix, h2o_mode, output_mode, state_dim, emb_dim,
                 annotation_dim, lemma_out_matrix, lemma_vocab_size, factor_vocab_size):
        if h2o_mode not in ("shared", "separate"):
            raise ConfigError(f"unknown h2o mode {h2o_mode!r}")
        self.h2o_mode = h2o_mode
        # the lemma head reuses the word head's parameter names, so a factored
        # model with a trivial factor vocabulary initializes and trains
        # identically to the corresponding word model
        self.lemma = OutputHead(factory, prefix, output_mode, state_dim,
                                emb_dim, annotation_dim, lemma_out_matrix,
                                lemma_vocab_size)
        self.w_factor = factory.xavier(prefix + ".w_factor", (factor_vocab_size, emb_dim))
        self.b_factor = factory.zeros(prefix + ".b_factor", (factor_vocab_size,))
        if h2o_mode == "separate":
            self.factor_w_h = factory.xavier(prefix + ".factor.w_h", (state_dim, emb_dim))
            self.factor_b_o = factory.zeros(prefix + ".factor.b_o", (emb_dim,))
            self.factor_mode = output_mode
            if output_mode == "conditional":
                self.factor_w_c = factory.xavier(prefix + ".factor.w_c",
                                                 (annotation_dim, emb_dim))

    def activations(self, h, y_prev_emb=None, context=None):
        """Returns (lemma activation, factor activation)."""
        lemma_o = self.lemma.activation(h, y_prev_emb, context)
        if self.h2o_mode == "shared":
            return lemma_o, lemma_o
        lin = T.add(T.matmul(h, self.factor_w_h), self.factor_b_o)
        if self.factor_mode == "conditional":
            lin = T.add(T.add(lin, y_prev_emb), T.matmul(context, self.factor_w_c))
        return lemma_o, T.tanh(lin)

    def logits(self, lemma_o, factor_o):
        lemma_logits = self.lemma.logits_from_activation(lemma_o)
        factor_logits = T.add(T.matmul(factor_o, T.transpose(self.w_factor)), self.b_factor)
        return lemma_logits, factor_logits

    def named_params(self):
        yield from self.lemma.named_params()
        if self.h2o_mode == "separate":
            yield self.factor_w_h.name, self.factor_w_h
            yield self.factor_b_o.name, self.factor_b_o
            if self.factor_mode == "conditional":
                yield self.factor_w_c.name, self.factor_w_c
        yield self.w_factor.name, self.w_factor
        yield self.b_factor.name, self.b_factor
