"""Adam optimization with gradient clipping, BLEU-based early stopping,
best-checkpoint selection, and fine-tuning on synthetic data.

The training log carries one line per validation:
"update<TAB>epoch<TAB>loss<TAB>valid_bleu<TAB>best".
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .metrics import bleu
from .corpus import ParallelCorpus, make_batches
from .errors import ConfigError, ContractError, NumericError
from .rng import RngHub


@dataclass
class AdamState:
    lr: float = 4e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    moments: dict = field(default_factory=dict)


def adam_step(state: AdamState, params, grads=None) -> None:
    """Bias-corrected Adam update, in place.

    ``params`` is a list of (name, Tensor); ``grads`` optionally overrides
    the tensors' own grad buffers.
    """
    named = list(params)
    if grads is None:
        grads = [p.grad for _, p in named]
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    correction = math.sqrt(1.0 - b2 ** state.t) / (1.0 - b1 ** state.t)
    alpha = state.lr * correction
    for (name, p), g in zip(named, grads):
        if g is None:
            continue
        if T.is_checked() and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
        if g.shape != p.data.shape:
            raise ContractError(f"gradient shape mismatch for {name}")
        m, v = state.moments.get(name, (None, None))
        if m is None:
            m = np.zeros_like(p.data, dtype=np.float64)
            v = np.zeros_like(p.data, dtype=np.float64)
            state.moments[name] = (m, v)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        p.data -= (alpha * m / (np.sqrt(v) + state.epsilon)).astype(p.data.dtype)


@dataclass
class TrainSchedule:
    lr: float = 4e-4
    max_norm: float = 5.0
    patience: int = 20
    validate_every: tuple = ("epoch_frac", 0.25)
    batch_size: int = 64
    max_epochs: int | None = None
    max_updates: int | None = None
    selection_metric: str = "bleu"
    valid_beam: int = 1
    valid_max_len: int | None = None
    smooth_valid_bleu: bool = False


@dataclass
class TrainResult:
    model: object
    log: list
    best_metric: float
    best_update: int
    final_metric: float
    stopped_reason: str


def _snapshot(model):
    return {name: p.data.copy() for name, p in model.named_params()}


def _restore(model, snap):
    for name, p in model.named_params():
        p.data[...] = snap[name]


def _fit(model, make_batches_fn, loss_fn, validate_fn, schedule: TrainSchedule,
         hub: RngHub) -> TrainResult:
    """Shared optimization loop: forward, backward, clip, Adam, validate."""
    adam = AdamState(lr=schedule.lr)
    named = list(model.named_params())
    log: list[str] = []
    best_metric = -math.inf
    best_display = -math.inf
    best_snap = _snapshot(model)
    best_update = 0
    since_best = 0
    updates = 0
    epoch = 0
    loss_accum, loss_count = 0.0, 0
    stopped = "max_epochs"

    if schedule.max_updates == 0:
        display, score = validate_fn()
        return TrainResult(model, log, score, 0, score, "max_updates")

    def validate(progress):
        nonlocal best_metric, best_display, best_snap, best_update, since_best, \
            loss_accum, loss_count
        display, score = validate_fn()
        improved = score > best_metric
        if improved:
            best_metric = score
            best_display = display
            best_snap = _snapshot(model)
            best_update = updates
            since_best = 0
        else:
            since_best += 1
        mean_loss = loss_accum / max(1, loss_count)
        log.append(f"{updates}\t{progress:.2f}\t{mean_loss:.4f}"
                   f"\t{display:.2f}\t{best_display:.2f}")
        loss_accum, loss_count = 0.0, 0

    done = False
    while not done:
        if schedule.max_epochs is not None and epoch >= schedule.max_epochs:
            stopped = "max_epochs"
            break
        batches = make_batches_fn(hub)
        kind, value = schedule.validate_every
        if kind == "epoch_frac":
            interval = max(1, round(len(batches) * value))
        elif kind == "updates":
            interval = int(value)
        else:
            raise ConfigError(f"unknown validate_every kind {kind!r}")
        for batch_index, batch in enumerate(batches):
            try:
                with T.checked(True):
                    loss = loss_fn(batch, hub)
                    loss_val = loss.item()
                    if not math.isfinite(loss_val):
                        raise NumericError("loss diverged")
                    loss.backward()
                    grads = [p.grad for _, p in named]
                    T.clip_global_norm(grads, schedule.max_norm)
                    adam_step(adam, named, grads)
            except NumericError:
                _restore(model, best_snap)
                return TrainResult(model, log, best_metric, best_update,
                                   best_metric, "diverged")
            for _, p in named:
                p.grad = None
            loss_accum += loss_val
            loss_count += 1
            updates += 1
            if updates % interval == 0:
                validate(epoch + (batch_index + 1) / len(batches))
                if since_best >= schedule.patience:
                    stopped = "patience"
                    done = True
                    break
            if schedule.max_updates is not None and updates >= schedule.max_updates:
                stopped = "max_updates"
                done = True
                break
        epoch += 1

    final_metric = best_metric if not log else float(log[-1].split("\t")[3])
    _restore(model, best_snap)
    return TrainResult(model, log, best_metric, best_update, final_metric, stopped)


def _make_validator(model, valid_set: ParallelCorpus, schedule: TrainSchedule):
    """Greedy (or small-beam) decode of the validation set, scored with BLEU."""
    from .search import beam_decode, factored_beam_decode, greedy_decode_corpus

    cfg = model.config
    refs = [list(seg.tgt) for seg in valid_set]
    srcs = [cfg.src_vocab.ids(seg.src) for seg in valid_set]

    def validate():
        if cfg.factored:
            hyps = []
            for src_ids, seg in zip(srcs, valid_set):
                max_len = schedule.valid_max_len or (2 * len(seg.src) + 5)
                best = factored_beam_decode(model, src_ids, beam=max(1, schedule.valid_beam),
                                            max_len=max_len)[0]
                hyps.append(cfg.tgt_vocab.to_sentence(best.tokens))
        elif schedule.valid_beam <= 1:
            best_hyps = greedy_decode_corpus(model, srcs, max_len=schedule.valid_max_len)
            hyps = [cfg.tgt_vocab.to_sentence(h.tokens) for h in best_hyps]
        else:
            hyps = []
            for src_ids, seg in zip(srcs, valid_set):
                max_len = schedule.valid_max_len or (2 * len(seg.src) + 5)
                best = beam_decode(model, src_ids, beam=schedule.valid_beam,
                                   max_len=max_len)[0]
                hyps.append(cfg.tgt_vocab.to_sentence(best.tokens))
        report = bleu(hyps, refs, smooth=schedule.smooth_valid_bleu)
        return report.bleu, report.bleu

    return validate


def train(model, corpus: ParallelCorpus, schedule: TrainSchedule,
          valid_set: ParallelCorpus, seed: int) -> TrainResult:
    """Early-stopped Adam training; returns the best-BLEU model and the log."""
    if len(corpus) == 0 or len(valid_set) == 0:
        raise ContractError("train requires non-empty corpus and validation set")
    cfg = model.config
    hub = RngHub(seed)

    def batches_fn(hub_):
        return make_batches(corpus, cfg.src_vocab, cfg.tgt_vocab, schedule.batch_size,
                            hub_.stream("shuffle"),
                            cfg.factor_vocab if cfg.factored else None)

    def loss_fn(batch, hub_):
        return model.loss(batch, hub_, training=True)

    return _fit(model, batches_fn, loss_fn, _make_validator(model, valid_set, schedule),
                schedule, hub)


@dataclass
class FinetuneSpec:
    init_checkpoint: str
    lr: float = 1e-4
    validate_every: tuple = ("updates", 5000)


def finetune(spec: FinetuneSpec, corpus: ParallelCorpus, valid_set: ParallelCorpus,
             seed: int, schedule: TrainSchedule | None = None) -> TrainResult:
    """Continue training from a checkpoint at a low learning rate.

    Defaults follow the synthetic-data recipe: lr 1e-4 with validations
    every 5K updates; ``schedule`` overrides any other knob.
    """
    from .model import load_checkpoint

    model = load_checkpoint(spec.init_checkpoint)
    if any(seg.factors is not None for seg in corpus) != model.config.factored:
        raise ConfigError("checkpoint and fine-tuning data disagree on factored output")
    base = schedule or TrainSchedule()
    sched = replace(base, lr=spec.lr, validate_every=spec.validate_every)
    return train(model, corpus, sched, valid_set, seed)
