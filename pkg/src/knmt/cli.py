"""Batch command-line entry points: train, finetune, translate, backtranslate,
bpe-learn, bpe-apply, score-bleu, lm-train, lm-score, rerank, tune-weights,
reinflect, and params.

Configuration files hold "key = value" lines; unknown keys are a hard error
and every effective value is echoed to the run log (KNMT_LOG=info|debug).
All randomness flows from --seed through named sub-generators.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import metrics as bleu_mod
from . import corpus as corpus_mod
from . import lm as lm_mod
from . import model as model_mod
from . import rerank as rerank_mod
from . import search as search_mod
from . import subword as subword_mod
from . import training as training_mod
from .errors import ConfigError, KnmtError

log = logging.getLogger("knmt")

# every config key with (type, default); defaults mirror the small-pair recipe
CONFIG_SPEC = {
    "emb_dim": (int, 200),
    "enc_hidden": (int, 500),
    "dec_hidden": (int, 500),
    "align_dim": (int, None),
    "tying_mode": (str, "tied2"),
    "init_mode": (str, "mean_state"),
    "output_mode": (str, "conditional"),
    "factored": (bool, False),
    "h2o_mode": (str, "shared"),
    "dropout_p": (float, 0.2),
    "layer_norm": (bool, True),
    "precision": (str, "f4"),
    "lr": (float, 4e-4),
    "max_norm": (float, 5.0),
    "patience": (int, 20),
    "validate_every": (str, "0.25ep"),
    "batch_size": (int, 64),
    "max_epochs": (int, None),
    "max_updates": (int, None),
    "valid_beam": (int, 1),
    "valid_max_len": (int, None),
    "smooth_valid_bleu": (bool, False),
    "beam": (int, 12),
    "max_len": (int, 100),
    "length_norm": (bool, True),
    "factor_k": (int, 3),
    "reinflect_k": (int, 10),
    "reinflect_cap": (int, 1000),
    "max_vocab": (int, None),
    "min_freq": (int, 1),
    "filter_min_len": (int, None),
    "filter_max_len": (int, None),
    "max_ratio": (float, None),
    "lm_kind": (str, "gru"),
    "src_vocab_size": (int, None),
    "tgt_vocab_size": (int, None),
    "factor_vocab_size": (int, None),
    "seed": (int, 1),
}


def _parse_value(key: str, raw: str):
    typ, _ = CONFIG_SPEC[key]
    raw = raw.strip()
    if raw.lower() in ("none", ""):
        return None
    if typ is bool:
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"config key {key}: expected a boolean, got {raw!r}")
    try:
        return typ(raw)
    except ValueError as exc:
        raise ConfigError(f"config key {key}: {exc}") from exc


class RunConfig:
    """Config file merged with command-line overrides; unknown keys fail."""

    def __init__(self, path=None, overrides=None):
        self.values = {k: d for k, (_, d) in CONFIG_SPEC.items()}
        if path:
            with open(path, encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, 1):
                    line = line.split("#", 1)[0].strip()
                    if not line:
                        continue
                    key, sep, value = line.partition("=")
                    key = key.strip()
                    if not sep:
                        raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
                    if key not in CONFIG_SPEC:
                        raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
                    self.values[key] = _parse_value(key, value)
        for key, value in (overrides or {}).items():
            if value is None:
                continue
            if key not in CONFIG_SPEC:
                raise ConfigError(f"unknown config key {key!r}")
            self.values[key] = value
        for key in sorted(self.values):
            log.info("config %s = %r", key, self.values[key])

    def __getitem__(self, key):
        return self.values[key]

    def validate_every(self):
        raw = str(self.values["validate_every"])
        if raw.endswith("ep"):
            return ("epoch_frac", float(raw[:-2]))
        if raw.endswith("up"):
            return ("updates", int(raw[:-2]))
        return ("epoch_frac", float(raw))

    def schedule(self) -> training_mod.TrainSchedule:
        return training_mod.TrainSchedule(
            lr=self["lr"], max_norm=self["max_norm"], patience=self["patience"],
            validate_every=self.validate_every(), batch_size=self["batch_size"],
            max_epochs=self["max_epochs"], max_updates=self["max_updates"],
            valid_beam=self["valid_beam"], valid_max_len=self["valid_max_len"],
            smooth_valid_bleu=self["smooth_valid_bleu"])

    def model_config(self, src_vocab, tgt_vocab, factor_vocab=None) -> model_mod.ModelConfig:
        return model_mod.ModelConfig(
            src_vocab=src_vocab, tgt_vocab=tgt_vocab, emb_dim=self["emb_dim"],
            enc_hidden=self["enc_hidden"], dec_hidden=self["dec_hidden"],
            align_dim=self["align_dim"], tying_mode=self["tying_mode"],
            init_mode=self["init_mode"], output_mode=self["output_mode"],
            factored=self["factored"], h2o_mode=self["h2o_mode"],
            factor_vocab=factor_vocab, dropout_p=self["dropout_p"],
            layer_norm=self["layer_norm"], precision=self["precision"])


def _read_corpus(args, cfg) -> corpus_mod.ParallelCorpus:
    if getattr(args, "train_manifest", None):
        corpus = corpus_mod.ParallelCorpus.from_manifest(args.train_manifest,
                                                         factored=cfg["factored"])
    else:
        corpus = corpus_mod.ParallelCorpus.from_files(args.train + ".src",
                                                      args.train + ".tgt",
                                                      factored=cfg["factored"])
    if cfg["filter_min_len"] is not None or cfg["filter_max_len"] is not None \
            or cfg["max_ratio"] is not None:
        corpus = corpus_mod.filter_corpus(
            corpus, cfg["filter_min_len"] or 1, cfg["filter_max_len"] or 10 ** 9,
            cfg["max_ratio"])
    return corpus


def _build_vocabs(corpus, cfg):
    src_text = [seg.src for seg in corpus]
    tgt_text = [seg.tgt for seg in corpus]
    if cfg["tying_mode"] == "tied3":
        combined = corpus_mod.Vocabulary.from_corpus(src_text + tgt_text,
                                                     cfg["max_vocab"], cfg["min_freq"])
        src_vocab = tgt_vocab = combined
    else:
        src_vocab = corpus_mod.Vocabulary.from_corpus(src_text, cfg["max_vocab"],
                                                      cfg["min_freq"])
        tgt_vocab = corpus_mod.Vocabulary.from_corpus(tgt_text, cfg["max_vocab"],
                                                      cfg["min_freq"])
    factor_vocab = None
    if cfg["factored"]:
        factor_vocab = corpus_mod.Vocabulary.from_corpus(
            [seg.factors for seg in corpus], cfg["max_vocab"], cfg["min_freq"])
    return src_vocab, tgt_vocab, factor_vocab


def _write_log(path, result):
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            for line in result.log:
                fh.write(line + "\n")


# ---------------------------------------------------------------------------
# subcommands

def cmd_train(args) -> int:
    cfg = RunConfig(args.config, {"seed": args.seed, "factored": args.factored or None})
    corpus = _read_corpus(args, cfg)
    valid = corpus_mod.ParallelCorpus.from_files(args.valid + ".src", args.valid + ".tgt",
                                                 factored=cfg["factored"])
    src_vocab, tgt_vocab, factor_vocab = _build_vocabs(corpus, cfg)
    model = model_mod.build(cfg.model_config(src_vocab, tgt_vocab, factor_vocab),
                            cfg["seed"])
    result = training_mod.train(model, corpus, cfg.schedule(), valid, cfg["seed"])
    model_mod.save_checkpoint(result.model, args.save)
    _write_log(args.log, result)
    log.info("training stopped (%s); best BLEU %.2f at update %d",
             result.stopped_reason, result.best_metric, result.best_update)
    print(f"best_bleu={result.best_metric:.2f}")
    return 0


def cmd_finetune(args) -> int:
    cfg = RunConfig(args.config, {"seed": args.seed, "lr": args.lr})
    spec = training_mod.FinetuneSpec(init_checkpoint=args.model, lr=cfg["lr"],
                                     validate_every=cfg.validate_every())
    header = model_mod.read_checkpoint_header(args.model)
    factored = bool(header["config"]["factored"])
    for key in ("emb_dim", "enc_hidden", "dec_hidden"):
        if args.config and cfg[key] != header["config"][key]:
            raise ConfigError(
                f"config {key}={cfg[key]} conflicts with checkpoint {key}="
                f"{header['config'][key]}")
    corpus = corpus_mod.ParallelCorpus.from_files(args.train + ".src", args.train + ".tgt",
                                                  factored=factored)
    valid = corpus_mod.ParallelCorpus.from_files(args.valid + ".src", args.valid + ".tgt",
                                                 factored=factored)
    result = training_mod.finetune(spec, corpus, valid, cfg["seed"], cfg.schedule())
    model_mod.save_checkpoint(result.model, args.save)
    _write_log(args.log, result)
    print(f"best_bleu={result.best_metric:.2f}")
    return 0


def _load_models(args):
    if getattr(args, "ensemble", None):
        return search_mod.load_ensemble(args.ensemble.split(","))
    return search_mod.load_ensemble([args.model])


def _decode_sentences(models, sentences, cfg, args):
    src_vocab = models[0].config.src_vocab
    tgt_vocab = models[0].config.tgt_vocab
    factored = models[0].config.factored
    beam = 1 if args.greedy else cfg["beam"]
    outputs = []
    nbest = []
    for sent in sentences:
        if not sent:
            outputs.append([])
            nbest.append([])
            continue
        src_ids = src_vocab.ids(sent)
        max_len = cfg["max_len"]
        if factored:
            hyps = search_mod.factored_beam_decode(
                models, src_ids, beam=beam, max_len=max_len,
                factor_k=cfg["factor_k"], length_norm=cfg["length_norm"])
            best = hyps[0]
            lemmas = tgt_vocab.to_sentence(best.tokens)
            factors = models[0].config.factor_vocab.to_sentence(best.factors)
            outputs.append([corpus_mod.factored_token(l, f)
                            for l, f in zip(lemmas, factors)])
        elif args.greedy:
            best = search_mod.greedy_decode(models, src_ids, max_len)
            hyps = [best]
            outputs.append(tgt_vocab.to_sentence(best.tokens))
        else:
            hyps = search_mod.beam_decode(models, src_ids, beam=beam, max_len=max_len,
                                          length_norm=cfg["length_norm"])
            outputs.append(tgt_vocab.to_sentence(hyps[0].tokens))
        nbest.append(hyps)
    return outputs, nbest


def cmd_translate(args) -> int:
    cfg = RunConfig(args.config, {"seed": args.seed, "beam": args.beam,
                                  "max_len": args.max_len,
                                  "length_norm": args.length_norm,
                                  "factor_k": args.factor_k})
    models = _load_models(args)
    sentences = corpus_mod.read_tokenized(args.input)
    jobs = max(1, args.jobs)
    if jobs > 1:
        from multiprocessing import get_context

        chunks = [sentences[i::jobs] for i in range(jobs)]
        with get_context("spawn").Pool(jobs) as pool:
            parts = pool.starmap(_decode_sentences,
                                 [(models, chunk, cfg, args) for chunk in chunks])
        outputs = [None] * len(sentences)
        nbest = [None] * len(sentences)
        for j, (outs, nbs) in enumerate(parts):
            for i, (o, nb) in enumerate(zip(outs, nbs)):
                outputs[j + i * jobs] = o
                nbest[j + i * jobs] = nb
    else:
        outputs, nbest = _decode_sentences(models, sentences, cfg, args)
    if args.detok:
        outputs = [search_mod.detokenize_bpe(o) for o in outputs]
    corpus_mod.write_tokenized(args.output, outputs)
    if args.nbest:
        tgt_vocab = models[0].config.tgt_vocab
        search_mod.write_nbest(args.nbest, nbest,
                               lambda h: tgt_vocab.to_sentence(h.tokens))
    return 0


def cmd_backtranslate(args) -> int:
    cfg = RunConfig(args.config, {"seed": args.seed, "beam": args.beam,
                                  "max_len": args.max_len})
    model = model_mod.load_checkpoint(args.model)
    mono = corpus_mod.read_tokenized(args.mono)
    limit = len(mono) if args.limit is None else args.limit
    assembled = corpus_mod.assemble_bt_corpus(
        corpus_mod.ParallelCorpus(), mono, model, limit,
        beam=cfg["beam"], max_len=cfg["max_len"])
    corpus_mod.write_tokenized(args.out_src, [seg.src for seg in assembled])
    corpus_mod.write_tokenized(args.out_tgt, [seg.tgt for seg in assembled])
    print(f"synthetic_pairs={len(assembled)} skipped={assembled.bt_skipped}")
    return 0


def cmd_bpe_learn(args) -> int:
    corpora = [corpus_mod.read_tokenized(path) for path in args.files]
    model = subword_mod.bpe_learn(corpora, args.merges)
    model.save(args.out)
    print(f"merges={len(model)}")
    return 0


def cmd_bpe_apply(args) -> int:
    model = subword_mod.SubwordModel.load(args.model)
    sentences = corpus_mod.read_tokenized(args.input)
    out = []
    for sent in sentences:
        if args.factored:
            lemmas, factors = corpus_mod.split_factored(sent)
            sub_l, sub_f = subword_mod.factored_bpe_apply(model, lemmas, factors)
            out.append([corpus_mod.factored_token(l, f) for l, f in zip(sub_l, sub_f)])
        else:
            out.append(subword_mod.bpe_apply(model, sent))
    corpus_mod.write_tokenized(args.output, out)
    return 0


def cmd_score_bleu(args) -> int:
    hyps = corpus_mod.read_tokenized(args.hyp)
    refs = corpus_mod.read_tokenized(args.ref)
    report = bleu_mod.bleu(hyps, refs, smooth=args.smooth)
    print(report.format())
    return 0


def cmd_lm_train(args) -> int:
    cfg = RunConfig(args.config, {"seed": args.seed, "lm_kind": args.kind})
    sentences = corpus_mod.read_tokenized(args.train)
    valid = corpus_mod.read_tokenized(args.valid)
    vocab = corpus_mod.Vocabulary.from_corpus(sentences, cfg["max_vocab"], cfg["min_freq"])
    lm_cfg = lm_mod.LmConfig(vocab=vocab, kind=cfg["lm_kind"], emb_dim=cfg["emb_dim"],
                             hidden=cfg["enc_hidden"], dropout_p=cfg["dropout_p"],
                             precision=cfg["precision"])
    result = lm_mod.lm_train(sentences, valid, lm_cfg, cfg.schedule(), cfg["seed"])
    lm_mod.save_lm(result.model, args.save)
    _write_log(args.log, result)
    print(f"best_perplexity={-result.best_metric:.4f}")
    return 0


def cmd_lm_score(args) -> int:
    lm = lm_mod.load_lm(args.model)
    sentences = corpus_mod.read_tokenized(args.input)
    lines = []
    for sent in sentences:
        tokens = sent + ["<eos>"] if args.add_eos else sent
        lines.append(f"{lm_mod.lm_score(lm, tokens):.6f}")
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
    else:
        print("\n".join(lines))
    return 0


def cmd_rerank(args) -> int:
    weights = rerank_mod.load_weights(args.weights)
    table = search_mod.read_nbest(args.nbest)
    n_sentences = (max(table) + 1) if table else 0
    out = []
    for i in range(n_sentences):
        row = [(tokens, feats) for tokens, feats, _ in table.get(i, [])]
        if not row:
            out.append([])
            continue
        reranked = rerank_mod.rescore_nbest(row, [], weights)
        out.append(reranked[0][0])
    corpus_mod.write_tokenized(args.output, out)
    return 0


def cmd_tune_weights(args) -> int:
    table = search_mod.read_nbest(args.nbest)
    refs = corpus_mod.read_tokenized(args.ref)
    nbest = []
    for i in range(len(refs)):
        nbest.append([(tokens, feats) for tokens, feats, _ in table.get(i, [])])
    weights = rerank_mod.tune_weights(nbest, refs, iterations=args.iterations,
                                      seed=args.seed)
    rerank_mod.save_weights(args.out, weights)
    print(" ".join(f"{k}={v:.4f}" for k, v in sorted(weights.items())))
    return 0


def cmd_reinflect(args) -> int:
    dictionary = search_mod.ReinflectionDictionary.load(args.dict)
    sentences = corpus_mod.read_tokenized(args.input)
    out = []
    total_misses = 0
    for sent in sentences:
        lemmas, factors = corpus_mod.split_factored(sent)
        lemmas, factors = search_mod.detokenize_factored(lemmas, factors)
        expanded, misses = search_mod.reinflect(dictionary, lemmas, factors,
                                                args.k, cap=args.cap)
        total_misses += misses
        out.append(expanded[0] if expanded else [])
    corpus_mod.write_tokenized(args.output, out)
    print(f"misses={total_misses}")
    return 0


def cmd_params(args) -> int:
    cfg = RunConfig(args.config, {})

    def fake_vocab(size):
        if size is None:
            raise ConfigError("params requires src_vocab_size and tgt_vocab_size")
        return corpus_mod.Vocabulary([f"w{i}" for i in range(size - 4)])

    src = fake_vocab(cfg["src_vocab_size"])
    tgt = src if cfg["tying_mode"] == "tied3" else fake_vocab(cfg["tgt_vocab_size"])
    factor = fake_vocab(cfg["factor_vocab_size"]) if cfg["factored"] else None
    count = model_mod.param_count(cfg.model_config(src, tgt, factor))
    print(count)
    return 0


# ---------------------------------------------------------------------------
# argument parsing

def _add_common(p, config=True):
    if config:
        p.add_argument("--config", default=None, help="key = value configuration file")
    p.add_argument("--seed", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="knmt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a translation model")
    _add_common(p)
    p.add_argument("--train", help="corpus prefix (prefix.src / prefix.tgt)")
    p.add_argument("--train-manifest", help="weighted manifest: 'prefix<TAB>weight' lines")
    p.add_argument("--valid", required=True, help="validation corpus prefix")
    p.add_argument("--save", required=True, help="output checkpoint path")
    p.add_argument("--log", default=None, help="training log path")
    p.add_argument("--factored", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="continue training from a checkpoint")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--valid", required=True)
    p.add_argument("--save", required=True)
    p.add_argument("--log", default=None)
    p.add_argument("--lr", type=float, default=1e-4)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("translate", help="decode a source file")
    _add_common(p)
    p.add_argument("--model")
    p.add_argument("--ensemble", help="comma-separated checkpoints")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--beam", type=int, default=None)
    p.add_argument("--greedy", action="store_true")
    p.add_argument("--max-len", type=int, default=None, dest="max_len")
    p.add_argument("--length-norm", dest="length_norm", action="store_true", default=None)
    p.add_argument("--no-length-norm", dest="length_norm", action="store_false")
    p.add_argument("--factor-k", type=int, default=None, dest="factor_k")
    p.add_argument("--detok", action="store_true", help="join @@ pieces in the output")
    p.add_argument("--nbest", default=None, help="also write an n-best file")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("backtranslate", help="synthesize sources from target monolingual text")
    _add_common(p)
    p.add_argument("--model", required=True, help="reverse (target->source) checkpoint")
    p.add_argument("--mono", required=True)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--out-src", required=True)
    p.add_argument("--out-tgt", required=True)
    p.add_argument("--beam", type=int, default=None)
    p.add_argument("--max-len", type=int, default=None, dest="max_len")
    p.set_defaults(func=cmd_backtranslate)

    p = sub.add_parser("bpe-learn", help="learn a joint BPE model")
    _add_common(p, config=False)
    p.add_argument("--merges", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("files", nargs="+", help="token files forming the learn set")
    p.set_defaults(func=cmd_bpe_learn)

    p = sub.add_parser("bpe-apply", help="apply a BPE model to a token file")
    _add_common(p, config=False)
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--factored", action="store_true",
                   help="treat tokens as lemma|factors and repeat factors on splits")
    p.set_defaults(func=cmd_bpe_apply)

    p = sub.add_parser("score-bleu", help="corpus BLEU of a hypothesis file")
    _add_common(p, config=False)
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--smooth", action="store_true")
    p.set_defaults(func=cmd_score_bleu)

    p = sub.add_parser("lm-train", help="train a recurrent language model")
    _add_common(p)
    p.add_argument("--train", required=True)
    p.add_argument("--valid", required=True)
    p.add_argument("--save", required=True)
    p.add_argument("--log", default=None)
    p.add_argument("--kind", choices=lm_mod.LM_KINDS, default=None)
    p.set_defaults(func=cmd_lm_train)

    p = sub.add_parser("lm-score", help="per-sentence log-probabilities")
    _add_common(p, config=False)
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", default=None)
    p.add_argument("--add-eos", action="store_true", dest="add_eos")
    p.set_defaults(func=cmd_lm_score)

    p = sub.add_parser("rerank", help="pick 1-best from an n-best file under weights")
    _add_common(p, config=False)
    p.add_argument("--nbest", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_rerank)

    p = sub.add_parser("tune-weights", help="optimize rerank weights for dev BLEU")
    _add_common(p, config=False)
    p.add_argument("--nbest", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int, default=2)
    p.set_defaults(func=cmd_tune_weights)

    p = sub.add_parser("reinflect", help="map factored output to surface words")
    _add_common(p, config=False)
    p.add_argument("--dict", required=True)
    p.add_argument("--input", required=True, help="factored token file (lemma|factors)")
    p.add_argument("--output", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--cap", type=int, default=1000)
    p.set_defaults(func=cmd_reinflect)

    p = sub.add_parser("params", help="parameter count implied by a configuration")
    _add_common(p, config=True)
    p.set_defaults(func=cmd_params)

    return parser


def main(argv=None) -> int:
    level = {"debug": logging.DEBUG, "info": logging.INFO}.get(
        os.environ.get("KNMT_LOG", "").lower(), logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except KnmtError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
