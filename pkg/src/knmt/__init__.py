"""knmt: a desk-scale attentive encoder-decoder NMT toolkit.

Subword (BPE) segmentation, bi-GRU encoding with layer normalization, a
conditional-GRU attention decoder with tying / init / output-head variants,
factored lemma+factor outputs, Adam training with BLEU early stopping,
back-translation, beam and ensemble decoding, dictionary reinflection, and
n-best reranking with tunable feature weights.
"""

from .metrics import BleuReport, bleu
from .corpus import (
    ParallelCorpus,
    Segment,
    Vocabulary,
    assemble_bt_corpus,
    filter_corpus,
    make_batches,
)
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DimensionError,
    KnmtError,
    NumericError,
    VocabularyError,
)
from .model import (
    ModelConfig,
    Seq2SeqModel,
    build,
    count_params,
    forward_loss,
    load_checkpoint,
    param_count,
    save_checkpoint,
)
from .lm import LanguageModel, LmConfig, lm_score, lm_train, load_lm, perplexity, save_lm
from .rerank import nmt_logprob, rescore_nbest, tune_weights
from .search import (
    Hypothesis,
    ReinflectionDictionary,
    beam_decode,
    detokenize_bpe,
    factored_beam_decode,
    greedy_decode,
    greedy_decode_corpus,
    load_ensemble,
    reinflect,
)
from .subword import SubwordModel, bpe_apply, bpe_learn, factored_bpe_apply
from .training import AdamState, FinetuneSpec, TrainSchedule, adam_step, finetune, train

__version__ = "0.1.0"
