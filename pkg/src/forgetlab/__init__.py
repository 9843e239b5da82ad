"""forgetlab: catastrophic forgetting forensics for tiny transformer translators.

The package is built from small pieces that can be used on their own:

- ``ndgrad``      reverse-mode autodiff over numpy arrays
- ``nanoformer``  encoder-decoder transformer, parameter tags, checkpoints
- ``corpusgen``   synthetic parallel corpora for two related domains
- ``trainer``     Adam training, continual training with module freezing
- ``metrics``     corpus BLEU-4 and greedy decoding
- ``forensics``   Taylor importance, erasure curves, heatmaps, drift
- ``cli``         the ``forgetlab`` command
"""

from .corpusgen import DomainSpec, ParallelCorpus, make_domain_pair, sample_corpus
from .estimator import Seq2SeqTransformer, TaylorImportance
from .forensics import (
    DriftReport,
    ErasureCurve,
    ImportanceMap,
    accumulate_importance,
    decile_drift,
    erase_and_eval,
    export_heatmap,
)
from .metrics import BleuReport, corpus_bleu, evaluate_bleu, greedy_decode
from .nanoformer import (
    ConfigError,
    Grouping,
    Model,
    ModelConfig,
    ParamTag,
    build_model,
    enumerate_groups,
    forward,
    load_checkpoint,
    save_checkpoint,
)
from .trainer import FreezeSpec, TrainOpts, continual_train, run_strategy_sweep, train

__version__ = "0.1.0"

__all__ = [
    "BleuReport",
    "ConfigError",
    "DomainSpec",
    "DriftReport",
    "ErasureCurve",
    "FreezeSpec",
    "Grouping",
    "ImportanceMap",
    "Model",
    "ModelConfig",
    "ParallelCorpus",
    "ParamTag",
    "Seq2SeqTransformer",
    "TaylorImportance",
    "TrainOpts",
    "accumulate_importance",
    "build_model",
    "continual_train",
    "corpus_bleu",
    "decile_drift",
    "enumerate_groups",
    "erase_and_eval",
    "evaluate_bleu",
    "export_heatmap",
    "forward",
    "greedy_decode",
    "load_checkpoint",
    "make_domain_pair",
    "run_strategy_sweep",
    "sample_corpus",
    "save_checkpoint",
    "train",
]
