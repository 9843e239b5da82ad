"""scikit-learn style wrappers around the model, trainer and importance code.

``Seq2SeqTransformer`` is a regular estimator: ``fit`` trains from scratch,
and with ``warm_start=True`` a second ``fit`` continues from the current
weights (continual training), optionally freezing a module group.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import forensics
from .corpusgen import NUM_RESERVED
from .metrics import corpus_bleu, greedy_decode
from .nanoformer import ConfigError, ModelConfig, build_model
from .trainer import FreezeSpec, TrainOpts, continual_train, train
from .validation import check_parallel, check_token_sequences


class Seq2SeqTransformer(BaseEstimator):
    """Tiny transformer translator with fit / predict / score.

    ``X`` and ``y`` are sequences of token-id sequences that do not use the
    reserved ids 0-2 (pad, bos, eos).
    """

    def __init__(
        self,
        num_layers=2,
        d_model=32,
        d_ffn=64,
        num_heads=4,
        max_len=32,
        dropout=0.0,
        pre_norm=True,
        src_vocab=None,
        tgt_vocab=None,
        epochs=5,
        lr=3e-4,
        batch_size=64,
        seed=0,
        warm_start=False,
        freeze=None,
        freeze_mode="freeze_only",
    ):
        self.num_layers = num_layers
        self.d_model = d_model
        self.d_ffn = d_ffn
        self.num_heads = num_heads
        self.max_len = max_len
        self.dropout = dropout
        self.pre_norm = pre_norm
        self.src_vocab = src_vocab
        self.tgt_vocab = tgt_vocab
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed
        self.warm_start = warm_start
        self.freeze = freeze
        self.freeze_mode = freeze_mode

    def _opts(self, select_on=None) -> TrainOpts:
        return TrainOpts(epochs=self.epochs, lr=self.lr, batch_size=self.batch_size, seed=self.seed, select_on=select_on)

    def fit(self, X, y, eval_sets=None):
        X, y = check_parallel(X, y, min_id=NUM_RESERVED)
        pairs = list(zip(X, y))
        if self.warm_start and hasattr(self, "model_"):
            check_parallel(X, y, self.model_.config.src_vocab, self.model_.config.tgt_vocab, NUM_RESERVED)
            if self.freeze is None:
                spec = FreezeSpec()
            else:
                spec = FreezeSpec.from_group(self.model_, self.freeze_mode, self.freeze)
            self.log_ = continual_train(self.model_, pairs, spec, self._opts(), eval_sets)
            self.history_.append(self.log_)
            return self
        src_vocab = self.src_vocab or max(max(s) for s in X) + 1
        tgt_vocab = self.tgt_vocab or max(max(t) for t in y) + 1
        longest = max(max(len(s) for s in X), max(len(t) for t in y)) + 1
        if longest > self.max_len:
            raise ConfigError(f"sentences need max_len >= {longest}, got {self.max_len}")
        cfg = ModelConfig(
            num_layers=self.num_layers, d_model=self.d_model, d_ffn=self.d_ffn, num_heads=self.num_heads,
            src_vocab=src_vocab, tgt_vocab=tgt_vocab, max_len=self.max_len, dropout=self.dropout,
            seed=self.seed, pre_norm=self.pre_norm,
        )
        self.model_ = build_model(cfg)
        self.log_ = train(self.model_, pairs, self._opts(), eval_sets)
        self.history_ = [self.log_]
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = check_token_sequences(X, "X", self.model_.config.src_vocab, NUM_RESERVED)
        return greedy_decode(self.model_, X)

    def score(self, X, y):
        """Corpus BLEU of greedy translations of ``X`` against ``y``."""
        hyps = self.predict(X)
        y = check_token_sequences(y, "y")
        return corpus_bleu(hyps, y).bleu


class TaylorImportance(BaseEstimator):
    """Per-weight first-order Taylor importance of a fitted translator."""

    def __init__(self, estimator=None, t_limit=2000, domain="G"):
        self.estimator = estimator
        self.t_limit = t_limit
        self.domain = domain

    def fit(self, X, y):
        check_is_fitted(self.estimator, "model_")
        cfg = self.estimator.model_.config
        X, y = check_parallel(X, y, cfg.src_vocab, cfg.tgt_vocab, NUM_RESERVED)
        self.importance_ = forensics.accumulate_importance(
            self.estimator.model_, list(zip(X, y)), self.t_limit, self.domain
        )
        self.n_examples_ = self.importance_.num_examples
        return self

    def scores(self, tag) -> np.ndarray:
        check_is_fitted(self, "importance_")
        return self.importance_.get(tag)

    def erasure_curve(self, tag, ordering, X, y, fractions=forensics.DEFAULT_FRACTIONS):
        check_is_fitted(self, "importance_")
        X, y = check_parallel(X, y)
        return forensics.erase_and_eval(
            self.estimator.model_, self.importance_, tag, ordering, fractions, list(zip(X, y))
        )
