"""scikit-learn style wrapper: ``fit`` trains on a corpus, ``predict`` runs inference, ``score`` is the combined score."""

from __future__ import annotations

import os
from collections.abc import Sequence

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import corpus as C
from . import evaluator as E
from . import objectives as O
from .gumbel import GumbelConfig
from .model import ModelConfig, TODModel
from .trainer import TrainConfig, train


def check_corpus(X) -> C.Corpus:
    """Accept a :class:`Corpus` or a directory written by ``save_corpus``."""
    if isinstance(X, C.Corpus):
        return X
    if isinstance(X, (str, os.PathLike)):
        if not os.path.isdir(X):
            raise FileNotFoundError(f"corpus directory not found: {X}")
        return C.load_corpus(X)
    raise TypeError(f"expected a Corpus or a corpus directory, got {type(X).__name__}")


def check_dialogues(X, corpus: C.Corpus, default_split: str = "test") -> list:
    """Resolve ``X`` to a list of dialogues: a split name, a Corpus (its default split) or dialogues."""
    if isinstance(X, str):
        if X not in C.SPLITS:
            raise ValueError(f"unknown split {X!r}; expected one of {', '.join(C.SPLITS)}")
        return corpus.split(X)
    if isinstance(X, C.Corpus):
        return X.split(default_split)
    if isinstance(X, Sequence) and all(isinstance(d, C.Dialogue) for d in X):
        if not X:
            raise ValueError("no dialogues given")
        return list(X)
    raise TypeError("expected a split name, a Corpus or a sequence of Dialogue records")


class TODSystem(BaseEstimator):
    """End-to-end dialogue system trained with an optional selection objective.

    ``variant`` is ``"none"`` (baseline), ``"after_encoder"`` or
    ``"differentiable"``. Fitted attributes: ``model_``, ``corpus_``,
    ``train_state_``.
    """

    def __init__(
        self,
        variant: str = "none",
        d_model: int = 96,
        n_heads: int = 4,
        n_layers: int = 2,
        d_ff: int | None = None,
        max_seq_len: int = 208,
        dropout_rate: float = 0.1,
        epochs: int = 200,
        batch_size: int = 16,
        max_steps: int | None = 500,
        lr_peak: float = 5e-4,
        alpha: float = 1.0,
        beta: float = 1.0,
        gamma: float = 0.5,
        delta: float = 0.5,
        tau_initial: float = 4.0,
        tau_final: float = 0.8,
        max_decode_len: int = 48,
        out_dir: str | None = None,
        seed: int = 0,
    ):
        self.variant = variant
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_layers = n_layers
        self.d_ff = d_ff
        self.max_seq_len = max_seq_len
        self.dropout_rate = dropout_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.lr_peak = lr_peak
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.delta = delta
        self.tau_initial = tau_initial
        self.tau_final = tau_final
        self.max_decode_len = max_decode_len
        self.out_dir = out_dir
        self.seed = seed

    def _model_config(self, corpus: C.Corpus) -> ModelConfig:
        return ModelConfig(
            vocab_size=len(corpus.vocab),
            d_model=self.d_model,
            n_heads=self.n_heads,
            n_encoder_layers=self.n_layers,
            n_decoder_layers=self.n_layers,
            d_ff=self.d_ff or 2 * self.d_model,
            max_seq_len=self.max_seq_len,
            n_span_tags=len(corpus.tag_names),
            dropout_rate=self.dropout_rate,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr_peak=self.lr_peak,
            weights=O.LossWeights(self.alpha, self.beta, self.gamma, self.delta),
            variant=self.variant,
            gumbel=GumbelConfig(self.tau_initial, self.tau_final),
            seed=self.seed,
            max_steps=self.max_steps,
            max_decode_len=self.max_decode_len,
        )

    def fit(self, X, y=None):
        corpus = check_corpus(X)
        state, model = train(corpus, self._model_config(corpus), self._train_config(), out_dir=self.out_dir)
        if state.best_checkpoint is not None and os.path.isdir(state.best_checkpoint):
            model = TODModel.load(state.best_checkpoint)
        self.model_ = model
        self.corpus_ = corpus
        self.train_state_ = state
        self.n_parameters_ = model.n_parameters(self.variant)
        return self

    def predict(self, X="test", oracle_belief: bool = False) -> list:
        """Generated dialogues (:class:`GeneratedDialogue`) for ``X``."""
        check_is_fitted(self, "model_")
        dialogues = check_dialogues(X, self.corpus_)
        gen = E.ModelGenerator(self.model_, self.corpus_.vocab, self.max_decode_len)
        return E.run_inference(gen, self.corpus_, dialogues, self.model_.config.max_seq_len, oracle_belief)

    def evaluate(self, X="test", oracle_belief: bool = False) -> E.MetricsReport:
        return E.build_report(self.predict(X, oracle_belief), self.corpus_.db)

    def score(self, X="test", y=None) -> float:
        """Combined score ``0.5 * (Inform + Success) + BLEU``."""
        return self.evaluate(X).combined
